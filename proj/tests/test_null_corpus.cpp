#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "nullcal/model_io.hpp"
#include "nullcal/null_corpus.hpp"
#include "test_support.hpp"

using namespace nullcal;
using namespace nullcal::testing;
using nlohmann::json;

TEST(NullInput, NormalizationAndIds) {
  EXPECT_EQ(normalize_null_text("  A  message\t without\n purpose. "), "A message without purpose.");
  EXPECT_EQ(null_input_id("abc"), null_input_id("abc"));
  EXPECT_NE(null_input_id("abc"), null_input_id("abd"));
  EXPECT_EQ(null_input_id("abc").size(), 16u);
  // FNV-1a 64 of "a".
  EXPECT_EQ(null_input_id("a"), "af63dc4c8601ec8c");
}

TEST(NullCorpus, DeduplicatesOnNormalizedText) {
  NullCorpus c;
  EXPECT_TRUE(c.add("Words  without message.", NullSource::File));
  EXPECT_FALSE(c.add(" Words without message. ", NullSource::File));
  EXPECT_TRUE(c.add("words without message.", NullSource::File));
  EXPECT_THROW(c.add("   ", NullSource::File), ConfigError);
  EXPECT_EQ(c.size(), 2u);
  EXPECT_FALSE(c.all_scored());
}

TEST(NullCorpus, IngestReportsLineNumbers) {
  auto line_of = [](const std::string& text) -> std::size_t {
    std::istringstream in(text);
    try {
      ingest(in);
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of("{\"text\": \"a\"}\n\n{\"text\": \"b\"\n"), 3u);
  EXPECT_EQ(line_of("{\"text\": \"a\"}\n{\"txt\": \"b\"}\n"), 2u);
  EXPECT_EQ(line_of("{\"text\": \"a\", \"nsp_score\": \"high\"}\n"), 1u);
  EXPECT_EQ(line_of("{\"text\": \"a\", \"nsp_score\": 1.5}\n"), 1u);
  EXPECT_EQ(line_of("{\"text\": \"a\"}\n{\"text\": \"  \"}\n"), 2u);

  std::istringstream ok("{\"text\": \"a\", \"nsp_score\": 0.5}\n\n{\"text\": \"a\"}\n{\"text\": \"b\", \"nsp_score\": 0.1}\n");
  const auto c = ingest(ok);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0].nsp_score, 0.5);
  EXPECT_TRUE(c.all_scored());
}

TEST(NullCorpus, WriteThenIngestRoundTrip) {
  TempDir dir("corpus");
  NullCorpus c;
  c.add("An empty sentence.", NullSource::Generated, 0.75);
  c.add("N/A", NullSource::Generated);
  write_corpus(dir / "c.jsonl", c);
  const auto back = ingest(dir / "c.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].text, "An empty sentence.");
  EXPECT_EQ(back[0].id, c[0].id);
  EXPECT_EQ(back[0].nsp_score, 0.75);
  EXPECT_FALSE(back[1].nsp_score);
  EXPECT_THROW(ingest(dir / "missing.jsonl"), ConfigError);
}

TEST(NullCorpus, ShippedSampleParses) {
  const auto c = ingest(std::filesystem::path(NULLCAL_DATA_DIR) / "null_inputs_sample.jsonl");
  EXPECT_EQ(c.size(), 6u);
  EXPECT_TRUE(c.all_scored());
  EXPECT_EQ(select_top_n(c, 1)[0].text, "This is an example sentence.");
}

TEST(Catalog, HoldsDistinctNonEmptyStrings) {
  const auto& cat = builtin_null_catalog();
  NullCorpus c;
  for (const auto& s : cat) EXPECT_TRUE(c.add(s, NullSource::Generated)) << s;
  EXPECT_GE(cat.size(), 50u);
  EXPECT_NE(std::find(cat.begin(), cat.end(), "An empty sentence."), cat.end());
}

namespace {

class ScriptedClient : public GenerationClient {
 public:
  explicit ScriptedClient(std::vector<std::vector<std::string>> rounds) : rounds_(std::move(rounds)) {}
  std::vector<std::string> generate(const std::string& instruction, std::size_t) override {
    instructions.push_back(instruction);
    return rounds_.at(std::min(calls_++, rounds_.size() - 1));
  }
  std::vector<std::string> instructions;

 private:
  std::vector<std::vector<std::string>> rounds_;
  std::size_t calls_ = 0;
};

}  // namespace

TEST(Acquire, MergesRoundsAndTrimsToTarget) {
  ScriptedClient client({{"a", "b", "a", " "}, {"b", "c", "d", "e"}});
  const auto c = acquire_to_target(client, "make <Number> things", 4, 4, 5);
  EXPECT_EQ(c.size(), 4u);
  EXPECT_EQ(c[3].text, "d");
  EXPECT_EQ(c.meta.iterations, 2u);
  EXPECT_EQ(client.instructions[0], "make 4 things");
}

TEST(Acquire, PartialCorpusReportsCount) {
  ScriptedClient client(std::vector<std::vector<std::string>>{{"a", "b"}});
  try {
    acquire_to_target(client, "x", 2, 5, 3);
    FAIL();
  } catch (const PartialCorpusError& e) {
    EXPECT_EQ(e.count(), 2u);
  }
  EXPECT_THROW(acquire_to_target(client, "x", 0, 5, 3), ConfigError);
}

TEST(Acquire, CatalogClientIsSeededAndCycles) {
  CatalogClient a({"x", "y", "z"}, 4), b({"x", "y", "z"}, 4);
  const auto first = a.generate("", 7);
  EXPECT_EQ(first, b.generate("", 7));
  EXPECT_EQ(first[0], first[3]);
  EXPECT_EQ(first[0], first[6]);
}

TEST(HttpClient, TalksToAnEndpoint) {
  httplib::Server server;
  std::string auth;
  int mode = 0;
  server.Post("/gen", [&](const httplib::Request& req, httplib::Response& res) {
    auth = req.get_header_value("Authorization");
    const auto body = json::parse(req.body);
    if (mode == 1) {
      res.status = 503;
      return;
    }
    if (mode == 2) {
      res.status = 400;
      return;
    }
    if (mode == 3) {
      res.set_content("{\"nope\": 1}", "application/json");
      return;
    }
    json reply{{"texts", json::array()}};
    for (int i = 0; i < body["count"].get<int>(); ++i) reply["texts"].push_back("null " + std::to_string(i));
    res.set_content(reply.dump(), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpGenerationClient client("http://127.0.0.1:" + std::to_string(port) + "/gen", "secret");
  EXPECT_EQ(client.generate("go", 3), (std::vector<std::string>{"null 0", "null 1", "null 2"}));
  EXPECT_EQ(auth, "Bearer secret");

  auto retriable = [&](int m) {
    mode = m;
    try {
      client.generate("go", 1);
    } catch (const GenerationError& e) {
      return e.retriable() ? 1 : 0;
    }
    return -1;
  };
  EXPECT_EQ(retriable(1), 1);
  EXPECT_EQ(retriable(2), 0);
  EXPECT_EQ(retriable(3), 0);
  server.stop();
  thread.join();

  HttpGenerationClient dead("http://127.0.0.1:" + std::to_string(port) + "/gen", "");
  try {
    dead.generate("go", 1);
    FAIL();
  } catch (const GenerationError& e) {
    EXPECT_TRUE(e.retriable());
  }
  EXPECT_THROW(HttpGenerationClient("ftp://x", ""), ConfigError);
}

namespace {

NullCorpus scored_corpus(std::size_t n, std::uint64_t seed, bool ties = false) {
  Rng rng(seed);
  NullCorpus c;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = ties ? static_cast<double>(rng.below(5)) / 4.0 : rng.uniform();
    c.add("null input " + std::to_string(i), NullSource::Generated, s);
  }
  return c;
}

}  // namespace

TEST(Filter, RetainsTopFractionInCorpusOrder) {
  for (bool ties : {false, true}) {
    const auto c = scored_corpus(1000, 5, ties);
    const auto kept = filter_top_fraction(c, 0.8);
    ASSERT_EQ(kept.size(), 800u);
    // Oracle: stable sort by descending score, take 800, restore corpus order.
    std::vector<std::size_t> idx(c.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return *c[a].nsp_score > *c[b].nsp_score; });
    idx.resize(800);
    std::sort(idx.begin(), idx.end());
    for (std::size_t i = 0; i < 800; ++i) EXPECT_EQ(kept[i].id, c[idx[i]].id);
  }
  const auto c = scored_corpus(10, 6);
  EXPECT_EQ(filter_top_fraction(c, 1.0).size(), 10u);
  EXPECT_EQ(filter_top_fraction(c, 0.05).size(), 1u);
  EXPECT_THROW(filter_top_fraction(c, 0.0), ContractError);
  EXPECT_THROW(filter_top_fraction(c, 1.5), ContractError);
  NullCorpus unscored;
  unscored.add("x", NullSource::File);
  EXPECT_THROW(filter_top_fraction(unscored, 0.5), ContractError);
}

TEST(Filter, TopNIsDescendingWithStableTies) {
  NullCorpus c;
  c.add("a", NullSource::File, 0.5);
  c.add("b", NullSource::File, 0.9);
  c.add("c", NullSource::File, 0.5);
  c.add("d", NullSource::File, 0.1);
  const auto top = select_top_n(c, 3);
  EXPECT_EQ(top[0].text, "b");
  EXPECT_EQ(top[1].text, "a");
  EXPECT_EQ(top[2].text, "c");
  EXPECT_THROW(select_top_n(c, 5), ContractError);
}

TEST(Scoring, FileScorerLooksUpById) {
  TempDir dir("scores");
  NullCorpus c;
  c.add("a", NullSource::File);
  c.add("b", NullSource::File);
  {
    std::ofstream out(dir / "s.jsonl");
    out << json{{"id", c[1].id}, {"score", 0.25}}.dump() << "\n" << json{{"id", c[0].id}, {"score", 0.75}}.dump() << "\n";
  }
  const FileScorer scorer(dir / "s.jsonl");
  const auto scored = score_nsp(c, scorer, "It is about <mask>.");
  EXPECT_EQ(scored[0].nsp_score, 0.75);
  EXPECT_EQ(scored[1].nsp_score, 0.25);
  c.add("c", NullSource::File);
  EXPECT_THROW(score_nsp(c, scorer, ""), ContractError);
  EXPECT_THROW(score_nsp(c, [](const NullInput&, std::string_view) { return 1.2; }, ""), ContractError);
}

TEST(Scoring, ToyScorerIsAProbabilityAndDeterministic) {
  const Tokenizer tok = tiny_tokenizer();
  const MaskedLM m = MaskedLM::random(tiny_config(tiny_vocab().size()), 3, 0.5);
  const ToyNspScorer a(m, tok, 9), b(m, tok, 9);
  NullCorpus c;
  c.add("this words", NullSource::File);
  c.add(std::string(200, 'a') + " long", NullSource::File);
  for (const auto& e : c.entries()) {
    const double s = a(e, "It is about <mask>.");
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
    EXPECT_EQ(s, b(e, "It is about <mask>."));
  }
}

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "nullcal/null_corpus.hpp"
#include "nullcal/rng.hpp"
#include "test_support.hpp"

using namespace nullcal;
using namespace nullcal::testing;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string err;
};

Run run_cli(const fs::path& cwd, const std::string& args, const std::string& env = "") {
  const fs::path err = cwd / "stderr.txt";
  const std::string cmd = "cd '" + cwd.string() + "' && " + env + " '" + NULLCAL_CLI_PATH + "' " + args + " >/dev/null 2>'" +
                          err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(err);
  std::stringstream ss;
  ss << in.rdbuf();
  r.err = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

void write_scored_corpus(const fs::path& p, std::size_t n) {
  Rng rng(12);
  NullCorpus c;
  for (std::size_t i = 0; i < n; ++i) c.add("null input " + std::to_string(i), NullSource::Generated, rng.uniform());
  write_corpus(p, c);
}

}  // namespace

TEST(Cli, ExitCodes) {
  TempDir dir("cli-codes");
  EXPECT_EQ(run_cli(dir.path(), "--help").code, 0);
  EXPECT_EQ(run_cli(dir.path(), "").code, 2);
  EXPECT_EQ(run_cli(dir.path(), "filter-null --bogus").code, 2);
  const auto missing = run_cli(dir.path(), "filter-null --corpus no_such_corpus.jsonl");
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("no_such_corpus.jsonl"), std::string::npos) << missing.err;
}

TEST(Cli, FilterKeepsEightyPercentAndIsDeterministic) {
  TempDir dir("cli-filter");
  write_scored_corpus(dir / "c.jsonl", 1000);
  ASSERT_EQ(run_cli(dir.path(), "--output-dir a filter-null --corpus c.jsonl --top-n 5").code, 0);
  ASSERT_EQ(run_cli(dir.path(), "--output-dir b filter-null --corpus c.jsonl --top-n 5").code, 0);
  EXPECT_EQ(line_count(dir / "a" / "filtered.jsonl"), 800u);
  EXPECT_EQ(line_count(dir / "a" / "top_n.jsonl"), 5u);
  EXPECT_EQ(slurp(dir / "a" / "filtered.jsonl"), slurp(dir / "b" / "filtered.jsonl"));

  NullCorpus unscored;
  unscored.add("x", NullSource::File);
  write_corpus(dir / "u.jsonl", unscored);
  EXPECT_EQ(run_cli(dir.path(), "--output-dir u filter-null --corpus u.jsonl").code, 2);
}

TEST(Cli, OfflineGenerationIsSeeded) {
  TempDir dir("cli-gen");
  ASSERT_EQ(run_cli(dir.path(), "--seed 4 --output-dir a gen-null --offline --target 20 --per-round 10").code, 0);
  ASSERT_EQ(run_cli(dir.path(), "--seed 4 --output-dir b gen-null --offline --target 20 --per-round 10").code, 0);
  EXPECT_EQ(line_count(dir / "a" / "nulls.jsonl"), 20u);
  EXPECT_EQ(slurp(dir / "a" / "nulls.jsonl"), slurp(dir / "b" / "nulls.jsonl"));
}

TEST(Cli, UnreachableEndpointIsARuntimeFailure) {
  TempDir dir("cli-dead");
  const auto r = run_cli(dir.path(), "gen-null --target 5 --per-round 5 --max-rounds 1",
                         "NULLCAL_GEN_ENDPOINT=http://127.0.0.1:9/gen");
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST(Cli, FlagsOverrideConfigFile) {
  TempDir dir("cli-config");
  std::ofstream(dir / "v.txt") << "<mask>\n<s>\n</s>\n<pad>\n<unk>\nthe\ngood\n";
  std::ofstream(dir / "c.json") << R"({"seed": 7, "init-model": {"layers": 2, "d-model": 16}})";
  ASSERT_EQ(run_cli(dir.path(), "--config c.json --seed 9 --output-dir out init-model --vocab v.txt --d-model 8").code, 0);
  const auto index = nlohmann::json::parse(slurp(dir / "out" / "index.json"));
  EXPECT_EQ(index["seed"], 9);
  EXPECT_EQ(index["options"]["layers"], "2");
  EXPECT_EQ(index["options"]["d-model"], "8");
  EXPECT_EQ(index["command"], "init-model");
}

TEST(Cli, PerplexityInputsAndSampling) {
  TempDir dir("cli-ppl");
  std::ofstream(dir / "v.txt") << "<mask>\n<s>\n</s>\n<pad>\n<unk>\nthe\ngood\n";
  ASSERT_EQ(run_cli(dir.path(), "--output-dir m init-model --vocab v.txt --d-model 8 --d-ff 16").code, 0);
  std::ofstream(dir / "empty.txt") << "";
  std::ofstream(dir / "texts.txt") << "the good\ngood\n";
  EXPECT_EQ(run_cli(dir.path(), "--output-dir p ppl --model m/model --input empty.txt").code, 2);
  ASSERT_EQ(run_cli(dir.path(), "--output-dir p ppl --model m/model --input texts.txt").code, 0);
  EXPECT_EQ(line_count(dir / "p" / "ppl.csv"), 3u);

  std::ofstream many(dir / "many.txt");
  for (int i = 0; i < 30; ++i) many << (i % 2 ? "the good\n" : "good\n");
  many.close();
  ASSERT_EQ(run_cli(dir.path(), "--output-dir f ppl --model m/model --input many.txt --max-texts 5").code, 0);
  EXPECT_EQ(slurp(dir / "f" / "ppl.csv").substr(0, 35), "line,num_tokens,pseudo_perplexity\n1");
  ASSERT_EQ(run_cli(dir.path(), "--seed 3 --output-dir r1 ppl --model m/model --input many.txt --max-texts 5 --sample random").code, 0);
  ASSERT_EQ(run_cli(dir.path(), "--seed 3 --output-dir r2 ppl --model m/model --input many.txt --max-texts 5 --sample random").code, 0);
  EXPECT_EQ(line_count(dir / "r1" / "ppl.csv"), 6u);
  EXPECT_EQ(slurp(dir / "r1" / "ppl.csv"), slurp(dir / "r2" / "ppl.csv"));
}

TEST(Cli, CalibrationRunsAreByteIdenticalForTheSameSeed) {
  TempDir dir("cli-cal");
  ASSERT_EQ(run_cli(dir.path(), "--output-dir fx synth-fixture").code, 0);
  const std::string cal =
      "calibrate --model fx/model_biased --template fx/template.json --corpus fx/nulls.jsonl --lr 0.2";
  ASSERT_EQ(run_cli(dir.path(), "--seed 5 --output-dir a " + cal).code, 0);
  ASSERT_EQ(run_cli(dir.path(), "--seed 5 --output-dir b " + cal).code, 0);
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dir / "a" / "calibration")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), dir / "a");
    EXPECT_EQ(slurp(entry.path()), slurp(dir / "b" / rel)) << rel;
    ++compared;
  }
  EXPECT_GE(compared, 2u);
  ASSERT_EQ(run_cli(dir.path(), "--output-dir e eval --model fx/model_biased --template fx/template.json "
                                "--test fx/test.jsonl --snapshot a/calibration/one_batch")
                .code,
            0);
  const auto report = nlohmann::json::parse(slurp(dir / "e" / "report.json"));
  EXPECT_GT(report["mean_accuracy"].get<double>(), 0.5);
}

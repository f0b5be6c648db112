#include "nullcal/null_corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>

#include "httplib.h"
#include "json.hpp"
#include "nullcal/rng.hpp"

namespace nullcal {
using nlohmann::json;

std::string normalize_null_text(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

std::string null_input_id(std::string_view normalized_text) {
  std::uint64_t h = 14695981039346656037ull;
  for (char c : normalized_text) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string id(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) id[static_cast<std::size_t>(i)] = kHex[h & 0xF];
  return id;
}

bool NullCorpus::add(std::string_view text, NullSource source, std::optional<double> nsp_score) {
  std::string normalized = normalize_null_text(text);
  if (normalized.empty()) throw ConfigError("null input is empty after whitespace normalization");
  std::string id = null_input_id(normalized);
  if (!ids_.insert(id).second) return false;
  entries_.push_back(NullInput{std::move(normalized), nsp_score, source, std::move(id)});
  return true;
}

bool NullCorpus::all_scored() const {
  return std::all_of(entries_.begin(), entries_.end(), [](const NullInput& e) { return e.nsp_score.has_value(); });
}

void NullCorpus::truncate(std::size_t n) {
  if (n >= entries_.size()) return;
  for (std::size_t i = n; i < entries_.size(); ++i) ids_.erase(entries_[i].id);
  entries_.resize(n);
}

NullCorpus ingest(std::istream& in, NullSource source) {
  NullCorpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (normalize_null_text(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what(), line_no);
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
      throw ParseError("line " + std::to_string(line_no) + ": expected an object with a string \"text\"", line_no);
    }
    std::optional<double> score;
    if (j.contains("nsp_score") && !j["nsp_score"].is_null()) {
      if (!j["nsp_score"].is_number()) {
        throw ParseError("line " + std::to_string(line_no) + ": nsp_score must be a number", line_no);
      }
      score = j["nsp_score"].get<double>();
      if (!(*score >= 0.0 && *score <= 1.0)) {
        throw ParseError("line " + std::to_string(line_no) + ": nsp_score outside [0, 1]", line_no);
      }
    }
    try {
      corpus.add(j["text"].get<std::string>(), source, score);
    } catch (const ConfigError&) {
      throw ParseError("line " + std::to_string(line_no) + ": empty text", line_no);
    }
  }
  return corpus;
}

NullCorpus ingest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open null corpus " + path.string());
  try {
    return ingest(in, NullSource::File);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.line());
  }
}

void write_corpus(const std::filesystem::path& path, const NullCorpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& e : corpus.entries()) {
    json j{{"id", e.id}, {"text", e.text}};
    if (e.nsp_score) j["nsp_score"] = *e.nsp_score;
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------

CatalogClient::CatalogClient(std::vector<std::string> catalog, std::uint64_t seed) : order_(std::move(catalog)) {
  if (order_.empty()) throw ConfigError("catalog client needs at least one string");
  Rng rng(derive_seed(seed, "catalog"));
  rng.shuffle(std::span<std::string>(order_));
}

std::vector<std::string> CatalogClient::generate(const std::string&, std::size_t count) {
  std::vector<std::string> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(order_[cursor_]);
    cursor_ = (cursor_ + 1) % order_.size();
  }
  return out;
}

HttpGenerationClient::HttpGenerationClient(std::string endpoint, std::string api_key)
    : endpoint_(std::move(endpoint)), api_key_(std::move(api_key)) {
  if (endpoint_.rfind("http://", 0) != 0 && endpoint_.rfind("https://", 0) != 0) {
    throw ConfigError("generation endpoint must start with http:// or https://");
  }
}

std::optional<HttpGenerationClient> HttpGenerationClient::from_environment() {
  const char* endpoint = std::getenv("NULLCAL_GEN_ENDPOINT");
  if (!endpoint || !*endpoint) return std::nullopt;
  const char* key = std::getenv("NULLCAL_GEN_API_KEY");
  return HttpGenerationClient(endpoint, key ? key : "");
}

std::vector<std::string> HttpGenerationClient::generate(const std::string& instruction, std::size_t count) {
  const auto scheme_end = endpoint_.find("://") + 3;
  const auto path_start = endpoint_.find('/', scheme_end);
  const std::string base = endpoint_.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : endpoint_.substr(path_start);

  httplib::Client client(base);
  client.set_connection_timeout(10);
  client.set_read_timeout(120);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  const json body{{"instruction", instruction}, {"count", count}};
  auto res = client.Post(path, headers, body.dump(), "application/json");
  if (!res) throw GenerationError("generation request failed: " + httplib::to_string(res.error()), true);
  if (res->status >= 500 || res->status == 429) {
    throw GenerationError("generation endpoint returned HTTP " + std::to_string(res->status), true);
  }
  if (res->status != 200) {
    throw GenerationError("generation endpoint returned HTTP " + std::to_string(res->status), false);
  }
  try {
    const json reply = json::parse(res->body);
    return reply.at("texts").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw GenerationError(std::string("malformed generation response: ") + e.what(), false);
  }
}

NullCorpus acquire_to_target(GenerationClient& client, std::string_view instruction, std::size_t per_round,
                             std::size_t target, std::size_t max_rounds) {
  if (target == 0) throw ConfigError("target count must be positive");
  if (per_round == 0) throw ConfigError("per-round count must be positive");
  std::string request(instruction);
  if (auto pos = request.find("<Number>"); pos != std::string::npos) {
    request.replace(pos, 8, std::to_string(per_round));
  }
  NullCorpus corpus;
  corpus.target_count = target;
  corpus.meta.instruction = request;
  while (corpus.size() < target && corpus.meta.iterations < max_rounds) {
    const auto batch = client.generate(request, per_round);
    ++corpus.meta.iterations;
    for (const auto& text : batch) {
      if (normalize_null_text(text).empty()) continue;
      corpus.add(text, NullSource::Generated);
    }
  }
  if (corpus.size() < target) {
    const auto count = corpus.size();
    throw PartialCorpusError("collected " + std::to_string(count) + " distinct null inputs of " +
                                 std::to_string(target) + " after " + std::to_string(corpus.meta.iterations) +
                                 " rounds",
                             std::move(corpus));
  }
  corpus.truncate(target);
  return corpus;
}

// ---------------------------------------------------------------------------

NullCorpus score_nsp(const NullCorpus& corpus, const NspScorer& scorer, std::string_view answer_format) {
  NullCorpus out = corpus;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = scorer(out[i], answer_format);
    if (!(s >= 0.0 && s <= 1.0)) {
      throw ContractError("NSP scorer returned " + std::to_string(s) + " for '" + out[i].text + "', outside [0, 1]");
    }
    out.set_score(i, s);
  }
  return out;
}

FileScorer::FileScorer(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open score file " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (normalize_null_text(line).empty()) continue;
    try {
      const json j = json::parse(line);
      scores_.emplace_back(j.at("id").get<std::string>(), j.at("score").get<double>());
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
  std::stable_sort(scores_.begin(), scores_.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
}

double FileScorer::operator()(const NullInput& input, std::string_view) const {
  auto it = std::lower_bound(scores_.begin(), scores_.end(), input.id,
                             [](const auto& entry, const std::string& id) { return entry.first < id; });
  if (it == scores_.end() || it->first != input.id) {
    throw ContractError("score file has no entry for id " + input.id + " ('" + input.text + "')");
  }
  return it->second;
}

ToyNspScorer::ToyNspScorer(const MaskedLM& model, const Tokenizer& tokenizer, std::uint64_t seed)
    : model_(&model), tokenizer_(&tokenizer) {
  const auto d = static_cast<std::size_t>(model.config().d_model);
  weight_ = Tensor({2, d});
  bias_ = Tensor({2});
  Rng rng(derive_seed(seed, "nsp-head"));
  for (auto& v : weight_.data()) v = static_cast<float>(rng.normal() / std::sqrt(static_cast<double>(d)));
}

double ToyNspScorer::operator()(const NullInput& input, std::string_view answer_format) const {
  const auto& sp = tokenizer_->specials();
  std::vector<TokenId> ids{sp.cls};
  for (TokenId id : tokenizer_->encode(input.text)) ids.push_back(id);
  ids.push_back(sp.sep);
  for (TokenId id : tokenizer_->encode(answer_format)) ids.push_back(id);
  ids.push_back(sp.sep);
  if (ids.size() > static_cast<std::size_t>(model_->config().max_seq_len)) {
    ids.resize(static_cast<std::size_t>(model_->config().max_seq_len));
    ids.back() = sp.sep;
  }
  Tape tape(RoleSet::none());
  Var hidden = model_->encode(tape, ids);
  Var cls = ops::slice_rows(tape, hidden, 0, 1);
  Var w = tape.constant_ref(weight_);
  Var b = tape.constant_ref(bias_);
  Var probs = ops::softmax(tape, ops::add_row(tape, ops::matmul_nt(tape, cls, w), b));
  return static_cast<double>(tape.value(probs)[0]);
}

namespace {

std::vector<std::size_t> ranked_indices(const NullCorpus& corpus) {
  if (!corpus.all_scored()) throw ContractError("every null input must carry an NSP score before selection");
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return *corpus[a].nsp_score > *corpus[b].nsp_score; });
  return order;
}

}  // namespace

NullCorpus filter_top_fraction(const NullCorpus& corpus, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractError("retain fraction must be in (0, 1]");
  const auto order = ranked_indices(corpus);
  // Guard against 0.8 * 1000 landing a hair above 800.
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(corpus.size()) - 1e-9));
  std::vector<bool> kept(corpus.size(), false);
  for (std::size_t i = 0; i < keep && i < order.size(); ++i) kept[order[i]] = true;
  NullCorpus out;
  out.target_count = corpus.target_count;
  out.meta = corpus.meta;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (kept[i]) out.add(corpus[i].text, corpus[i].source, corpus[i].nsp_score);
  }
  return out;
}

std::vector<NullInput> select_top_n(const NullCorpus& corpus, std::size_t n) {
  if (n > corpus.size()) {
    throw ContractError("cannot select " + std::to_string(n) + " null inputs from a corpus of " +
                        std::to_string(corpus.size()));
  }
  const auto order = ranked_indices(corpus);
  std::vector<NullInput> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(corpus[order[i]]);
  return out;
}

}  // namespace nullcal

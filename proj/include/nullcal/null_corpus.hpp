#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "nullcal/errors.hpp"
#include "nullcal/masked_lm.hpp"
#include "nullcal/tokenizer.hpp"

namespace nullcal {

enum class NullSource { Generated, File };

struct NullInput {
  std::string text;  // normalized
  std::optional<double> nsp_score;
  NullSource source = NullSource::File;
  std::string id;  // hash of the normalized text
};

// Trims and collapses internal whitespace runs to one space. No case folding.
std::string normalize_null_text(std::string_view text);
// 16 hex digits of FNV-1a 64 over the normalized text.
std::string null_input_id(std::string_view normalized_text);

struct GenerationMeta {
  std::size_t iterations = 0;
  std::string instruction;
};

// Deduplicated, insertion-ordered set of null inputs.
class NullCorpus {
 public:
  // Returns false when an entry with the same normalized text exists.
  // Throws ConfigError when the text is empty after normalization.
  bool add(std::string_view text, NullSource source, std::optional<double> nsp_score = std::nullopt);

  const std::vector<NullInput>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const NullInput& operator[](std::size_t i) const { return entries_[i]; }
  bool all_scored() const;
  void truncate(std::size_t n);
  // Replaces scores in place; texts and ids are untouched.
  void set_score(std::size_t i, double score) { entries_[i].nsp_score = score; }

  std::size_t target_count = 0;
  GenerationMeta meta;

 private:
  std::vector<NullInput> entries_;
  std::unordered_set<std::string> ids_;
};

// JSONL, one {"text": str, "nsp_score": float?} per line; blank lines are
// skipped. Later duplicates are dropped. Errors carry the 1-based line.
NullCorpus ingest(const std::filesystem::path& path);
NullCorpus ingest(std::istream& in, NullSource source = NullSource::File);
// Writes {"id", "text", "nsp_score"?} per line.
void write_corpus(const std::filesystem::path& path, const NullCorpus& corpus);

// ---------------------------------------------------------------------------
// Generation

inline constexpr std::string_view kDefaultNullInstruction =
    "Please generate null meaning symbols, words, phrases, and sentences, in total <Number>.";

class GenerationError : public Error {
 public:
  GenerationError(const std::string& what, bool retriable) : Error(what), retriable_(retriable) {}
  bool retriable() const { return retriable_; }

 private:
  bool retriable_;
};

// Thrown by acquire_to_target when max_rounds ends short of the target.
class PartialCorpusError : public Error {
 public:
  PartialCorpusError(const std::string& what, NullCorpus partial)
      : Error(what), partial_(std::move(partial)) {}
  std::size_t count() const { return partial_.size(); }
  const NullCorpus& partial() const { return partial_; }

 private:
  NullCorpus partial_;
};

class GenerationClient {
 public:
  virtual ~GenerationClient() = default;
  virtual std::vector<std::string> generate(const std::string& instruction, std::size_t count) = 0;
};

// Curated offline null strings.
const std::vector<std::string>& builtin_null_catalog();

// Serves strings from a catalog in a seeded order, cycling when exhausted.
class CatalogClient : public GenerationClient {
 public:
  explicit CatalogClient(std::vector<std::string> catalog = builtin_null_catalog(), std::uint64_t seed = 0);
  std::vector<std::string> generate(const std::string& instruction, std::size_t count) override;

 private:
  std::vector<std::string> order_;
  std::size_t cursor_ = 0;
};

// POSTs {"instruction": str, "count": int} to an HTTP(S) endpoint and
// expects {"texts": [str, ...]} back. The API key, when set, is sent as a
// bearer token.
class HttpGenerationClient : public GenerationClient {
 public:
  HttpGenerationClient(std::string endpoint, std::string api_key);
  // Reads NULLCAL_GEN_ENDPOINT / NULLCAL_GEN_API_KEY; nullopt when no
  // endpoint is configured.
  static std::optional<HttpGenerationClient> from_environment();
  std::vector<std::string> generate(const std::string& instruction, std::size_t count) override;

 private:
  std::string endpoint_;
  std::string api_key_;
};

// Repeats generate(per_round) and dedup-merges until the corpus reaches
// `target`, then trims to exactly `target` keeping the first acquired.
// "<Number>" in the instruction is replaced by per_round.
NullCorpus acquire_to_target(GenerationClient& client, std::string_view instruction, std::size_t per_round,
                             std::size_t target, std::size_t max_rounds);

// ---------------------------------------------------------------------------
// Scoring and selection

// Pure function (null input, answer format) -> probability in [0, 1].
using NspScorer = std::function<double(const NullInput&, std::string_view answer_format)>;

// Populates every score; throws ContractError on a score outside [0, 1].
NullCorpus score_nsp(const NullCorpus& corpus, const NspScorer& scorer, std::string_view answer_format);

// Scores looked up by null-input id from JSONL {"id": str, "score": float}.
class FileScorer {
 public:
  explicit FileScorer(const std::filesystem::path& path);
  double operator()(const NullInput& input, std::string_view answer_format) const;
  std::size_t size() const { return scores_.size(); }

 private:
  std::vector<std::pair<std::string, double>> scores_;  // sorted by id
};

// Next-sentence head over the masked LM's <s> representation of
// "<s> x_null </s> ans </s>": P(is next) = softmax(W h + b)[0].
class ToyNspScorer {
 public:
  ToyNspScorer(const MaskedLM& model, const Tokenizer& tokenizer, std::uint64_t seed);
  double operator()(const NullInput& input, std::string_view answer_format) const;

 private:
  const MaskedLM* model_;
  const Tokenizer* tokenizer_;
  Tensor weight_;  // [2, d_model]
  Tensor bias_;    // [2]
};

// Keeps the ceil(fraction * n) highest-scored entries in corpus order. Ties
// are broken by earlier corpus position. Throws ContractError when an entry
// is unscored or fraction is outside (0, 1].
NullCorpus filter_top_fraction(const NullCorpus& corpus, double fraction);

// The n highest-scored entries, descending, ties by corpus order.
std::vector<NullInput> select_top_n(const NullCorpus& corpus, std::size_t n);

}  // namespace nullcal

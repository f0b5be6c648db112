#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nullcal/calibration.hpp"
#include "nullcal/masked_lm.hpp"
#include "nullcal/model_io.hpp"
#include "nullcal/prompting.hpp"

namespace nullcal {

enum class Split { Train, Val, Test };
std::string_view split_name(Split split);

struct LabeledExample {
  std::string text;
  std::optional<std::string> aspect;
  std::string label;
};

struct LabeledDataset {
  std::vector<LabeledExample> examples;
  Split split = Split::Test;
  std::string task;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
};

// JSONL, one {"text": str, "aspect": str?, "label": str} per line.
LabeledDataset load_dataset(const std::filesystem::path& path, Split split, std::string task);
void write_dataset(const std::filesystem::path& path, const LabeledDataset& data);
// Throws ConfigError naming the first label outside the verbalizer.
void check_labels(const LabeledDataset& data, const Verbalizer& verbalizer);

struct KShotSplit {
  LabeledDataset train;
  LabeledDataset val;
};

// Draws K train and K val examples per class, disjoint, from `pool`.
// Throws ConfigError when a class has fewer than 2K examples.
KShotSplit sample_k_shot(const LabeledDataset& pool, const Verbalizer& verbalizer, std::size_t k, std::uint64_t seed);

// Seeded subsample without replacement, original order kept; identity when
// max_examples is 0 or at least the dataset size.
LabeledDataset subsample(const LabeledDataset& data, std::size_t max_examples, std::uint64_t seed);

// One demonstration per class, drawn from `train` with the seed.
DemonstrationSet sample_demos(const LabeledDataset& train, const Verbalizer& verbalizer, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Metrics

// counts[true * n + predicted]
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t num_classes) : n_(num_classes), counts_(num_classes * num_classes, 0) {}

  std::size_t num_classes() const { return n_; }
  void add(std::size_t truth, std::size_t predicted, std::size_t count = 1);
  std::size_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * n_ + predicted]; }
  std::size_t total() const;
  std::size_t support(std::size_t c) const;
  std::size_t predicted(std::size_t c) const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  nlohmann::json to_json() const;

 private:
  std::size_t n_ = 0;
  std::vector<std::size_t> counts_;
};

// Both throw ContractError on an empty matrix.
double accuracy(const ConfusionMatrix& m);
// sum_c (support_c / total) * F1_c, with F1_c = 0 when precision + recall = 0.
double weighted_f1(const ConfusionMatrix& m);

enum class Metric { Accuracy, WeightedF1 };
double metric_value(Metric metric, const ConfusionMatrix& m);

struct RunMetrics {
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double weighted_f1 = 0.0;
  ConfusionMatrix confusion;
  std::size_t excluded = 0;
  std::vector<std::string> errors;  // one per excluded example
  std::vector<std::size_t> predictions;  // per evaluated example, in order

  nlohmann::json to_json() const;
};

struct MetricsReport {
  std::vector<std::string> labels;
  std::vector<RunMetrics> runs;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  double mean_weighted_f1 = 0.0;
  double std_weighted_f1 = 0.0;
  ConfusionMatrix confusion;  // summed over runs
  std::size_t excluded = 0;

  nlohmann::json to_json() const;
  // Header plus one row per seed and a final "mean"/"std" pair of rows.
  std::string to_csv() const;
};

// Sample standard deviation; 0 for fewer than two values.
double sample_std(std::span<const double> values);
// Throws ContractError on zero runs.
MetricsReport seed_aggregate(std::span<const RunMetrics> runs, std::vector<std::string> labels);

// ---------------------------------------------------------------------------
// Evaluation modes

struct EvalOptions {
  std::size_t threads = 1;
  std::size_t max_len = 0;  // 0 means the model's max_seq_len
  std::uint64_t seed = 0;   // recorded in the RunMetrics
};

// Label distribution per example; nullopt with a message in `errors` when
// the example cannot be rendered.
struct Scored {
  std::vector<std::optional<ClassDistribution>> dists;
  std::vector<std::string> errors;
};

Scored score_examples(const MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                      const LabeledDataset& data, const DemonstrationSet& demos, const EvalOptions& options);

// Argmax of per-class scores (lowest index on ties) tallied against the gold
// labels; excluded examples are counted, not scored.
RunMetrics tally(const LabeledDataset& data, const Verbalizer& verbalizer,
                 std::span<const std::optional<ClassDistribution>> scores, std::vector<std::string> errors,
                 std::uint64_t seed);

RunMetrics zero_shot_eval(const MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                          const LabeledDataset& test, const EvalOptions& options = {});

// Demonstrations are appended after the query; when the prompt overflows,
// trailing demonstrations are dropped for that example.
RunMetrics icl_with_demo_eval(const MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                              const DemonstrationSet& demos, const LabeledDataset& test,
                              const EvalOptions& options = {});

inline constexpr std::string_view kDefaultDomainString = "N/A";

// score(y) = P(y | x) / mean_d P(y | x_domain).
RunMetrics outcal_eval(const MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                       std::span<const std::string> domain_strings, const LabeledDataset& test,
                       const DemonstrationSet& demos = {}, const EvalOptions& options = {});

// Validation metric for calibration: accuracy, or weighted F1 when the
// template is aspect-level.
ValidationMetric make_validation_metric(const Tokenizer& tokenizer, const TaskPrompt& task, LabeledDataset val,
                                        EvalOptions options = {});

// ---------------------------------------------------------------------------
// Prompt-based fine-tuning

struct PromptFTConfig {
  double lr = 1e-5;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  RoleSet roles = RoleSet::all();
  std::uint64_t seed = 0;
  DemonstrationSet demos;  // appended to every training and validation prompt
};

struct PromptFTResult {
  RunMetrics val;                   // of the returned checkpoint
  std::vector<double> loss_trace;   // per optimizer step, pre-step
  std::vector<double> val_trace;    // epoch 0 (before training) then each epoch
  std::size_t best_epoch = 0;
};

// Mean -log P(y | x) over the prompts, with P restricted to the label words.
template <typename T>
Var prompt_ft_loss(BasicMaskedLM<T>& model, BasicTape<T>& tape, std::span<const std::vector<TokenId>> prompts,
                   std::span<const TokenId> label_tokens, std::span<const std::int32_t> targets);

// SGD over shuffled mini-batches of `train`; after every epoch the validation
// metric is computed and the best checkpoint (earliest on ties, epoch 0
// included) is restored into `model` before returning.
PromptFTResult prompt_ft(MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                         const LabeledDataset& train, const LabeledDataset& val, const PromptFTConfig& config,
                         const EvalOptions& options = {});

// ---------------------------------------------------------------------------
// Cross-task impact

struct TaskEval {
  std::string name;
  TaskPrompt task;
  LabeledDataset test;
};

struct CrossTaskMatrix {
  std::vector<std::string> row_tasks;
  std::vector<std::string> columns;  // "original" then one per snapshot
  std::vector<std::vector<double>> delta;

  std::string to_csv() const;
};

// Cell (r, c) = zero-shot accuracy of task r under snapshot c minus its
// accuracy under the original model. Column 0 is the original model.
CrossTaskMatrix cross_task_matrix(const MaskedLM& base, const Tokenizer& tokenizer, std::span<const TaskEval> tasks,
                                  std::span<const std::string> snapshot_names,
                                  std::span<const ParameterSnapshot> snapshots, const EvalOptions& options = {});

}  // namespace nullcal

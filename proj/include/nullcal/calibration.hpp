#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nullcal/distribution.hpp"
#include "nullcal/masked_lm.hpp"
#include "nullcal/model_io.hpp"
#include "nullcal/null_corpus.hpp"
#include "nullcal/prompting.hpp"

namespace nullcal {

// Probabilities below this are raised to it before taking logs.
inline constexpr double kProbClamp = 1e-12;

// KL(U || p) = log(1/|Y|) - (1/|Y|) sum_y log p(y).
double kl_uniform(std::span<const double> p);
inline double kl_uniform(const ClassDistribution& p) { return kl_uniform(std::span<const double>(p.probs)); }

// (1/N) sum_i KL(U || P_i) + KL(U || mean_i P_i). Throws ContractError on an
// empty batch or mixed label counts.
double batch_loss(std::span<const ClassDistribution> dists);

// Element-wise mean of the distributions.
ClassDistribution mean_distribution(std::span<const ClassDistribution> dists);
// Population variance of the entries.
double distribution_variance(const ClassDistribution& p);

// The batch loss as a tape node over probs[N, |Y|]. Evaluated and
// differentiated in double regardless of T.
template <typename T>
Var batch_kl_loss(BasicTape<T>& tape, Var probs);

enum class UpdateMode { BiasOnly, Full };
enum class StoppingMode { OneBatch, ValidationBased };
enum class DemoMode { NoDemo, WithDemo };

RoleSet update_roles(UpdateMode mode);
// Learning rates that worked best per update/demo mode.
double default_calibration_lr(UpdateMode mode, DemoMode demo);

struct CalibrationConfig {
  double lr = 1e-3;
  std::size_t batch_size = 32;
  UpdateMode update_mode = UpdateMode::BiasOnly;
  StoppingMode stopping = StoppingMode::OneBatch;
  std::size_t patience = 5;
  std::size_t max_batches = 50;
  std::uint64_t seed = 0;
  DemoMode demo_mode = DemoMode::NoDemo;
  // Appended to every null prompt under WithDemo; fixed for the whole run.
  DemonstrationSet demos;
  // For templates with an {aspect} slot; assigned to null inputs cyclically.
  std::vector<std::string> aspects;
  // 0 means the model's max_seq_len.
  std::size_t max_len = 0;
};

// Higher is better. Called on the current model after every batch.
using ValidationMetric = std::function<double(const MaskedLM&)>;

enum class StopReason { OneBatch, Patience, MaxBatches, CorpusExhausted };
std::string_view stop_reason_name(StopReason reason);

struct CalibrationResult {
  ParameterSnapshot snapshot_one_batch;
  std::optional<ParameterSnapshot> snapshot_val;
  std::vector<double> loss_trace;        // pre-step loss per batch
  std::vector<double> validation_trace;  // metric after each batch
  std::size_t best_batch = 0;            // 1-based; 0 without validation
  std::size_t steps = 0;
  StopReason stop_reason = StopReason::OneBatch;
  std::vector<std::string> warnings;
};

// Renders the null prompts for a list of null inputs. Aspect i comes from
// aspects[i % size]. With demonstrations, overflow drops trailing demos.
std::vector<std::vector<TokenId>> render_null_batch(const TaskPrompt& task, const Tokenizer& tokenizer,
                                                    std::span<const NullInput> inputs,
                                                    std::span<const std::string> aspects,
                                                    std::size_t aspect_offset, const DemonstrationSet* demos,
                                                    std::size_t max_len);

// Batch loss of the model's label distributions over `prompts`, on the tape.
template <typename T>
Var null_batch_loss(BasicMaskedLM<T>& model, BasicTape<T>& tape, std::span<const std::vector<TokenId>> prompts,
                    std::span<const TokenId> label_tokens);

// One forward/backward/update on a fixed batch. Returns the pre-step loss.
double calibration_step(MaskedLM& model, std::span<const std::vector<TokenId>> prompts,
                        std::span<const TokenId> label_tokens, double lr, RoleSet roles);

// Warnings for settings that are legal but unusual; throws ConfigError for
// illegal ones.
std::vector<std::string> check_calibration_config(const CalibrationConfig& config, bool has_validation);

// Shuffles the corpus once with the config seed, then updates the model batch
// by batch. The model is left at its final state; the snapshots hold the
// stopping points.
CalibrationResult calibrate(MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                            std::span<const NullInput> corpus, const CalibrationConfig& config,
                            const ValidationMetric& validation = {});

// Average label distribution of the model over every null input.
ClassDistribution null_mean_distribution(const MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                                         std::span<const NullInput> corpus, std::span<const std::string> aspects = {},
                                         std::size_t threads = 1);
double distribution_variance(const MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                             std::span<const NullInput> corpus, std::span<const std::string> aspects = {},
                             std::size_t threads = 1);

// FNV-1a over the entry ids in order.
std::string corpus_hash(std::span<const NullInput> corpus);

nlohmann::json calibration_config_json(const CalibrationConfig& config);

// Writes one_batch/ (and val/ when present) snapshots plus manifest.json
// into `dir`. Returns the manifest.
nlohmann::json write_calibration_run(const std::filesystem::path& dir, const CalibrationConfig& config,
                                     const CalibrationResult& result, std::span<const NullInput> corpus);

}  // namespace nullcal

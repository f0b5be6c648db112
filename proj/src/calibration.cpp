#include "nullcal/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "nullcal/parallel.hpp"
#include "nullcal/rng.hpp"

namespace nullcal {
using nlohmann::json;

double kl_uniform(std::span<const double> p) {
  if (p.empty()) throw ContractError("kl_uniform of an empty distribution");
  const double n = static_cast<double>(p.size());
  double sum_log = 0.0;
  for (double v : p) sum_log += std::log(std::max(v, kProbClamp));
  return std::log(1.0 / n) - sum_log / n;
}

ClassDistribution mean_distribution(std::span<const ClassDistribution> dists) {
  if (dists.empty()) throw ContractError("mean of zero distributions");
  const std::size_t y = dists[0].size();
  ClassDistribution mean{std::vector<double>(y, 0.0)};
  for (const auto& d : dists) {
    if (d.size() != y) {
      throw ContractError("distributions over " + std::to_string(y) + " and " + std::to_string(d.size()) +
                          " labels in one batch");
    }
    for (std::size_t k = 0; k < y; ++k) mean.probs[k] += d[k];
  }
  for (double& v : mean.probs) v /= static_cast<double>(dists.size());
  return mean;
}

double batch_loss(std::span<const ClassDistribution> dists) {
  const ClassDistribution mean = mean_distribution(dists);
  double per_example = 0.0;
  for (const auto& d : dists) per_example += kl_uniform(d);
  return per_example / static_cast<double>(dists.size()) + kl_uniform(mean);
}

double distribution_variance(const ClassDistribution& p) {
  if (p.size() == 0) throw ContractError("variance of an empty distribution");
  const double n = static_cast<double>(p.size());
  const double mu = std::accumulate(p.probs.begin(), p.probs.end(), 0.0) / n;
  double acc = 0.0;
  for (double v : p.probs) acc += (v - mu) * (v - mu);
  return acc / n;
}

template <typename T>
Var batch_kl_loss(BasicTape<T>& tape, Var probs) {
  const auto& p = tape.value(probs);
  if (p.rank() != 2 || p.rows() == 0 || p.cols() == 0) {
    throw DimensionError("batch_kl_loss expects probs[N, |Y|], got " + shape_string(p.shape()));
  }
  const std::size_t n = p.rows(), y = p.cols();
  std::vector<ClassDistribution> dists(n, ClassDistribution{std::vector<double>(y)});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < y; ++k) dists[i].probs[k] = static_cast<double>(p.at(i, k));
  const double loss = batch_loss(dists);

  return tape.record(BasicTensor<T>::scalar(static_cast<T>(loss)), {probs}, [n, y](auto& ctx) {
    if (!ctx.input_grads[0]) return;
    const auto& pv = *ctx.inputs[0];
    auto& g = *ctx.input_grads[0];
    const double upstream = static_cast<double>(ctx.output_grad.item());
    const double dn = static_cast<double>(n), dy = static_cast<double>(y);
    std::vector<double> mean(y, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < y; ++k) mean[k] += static_cast<double>(pv.at(i, k)) / dn;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < y; ++k) {
        const double pik = std::max(static_cast<double>(pv.at(i, k)), kProbClamp);
        const double d = -1.0 / (dn * dy * pik) - 1.0 / (dy * dn * std::max(mean[k], kProbClamp));
        g.at(i, k) += static_cast<T>(upstream * d);
      }
    }
  });
}

template Var batch_kl_loss<float>(BasicTape<float>&, Var);
template Var batch_kl_loss<double>(BasicTape<double>&, Var);

RoleSet update_roles(UpdateMode mode) { return mode == UpdateMode::BiasOnly ? RoleSet{Role::Bias} : RoleSet::all(); }

double default_calibration_lr(UpdateMode mode, DemoMode demo) {
  if (mode == UpdateMode::BiasOnly) return demo == DemoMode::NoDemo ? 1e-3 : 1e-4;
  return demo == DemoMode::NoDemo ? 1e-5 : 1e-6;
}

std::string_view stop_reason_name(StopReason reason) {
  switch (reason) {
    case StopReason::OneBatch: return "one_batch";
    case StopReason::Patience: return "patience";
    case StopReason::MaxBatches: return "max_batches";
    case StopReason::CorpusExhausted: return "corpus_exhausted";
  }
  return "unknown";
}

std::vector<std::vector<TokenId>> render_null_batch(const TaskPrompt& task, const Tokenizer& tokenizer,
                                                    std::span<const NullInput> inputs,
                                                    std::span<const std::string> aspects,
                                                    std::size_t aspect_offset, const DemonstrationSet* demos,
                                                    std::size_t max_len) {
  if (task.prompt.uses_aspect() && aspects.empty()) {
    throw ConfigError("template has an {aspect} slot but no aspect words were given");
  }
  std::vector<std::vector<TokenId>> out;
  out.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::optional<std::string_view> aspect;
    if (task.prompt.uses_aspect()) aspect = aspects[(aspect_offset + i) % aspects.size()];
    if (!demos || demos->empty()) {
      out.push_back(render_null_prompt(task.prompt, tokenizer, inputs[i].text, aspect, max_len));
      continue;
    }
    try {
      out.push_back(render_with_demos(task.prompt, tokenizer, inputs[i].text, aspect, *demos, task.verbalizer, max_len));
    } catch (const DemoOverflowError& e) {
      const DemonstrationSet fitting(demos->begin(), demos->begin() + static_cast<std::ptrdiff_t>(e.demos_that_fit()));
      out.push_back(render_with_demos(task.prompt, tokenizer, inputs[i].text, aspect, fitting, task.verbalizer, max_len));
    }
  }
  return out;
}

template <typename T>
Var null_batch_loss(BasicMaskedLM<T>& model, BasicTape<T>& tape, std::span<const std::vector<TokenId>> prompts,
                    std::span<const TokenId> label_tokens) {
  if (prompts.empty()) throw ContractError("null batch is empty");
  std::vector<Var> rows;
  rows.reserve(prompts.size());
  for (const auto& ids : prompts) rows.push_back(model.label_probs(tape, ids, label_tokens));
  Var probs = ops::concat_rows(tape, std::span<const Var>(rows));
  return batch_kl_loss(tape, probs);
}

template Var null_batch_loss<float>(BasicMaskedLM<float>&, BasicTape<float>&, std::span<const std::vector<TokenId>>,
                                    std::span<const TokenId>);
template Var null_batch_loss<double>(BasicMaskedLM<double>&, BasicTape<double>&,
                                     std::span<const std::vector<TokenId>>, std::span<const TokenId>);

double calibration_step(MaskedLM& model, std::span<const std::vector<TokenId>> prompts,
                        std::span<const TokenId> label_tokens, double lr, RoleSet roles) {
  Tape tape(roles);
  Var loss = null_batch_loss(model, tape, prompts, label_tokens);
  const double value = static_cast<double>(tape.value(loss).item());
  tape.backward(loss);
  sgd_step(model.parameters(), lr, roles);
  return value;
}

std::vector<std::string> check_calibration_config(const CalibrationConfig& config, bool has_validation) {
  if (!(config.lr > 0.0) || !std::isfinite(config.lr)) throw ConfigError("calibration lr must be positive and finite");
  if (config.batch_size == 0) throw ConfigError("batch size must be positive");
  if (config.stopping == StoppingMode::ValidationBased) {
    if (!has_validation) throw ConfigError("validation-based stopping needs a validation set");
    if (config.patience == 0) throw ConfigError("patience must be positive");
    if (config.max_batches == 0) throw ConfigError("max_batches must be positive");
  }
  if (config.demo_mode == DemoMode::WithDemo && config.demos.empty()) {
    throw ConfigError("with-demo calibration needs at least one demonstration");
  }
  std::vector<std::string> warnings;
  if (config.update_mode == UpdateMode::Full && config.lr >= 1e-4) {
    warnings.push_back("full-parameter calibration with lr " + std::to_string(config.lr) +
                       ", a bias-only setting; full updates usually need 1e-5 (no demos) or 1e-6 (with demos)");
  }
  return warnings;
}

CalibrationResult calibrate(MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                            std::span<const NullInput> corpus, const CalibrationConfig& config,
                            const ValidationMetric& validation) {
  CalibrationResult result;
  result.warnings = check_calibration_config(config, static_cast<bool>(validation));
  if (corpus.empty()) throw ConfigError("null corpus is empty");
  if (corpus.size() < config.batch_size) {
    throw ConfigError("null corpus of " + std::to_string(corpus.size()) + " inputs is smaller than one batch of " +
                      std::to_string(config.batch_size));
  }
  const auto labels = resolve_label_tokens(task.prompt, task.verbalizer, tokenizer);
  check_label_tokens(labels, model.config().vocab_size);
  const std::size_t max_len = config.max_len ? config.max_len : static_cast<std::size_t>(model.config().max_seq_len);
  const RoleSet roles = update_roles(config.update_mode);
  const DemonstrationSet* demos = config.demo_mode == DemoMode::WithDemo ? &config.demos : nullptr;

  std::vector<NullInput> order(corpus.begin(), corpus.end());
  Rng rng(derive_seed(config.seed, "calibration-shuffle"));
  rng.shuffle(std::span<NullInput>(order));

  const std::size_t available = order.size() / config.batch_size;
  const std::size_t limit =
      config.stopping == StoppingMode::OneBatch ? 1 : std::min(available, config.max_batches);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  result.stop_reason = config.stopping == StoppingMode::OneBatch
                           ? StopReason::OneBatch
                           : (limit < config.max_batches ? StopReason::CorpusExhausted : StopReason::MaxBatches);

  for (std::size_t b = 0; b < limit; ++b) {
    const std::size_t begin = b * config.batch_size;
    const auto batch = std::span<const NullInput>(order).subspan(begin, config.batch_size);
    const auto prompts = render_null_batch(task, tokenizer, batch, config.aspects, begin, demos, max_len);
    const double loss = calibration_step(model, prompts, labels, config.lr, roles);
    result.loss_trace.push_back(loss);
    ++result.steps;
    const auto step = static_cast<std::int64_t>(b + 1);
    if (b == 0) result.snapshot_one_batch = take_snapshot(model, roles, {step, loss, config.seed});
    if (config.stopping == StoppingMode::OneBatch) break;

    const double metric = validation(model);
    result.validation_trace.push_back(metric);
    if (metric > best) {
      best = metric;
      since_best = 0;
      result.best_batch = b + 1;
      result.snapshot_val = take_snapshot(model, roles, {step, loss, config.seed});
    } else if (++since_best >= config.patience) {
      result.stop_reason = StopReason::Patience;
      break;
    }
  }
  return result;
}

ClassDistribution null_mean_distribution(const MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                                         std::span<const NullInput> corpus, std::span<const std::string> aspects,
                                         std::size_t threads) {
  if (corpus.empty()) throw ContractError("null corpus is empty");
  const auto labels = resolve_label_tokens(task.prompt, task.verbalizer, tokenizer);
  const auto max_len = static_cast<std::size_t>(model.config().max_seq_len);
  const auto prompts = render_null_batch(task, tokenizer, corpus, aspects, 0, nullptr, max_len);
  std::vector<ClassDistribution> dists(prompts.size());
  parallel_for(prompts.size(), threads, [&](std::size_t i) { dists[i] = label_probs(model, prompts[i], labels); });
  return mean_distribution(dists);
}

double distribution_variance(const MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                             std::span<const NullInput> corpus, std::span<const std::string> aspects,
                             std::size_t threads) {
  return distribution_variance(null_mean_distribution(model, tokenizer, task, corpus, aspects, threads));
}

std::string corpus_hash(std::span<const NullInput> corpus) {
  std::string joined;
  for (const auto& e : corpus) joined += e.id + "\n";
  return null_input_id(joined);
}

namespace {

std::string_view update_mode_name(UpdateMode m) { return m == UpdateMode::BiasOnly ? "bias-only" : "full"; }
std::string_view stopping_name(StoppingMode m) { return m == StoppingMode::OneBatch ? "one-batch" : "validation"; }
std::string_view demo_mode_name(DemoMode m) { return m == DemoMode::NoDemo ? "no-demo" : "with-demo"; }

}  // namespace

json calibration_config_json(const CalibrationConfig& config) {
  json demos = json::array();
  for (const auto& d : config.demos) {
    json j{{"text", d.text}, {"label", d.label}};
    if (d.aspect) j["aspect"] = *d.aspect;
    demos.push_back(j);
  }
  return {{"lr", config.lr},
          {"batch_size", config.batch_size},
          {"update_mode", update_mode_name(config.update_mode)},
          {"stopping", stopping_name(config.stopping)},
          {"patience", config.patience},
          {"max_batches", config.max_batches},
          {"seed", config.seed},
          {"demo_mode", demo_mode_name(config.demo_mode)},
          {"demos", demos},
          {"aspects", config.aspects},
          {"max_len", config.max_len}};
}

json write_calibration_run(const std::filesystem::path& dir, const CalibrationConfig& config,
                           const CalibrationResult& result, std::span<const NullInput> corpus) {
  std::filesystem::create_directories(dir);
  save_snapshot(dir / "one_batch", result.snapshot_one_batch);
  json snapshots{{"one_batch", "one_batch"}};
  if (result.snapshot_val) {
    save_snapshot(dir / "val", *result.snapshot_val);
    snapshots["val"] = "val";
  }
  json manifest{{"config", calibration_config_json(config)},
                {"seed", config.seed},
                {"corpus_size", corpus.size()},
                {"corpus_hash", corpus_hash(corpus)},
                {"loss_trace", result.loss_trace},
                {"validation_trace", result.validation_trace},
                {"best_batch", result.best_batch},
                {"steps", result.steps},
                {"stop_reason", stop_reason_name(result.stop_reason)},
                {"warnings", result.warnings},
                {"snapshots", snapshots}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
  return manifest;
}

}  // namespace nullcal

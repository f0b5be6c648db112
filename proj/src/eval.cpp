#include "nullcal/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "nullcal/parallel.hpp"
#include "nullcal/rng.hpp"

namespace nullcal {
using nlohmann::json;

std::string_view split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "unknown";
}

LabeledDataset load_dataset(const std::filesystem::path& path, Split split, std::string task) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset " + path.string());
  LabeledDataset data;
  data.split = split;
  data.task = std::move(task);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      LabeledExample ex{j.at("text").get<std::string>(), std::nullopt, j.at("label").get<std::string>()};
      if (j.contains("aspect") && !j["aspect"].is_null()) ex.aspect = j["aspect"].get<std::string>();
      data.examples.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
  return data;
}

void write_dataset(const std::filesystem::path& path, const LabeledDataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& ex : data.examples) {
    json j{{"text", ex.text}, {"label", ex.label}};
    if (ex.aspect) j["aspect"] = *ex.aspect;
    out << j.dump() << '\n';
  }
}

void check_labels(const LabeledDataset& data, const Verbalizer& verbalizer) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!verbalizer.index_of(data.examples[i].label)) {
      throw ConfigError(std::string(split_name(data.split)) + " example " + std::to_string(i + 1) + " has label '" +
                        data.examples[i].label + "' outside the verbalizer");
    }
  }
}

namespace {

std::vector<std::vector<std::size_t>> indices_by_class(const LabeledDataset& data, const Verbalizer& verbalizer) {
  check_labels(data, verbalizer);
  std::vector<std::vector<std::size_t>> by_class(verbalizer.size());
  for (std::size_t i = 0; i < data.size(); ++i) by_class[*verbalizer.index_of(data.examples[i].label)].push_back(i);
  return by_class;
}

}  // namespace

KShotSplit sample_k_shot(const LabeledDataset& pool, const Verbalizer& verbalizer, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ConfigError("K must be positive");
  auto by_class = indices_by_class(pool, verbalizer);
  Rng rng(derive_seed(seed, "k-shot"));
  KShotSplit out;
  out.train.split = Split::Train;
  out.val.split = Split::Val;
  out.train.task = out.val.task = pool.task;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 2 * k) {
      throw ConfigError("class '" + verbalizer.labels[c] + "' has " + std::to_string(idx.size()) +
                        " examples; K-shot train and val need " + std::to_string(2 * k));
    }
    rng.shuffle(std::span<std::size_t>(idx));
    for (std::size_t i = 0; i < k; ++i) out.train.examples.push_back(pool.examples[idx[i]]);
    for (std::size_t i = k; i < 2 * k; ++i) out.val.examples.push_back(pool.examples[idx[i]]);
  }
  return out;
}

LabeledDataset subsample(const LabeledDataset& data, std::size_t max_examples, std::uint64_t seed) {
  if (max_examples == 0 || max_examples >= data.size()) return data;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "subsample"));
  rng.shuffle(std::span<std::size_t>(idx));
  idx.resize(max_examples);
  std::sort(idx.begin(), idx.end());
  LabeledDataset out{{}, data.split, data.task};
  for (std::size_t i : idx) out.examples.push_back(data.examples[i]);
  return out;
}

DemonstrationSet sample_demos(const LabeledDataset& train, const Verbalizer& verbalizer, std::uint64_t seed) {
  const auto by_class = indices_by_class(train, verbalizer);
  Rng rng(derive_seed(seed, "demos"));
  DemonstrationSet demos;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) throw ConfigError("no training example for class '" + verbalizer.labels[c] + "'");
    const auto& ex = train.examples[by_class[c][rng.below(by_class[c].size())]];
    demos.push_back(Demonstration{ex.text, ex.aspect, ex.label});
  }
  return demos;
}

// ---------------------------------------------------------------------------

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted, std::size_t count) {
  if (truth >= n_ || predicted >= n_) throw ContractError("confusion index outside the label set");
  counts_[truth * n_ + predicted] += count;
}

std::size_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0}); }

std::size_t ConfusionMatrix::support(std::size_t c) const {
  std::size_t s = 0;
  for (std::size_t p = 0; p < n_; ++p) s += at(c, p);
  return s;
}

std::size_t ConfusionMatrix::predicted(std::size_t c) const {
  std::size_t s = 0;
  for (std::size_t t = 0; t < n_; ++t) s += at(t, c);
  return s;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (n_ == 0) return *this = other;
  if (other.n_ != n_) throw ContractError("adding confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

json ConfusionMatrix::to_json() const {
  json rows = json::array();
  for (std::size_t t = 0; t < n_; ++t) {
    json row = json::array();
    for (std::size_t p = 0; p < n_; ++p) row.push_back(at(t, p));
    rows.push_back(row);
  }
  return rows;
}

double accuracy(const ConfusionMatrix& m) {
  const auto total = m.total();
  if (total == 0) throw ContractError("accuracy of an empty evaluation");
  std::size_t correct = 0;
  for (std::size_t c = 0; c < m.num_classes(); ++c) correct += m.at(c, c);
  return static_cast<double>(correct) / static_cast<double>(total);
}

double weighted_f1(const ConfusionMatrix& m) {
  const auto total = m.total();
  if (total == 0) throw ContractError("weighted F1 of an empty evaluation");
  double f1 = 0.0;
  for (std::size_t c = 0; c < m.num_classes(); ++c) {
    const auto support = m.support(c);
    if (support == 0) continue;
    const double tp = static_cast<double>(m.at(c, c));
    const auto predicted = m.predicted(c);
    const double precision = predicted ? tp / static_cast<double>(predicted) : 0.0;
    const double recall = tp / static_cast<double>(support);
    const double f = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    f1 += static_cast<double>(support) / static_cast<double>(total) * f;
  }
  return f1;
}

double metric_value(Metric metric, const ConfusionMatrix& m) {
  return metric == Metric::Accuracy ? accuracy(m) : weighted_f1(m);
}

json RunMetrics::to_json() const {
  return {{"seed", seed},           {"accuracy", accuracy}, {"weighted_f1", weighted_f1},
          {"excluded", excluded},   {"errors", errors},     {"confusion", confusion.to_json()}};
}

double sample_std(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double acc = 0.0;
  for (double v : values) acc += (v - mean) * (v - mean);
  return std::sqrt(acc / static_cast<double>(values.size() - 1));
}

MetricsReport seed_aggregate(std::span<const RunMetrics> runs, std::vector<std::string> labels) {
  if (runs.empty()) throw ContractError("seed aggregation needs at least one run");
  MetricsReport r;
  r.labels = std::move(labels);
  r.runs.assign(runs.begin(), runs.end());
  std::vector<double> acc, f1;
  for (const auto& run : runs) {
    acc.push_back(run.accuracy);
    f1.push_back(run.weighted_f1);
    r.confusion += run.confusion;
    r.excluded += run.excluded;
  }
  const auto n = static_cast<double>(runs.size());
  r.mean_accuracy = std::accumulate(acc.begin(), acc.end(), 0.0) / n;
  r.mean_weighted_f1 = std::accumulate(f1.begin(), f1.end(), 0.0) / n;
  r.std_accuracy = sample_std(acc);
  r.std_weighted_f1 = sample_std(f1);
  return r;
}

json MetricsReport::to_json() const {
  json runs_json = json::array();
  for (const auto& run : runs) runs_json.push_back(run.to_json());
  return {{"labels", labels},
          {"runs", runs_json},
          {"mean_accuracy", mean_accuracy},
          {"std_accuracy", std_accuracy},
          {"mean_weighted_f1", mean_weighted_f1},
          {"std_weighted_f1", std_weighted_f1},
          {"confusion", confusion.to_json()},
          {"excluded", excluded}};
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "seed,accuracy,weighted_f1,excluded\n";
  for (const auto& run : runs) out << run.seed << ',' << run.accuracy << ',' << run.weighted_f1 << ',' << run.excluded << '\n';
  out << "mean," << mean_accuracy << ',' << mean_weighted_f1 << ',' << excluded << '\n';
  out << "std," << std_accuracy << ',' << std_weighted_f1 << ",\n";
  return out.str();
}

// ---------------------------------------------------------------------------

namespace {

std::size_t resolve_max_len(const MaskedLM& model, const EvalOptions& options) {
  return options.max_len ? options.max_len : static_cast<std::size_t>(model.config().max_seq_len);
}

std::optional<std::string_view> aspect_of(const LabeledExample& ex) {
  if (!ex.aspect) return std::nullopt;
  return std::string_view(*ex.aspect);
}

std::vector<TokenId> render_example(const TaskPrompt& task, const Tokenizer& tokenizer, const LabeledExample& ex,
                                    const DemonstrationSet& demos, std::size_t max_len) {
  if (demos.empty()) return render_prompt(task.prompt, tokenizer, ex.text, aspect_of(ex), max_len);
  try {
    return render_with_demos(task.prompt, tokenizer, ex.text, aspect_of(ex), demos, task.verbalizer, max_len);
  } catch (const DemoOverflowError& e) {
    const DemonstrationSet fitting(demos.begin(), demos.begin() + static_cast<std::ptrdiff_t>(e.demos_that_fit()));
    return render_with_demos(task.prompt, tokenizer, ex.text, aspect_of(ex), fitting, task.verbalizer, max_len);
  }
}

}  // namespace

Scored score_examples(const MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                      const LabeledDataset& data, const DemonstrationSet& demos, const EvalOptions& options) {
  const auto labels = resolve_label_tokens(task.prompt, task.verbalizer, tokenizer);
  const auto max_len = resolve_max_len(model, options);
  std::vector<std::optional<ClassDistribution>> dists(data.size());
  std::vector<std::string> errors(data.size());
  parallel_for(data.size(), options.threads, [&](std::size_t i) {
    try {
      dists[i] = label_probs(model, render_example(task, tokenizer, data.examples[i], demos, max_len), labels);
    } catch (const RenderError& e) {
      errors[i] = "example " + std::to_string(i + 1) + ": " + e.what();
    }
  });
  Scored out{std::move(dists), {}};
  for (auto& e : errors)
    if (!e.empty()) out.errors.push_back(std::move(e));
  return out;
}

RunMetrics tally(const LabeledDataset& data, const Verbalizer& verbalizer,
                 std::span<const std::optional<ClassDistribution>> scores, std::vector<std::string> errors,
                 std::uint64_t seed) {
  check_labels(data, verbalizer);
  if (scores.size() != data.size()) throw ContractError("one score per example required");
  RunMetrics m;
  m.seed = seed;
  m.confusion = ConfusionMatrix(verbalizer.size());
  m.errors = std::move(errors);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!scores[i]) {
      ++m.excluded;
      continue;
    }
    const auto predicted = scores[i]->argmax();
    m.predictions.push_back(predicted);
    m.confusion.add(*verbalizer.index_of(data.examples[i].label), predicted);
  }
  if (m.confusion.total() == 0) throw ContractError("no example of the test set could be evaluated");
  m.accuracy = accuracy(m.confusion);
  m.weighted_f1 = weighted_f1(m.confusion);
  return m;
}

RunMetrics zero_shot_eval(const MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                          const LabeledDataset& test, const EvalOptions& options) {
  return icl_with_demo_eval(model, tokenizer, task, {}, test, options);
}

RunMetrics icl_with_demo_eval(const MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                              const DemonstrationSet& demos, const LabeledDataset& test, const EvalOptions& options) {
  if (test.empty()) throw ContractError("test set is empty");
  auto scored = score_examples(model, tokenizer, task, test, demos, options);
  return tally(test, task.verbalizer, scored.dists, std::move(scored.errors), options.seed);
}

RunMetrics outcal_eval(const MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                       std::span<const std::string> domain_strings, const LabeledDataset& test,
                       const DemonstrationSet& demos, const EvalOptions& options) {
  if (domain_strings.empty()) throw ConfigError("OutCal needs at least one domain string");
  if (test.empty()) throw ContractError("test set is empty");
  // Aspect-level templates probe the domain string with each example's own
  // aspect, so the denominator is computed per aspect.
  std::map<std::optional<std::string>, ClassDistribution> denominators;
  for (const auto& ex : test.examples) denominators.try_emplace(ex.aspect);
  for (auto& [aspect, denom] : denominators) {
    LabeledDataset domain{{}, Split::Test, test.task};
    for (const auto& d : domain_strings) domain.examples.push_back({d, aspect, task.verbalizer.labels[0]});
    auto scored = score_examples(model, tokenizer, task, domain, demos, options);
    std::vector<ClassDistribution> dists;
    for (auto& s : scored.dists) {
      if (!s) throw RenderError("domain string could not be rendered: " + scored.errors.front());
      dists.push_back(*s);
    }
    denom = mean_distribution(dists);
  }
  auto scored = score_examples(model, tokenizer, task, test, demos, options);
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (!scored.dists[i]) continue;
    const auto& denom = denominators.at(test.examples[i].aspect);
    for (std::size_t k = 0; k < denom.size(); ++k) {
      scored.dists[i]->probs[k] /= std::max(denom[k], kProbClamp);
    }
  }
  return tally(test, task.verbalizer, scored.dists, std::move(scored.errors), options.seed);
}

ValidationMetric make_validation_metric(const Tokenizer& tokenizer, const TaskPrompt& task, LabeledDataset val,
                                        EvalOptions options) {
  if (val.empty()) throw ConfigError("validation set is empty");
  const Metric metric = task.prompt.uses_aspect() ? Metric::WeightedF1 : Metric::Accuracy;
  return [&tokenizer, task, val = std::move(val), options, metric](const MaskedLM& model) {
    const auto m = zero_shot_eval(model, tokenizer, task, val, options);
    return metric == Metric::Accuracy ? m.accuracy : m.weighted_f1;
  };
}

// ---------------------------------------------------------------------------

template <typename T>
Var prompt_ft_loss(BasicMaskedLM<T>& model, BasicTape<T>& tape, std::span<const std::vector<TokenId>> prompts,
                   std::span<const TokenId> label_tokens, std::span<const std::int32_t> targets) {
  if (prompts.empty()) throw ContractError("prompt-FT batch is empty");
  check_label_tokens(label_tokens, model.config().vocab_size);
  std::vector<Var> rows;
  rows.reserve(prompts.size());
  for (const auto& ids : prompts) rows.push_back(ops::select_cols(tape, model.mask_logits(tape, ids), label_tokens));
  return ops::cross_entropy(tape, ops::concat_rows(tape, std::span<const Var>(rows)), targets);
}

template Var prompt_ft_loss<float>(BasicMaskedLM<float>&, BasicTape<float>&, std::span<const std::vector<TokenId>>,
                                   std::span<const TokenId>, std::span<const std::int32_t>);
template Var prompt_ft_loss<double>(BasicMaskedLM<double>&, BasicTape<double>&, std::span<const std::vector<TokenId>>,
                                    std::span<const TokenId>, std::span<const std::int32_t>);

PromptFTResult prompt_ft(MaskedLM& model, const Tokenizer& tokenizer, const TaskPrompt& task,
                         const LabeledDataset& train, const LabeledDataset& val, const PromptFTConfig& config,
                         const EvalOptions& options) {
  if (train.empty()) throw ConfigError("prompt-based fine-tuning needs a non-empty train split");
  if (val.empty()) throw ConfigError("prompt-based fine-tuning needs a non-empty validation split");
  if (!(config.lr >= 0.0) || !std::isfinite(config.lr)) throw ConfigError("fine-tuning lr must be finite and >= 0");
  if (config.batch_size == 0) throw ConfigError("batch size must be positive");
  check_labels(train, task.verbalizer);
  const auto labels = resolve_label_tokens(task.prompt, task.verbalizer, tokenizer);
  const auto max_len = resolve_max_len(model, options);
  const Metric metric = task.prompt.uses_aspect() ? Metric::WeightedF1 : Metric::Accuracy;

  std::vector<std::vector<TokenId>> prompts;
  std::vector<std::int32_t> targets;
  for (const auto& ex : train.examples) {
    prompts.push_back(render_example(task, tokenizer, ex, config.demos, max_len));
    targets.push_back(static_cast<std::int32_t>(*task.verbalizer.index_of(ex.label)));
  }

  PromptFTResult result;
  auto evaluate = [&] {
    auto m = icl_with_demo_eval(model, tokenizer, task, config.demos, val, options);
    m.seed = config.seed;
    return m;
  };
  result.val = evaluate();
  result.val_trace.push_back(metric_value(metric, result.val.confusion));
  double best = result.val_trace.back();
  ParameterSnapshot best_state = take_snapshot(model, config.roles);

  Rng rng(derive_seed(config.seed, "prompt-ft"));
  std::vector<std::size_t> order(prompts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<std::vector<TokenId>> batch;
      std::vector<std::int32_t> batch_targets;
      for (std::size_t i = begin; i < end; ++i) {
        batch.push_back(prompts[order[i]]);
        batch_targets.push_back(targets[order[i]]);
      }
      Tape tape(config.roles);
      Var loss = prompt_ft_loss(model, tape, std::span<const std::vector<TokenId>>(batch), labels, batch_targets);
      result.loss_trace.push_back(static_cast<double>(tape.value(loss).item()));
      tape.backward(loss);
      sgd_step(model.parameters(), config.lr, config.roles);
    }
    auto m = evaluate();
    result.val_trace.push_back(metric_value(metric, m.confusion));
    if (result.val_trace.back() > best) {
      best = result.val_trace.back();
      result.best_epoch = epoch;
      result.val = std::move(m);
      best_state = take_snapshot(model, config.roles);
    }
  }
  restore_snapshot(model, best_state);
  return result;
}

// ---------------------------------------------------------------------------

std::string CrossTaskMatrix::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "task";
  for (const auto& c : columns) out << ',' << c;
  out << '\n';
  for (std::size_t r = 0; r < row_tasks.size(); ++r) {
    out << row_tasks[r];
    for (double v : delta[r]) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

CrossTaskMatrix cross_task_matrix(const MaskedLM& base, const Tokenizer& tokenizer, std::span<const TaskEval> tasks,
                                  std::span<const std::string> snapshot_names,
                                  std::span<const ParameterSnapshot> snapshots, const EvalOptions& options) {
  if (snapshot_names.size() != snapshots.size()) throw ConfigError("one name per snapshot required");
  CrossTaskMatrix m;
  m.columns.push_back("original");
  m.columns.insert(m.columns.end(), snapshot_names.begin(), snapshot_names.end());
  std::vector<double> baseline;
  for (const auto& t : tasks) {
    m.row_tasks.push_back(t.name);
    baseline.push_back(zero_shot_eval(base, tokenizer, t.task, t.test, options).accuracy);
    m.delta.push_back({0.0});
  }
  for (const auto& snapshot : snapshots) {
    MaskedLM calibrated = base;
    restore_snapshot(calibrated, snapshot);
    for (std::size_t r = 0; r < tasks.size(); ++r) {
      const double acc = zero_shot_eval(calibrated, tokenizer, tasks[r].task, tasks[r].test, options).accuracy;
      m.delta[r].push_back(acc - baseline[r]);
    }
  }
  return m;
}

}  // namespace nullcal

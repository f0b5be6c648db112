// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <set>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "nullcal/calibration.hpp"
#include "nullcal/eval.hpp"
#include "nullcal/model_io.hpp"
#include "nullcal/null_corpus.hpp"
#include "nullcal/synthetic.hpp"
#include "test_support.hpp"

using namespace nullcal;
using namespace nullcal::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------------------
// Shared fixtures

ClassDistribution random_distribution(Rng& rng, std::size_t y) {
  ClassDistribution d{std::vector<double>(y)};
  double s = 0;
  for (auto& v : d.probs) s += v = 1e-3 + rng.uniform();
  for (auto& v : d.probs) v /= s;
  return d;
}

std::vector<NullInput> null_inputs(std::size_t n, std::uint64_t seed) {
  const std::vector<std::string> words{"the", "a", "film", "it", "is", "about", "this", "words", "n/a", "."};
  Rng rng(seed);
  NullCorpus c;
  while (c.size() < n) {
    std::string text;
    const std::size_t len = 1 + rng.below(5);
    for (std::size_t i = 0; i < len; ++i) text += (i ? " " : "") + words[rng.below(words.size())];
    c.add(text, NullSource::Generated, rng.uniform());
  }
  return c.entries();
}

void randomize_biases(BasicMaskedLM<double>& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : m.parameters())
    if (p.role() == Role::Bias)
      for (auto& v : p.value().data()) v = 0.1 * rng.normal();
}

std::vector<std::uint32_t> checksums(const MaskedLM& m) {
  std::vector<std::uint32_t> out;
  for (const auto& p : m.parameters()) out.push_back(crc32_of(p.value().data()));
  return out;
}

bool same_snapshot(const ParameterSnapshot& a, const ParameterSnapshot& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, t] : a.tensors) {
    const auto it = b.tensors.find(name);
    if (it == b.tensors.end()) return false;
    const auto& x = t.value.data();
    const auto& y = it->second.value.data();
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// 1

double brute_kl_uniform(const std::vector<double>& p) {
  const double u = 1.0 / static_cast<double>(p.size());
  double kl = 0;
  for (double v : p) kl += u * (std::log(u) - std::log(std::max(v, 1e-12)));
  return kl;
}

Outcome loss_oracle() {
  Rng rng(101);
  double worst = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(16), y = 2 + rng.below(5);
    std::vector<ClassDistribution> batch;
    for (std::size_t i = 0; i < n; ++i) batch.push_back(random_distribution(rng, y));
    std::vector<double> mean(y, 0.0);
    double per = 0;
    for (const auto& d : batch) {
      per += brute_kl_uniform(d.probs);
      for (std::size_t k = 0; k < y; ++k) mean[k] += d[k];
    }
    for (auto& v : mean) v /= static_cast<double>(n);
    const double expect = per / static_cast<double>(n) + brute_kl_uniform(mean);
    worst = std::max(worst, std::abs(batch_loss(batch) - expect));
  }
  const double kl = kl_uniform(ClassDistribution{{0.8, 0.2}});
  return {worst < 1e-10 && std::abs(kl - 0.223144) <= 1e-6,
          "max |err| " + fmt("%.2e", worst) + ", kl(0.8,0.2) " + fmt("%.6f", kl)};
}

// ---------------------------------------------------------------------------
// 2

// Relative error with a floor: gradients that are analytically zero (the
// attention key biases) come back from central differences as ~1e-10 of
// rounding noise, which the floor absorbs.
double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-5}); }

double max_bias_grad_error(BasicMaskedLM<double>& m, const std::function<Var(BasicTape<double>&)>& build) {
  zero_grads(std::span(m.parameters()));
  BasicTape<double> tape;
  tape.backward(build(tape));
  auto loss = [&] {
    BasicTape<double> t(RoleSet::none());
    return t.value(build(t)).item();
  };
  double worst = 0;
  const double h = 1e-5;
  for (auto& p : m.parameters()) {
    if (p.role() != Role::Bias) continue;
    for (std::size_t i = 0; i < p.value().numel(); ++i) {
      const double orig = p.value()[i];
      p.value()[i] = orig + h;
      const double up = loss();
      p.value()[i] = orig - h;
      const double down = loss();
      p.value()[i] = orig;
      worst = std::max(worst, rel_err(p.grad()[i], (up - down) / (2 * h)));
    }
  }
  return worst;
}

Outcome gradient_check() {
  const Tokenizer tok = tiny_tokenizer();
  auto m = MaskedLM::random(tiny_config(tiny_vocab().size(), 2, 32, 4), 102, 0.3).cast<double>();
  randomize_biases(m, 103);
  const auto task = three_way_task();
  const auto labels = resolve_label_tokens(task.prompt, task.verbalizer, tok);
  std::vector<std::vector<TokenId>> prompts;
  for (const char* text : {"a film", "it is about sports", "this words", "the"})
    prompts.push_back(render_prompt(task.prompt, tok, text, std::nullopt, 32));
  const std::vector<std::int32_t> targets{0, 2, 1, 2};

  const double kl_err = max_bias_grad_error(
      m, [&](BasicTape<double>& t) { return null_batch_loss(m, t, std::span(prompts), labels); });
  const double ce_err = max_bias_grad_error(
      m, [&](BasicTape<double>& t) { return prompt_ft_loss(m, t, std::span(prompts), labels, targets); });
  return {kl_err < 1e-4 && ce_err < 1e-4,
          "max rel err batch-KL " + fmt("%.2e", kl_err) + ", prompt-FT CE " + fmt("%.2e", ce_err)};
}

// ---------------------------------------------------------------------------
// 3

Outcome bias_only_purity() {
  const Tokenizer tok = tiny_tokenizer();
  const auto task = sentiment_task();
  const auto corpus = null_inputs(400, 104);
  MaskedLM m = MaskedLM::random(tiny_config(tiny_vocab().size(), 2, 16, 2), 105, 0.3);
  const auto before = checksums(m);

  CalibrationConfig cfg;
  cfg.lr = 1e-2;
  cfg.batch_size = 8;
  cfg.stopping = StoppingMode::ValidationBased;
  cfg.patience = 50;
  cfg.max_batches = 50;
  cfg.seed = 1;
  std::size_t calls = 0;
  const auto r = calibrate(m, tok, task, corpus, cfg, [&](const MaskedLM&) { return static_cast<double>(++calls); });
  const auto after = checksums(m);
  std::size_t frozen_changed = 0, biases_changed = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const bool changed = before[i] != after[i];
    if (m.parameters()[i].role() == Role::Bias)
      biases_changed += changed;
    else
      frozen_changed += changed;
  }

  MaskedLM full = MaskedLM::random(tiny_config(tiny_vocab().size(), 2, 16, 2), 105, 0.3);
  const auto full_before = checksums(full);
  CalibrationConfig fcfg;
  fcfg.lr = 1e-2;
  fcfg.batch_size = 8;
  fcfg.update_mode = UpdateMode::Full;
  calibrate(full, tok, task, corpus, fcfg);
  const auto full_after = checksums(full);
  std::size_t weights_changed = 0;
  for (std::size_t i = 0; i < full_before.size(); ++i)
    weights_changed += full.parameters()[i].role() == Role::Weight && full_before[i] != full_after[i];

  return {r.steps == 50 && frozen_changed == 0 && biases_changed >= 1 && weights_changed >= 1,
          std::to_string(r.steps) + " steps, weight/embedding tensors changed " + std::to_string(frozen_changed) +
              ", bias tensors changed " + std::to_string(biases_changed) + ", full-mode weights changed " +
              std::to_string(weights_changed)};
}

// ---------------------------------------------------------------------------
// 4

Outcome parameter_fraction() {
  ModelConfig c;
  c.vocab_size = 50265;
  c.num_layers = 24;
  c.d_model = 1024;
  c.num_heads = 16;
  c.d_ff = 4096;
  c.max_seq_len = 512;
  c.cls_token_id = 0;
  c.pad_token_id = 1;
  c.sep_token_id = 2;
  c.unk_token_id = 3;
  c.mask_token_id = 50264;
  c.tie_lm_head = true;
  c.validate();
  const auto counts = count_parameters(c);
  return {counts.bias_fraction() < 0.001, std::to_string(counts.bias) + " / " + std::to_string(counts.total) +
                                              " = " + fmt("%.5f", counts.bias_fraction())};
}

// ---------------------------------------------------------------------------
// 5

Outcome convergence_to_uniform() {
  const Tokenizer tok = tiny_tokenizer();
  const auto task = sentiment_task();
  const auto labels = resolve_label_tokens(task.prompt, task.verbalizer, tok);
  const auto batch = null_inputs(16, 106);
  const auto prompts = render_null_batch(task, tok, batch, {}, 0, nullptr, 32);
  MaskedLM m = MaskedLM::random(tiny_config(tiny_vocab().size(), 2, 32, 2), 1, 0.2);

  auto mean_dist = [&] {
    std::vector<ClassDistribution> d;
    for (const auto& p : prompts) d.push_back(label_probs(m, p, labels));
    return mean_distribution(d);
  };
  std::vector<double> variance{distribution_variance(mean_dist())};
  const double kl_start = kl_uniform(mean_dist());
  for (int step = 0; step < 500; ++step) {
    calibration_step(m, prompts, labels, 1e-3, update_roles(UpdateMode::BiasOnly));
    variance.push_back(distribution_variance(mean_dist()));
  }
  const double kl_end = kl_uniform(mean_dist());
  std::vector<double> avg;
  for (std::size_t i = 0; i + 10 <= variance.size(); ++i) {
    double s = 0;
    for (std::size_t k = i; k < i + 10; ++k) s += variance[k];
    avg.push_back(s / 10);
  }
  bool monotone = true;
  for (std::size_t i = 1; i < avg.size(); ++i) monotone = monotone && avg[i] <= avg[i - 1];
  return {kl_end < 1e-3 && monotone, "KL(U||mean P) " + fmt("%.3e", kl_start) + " -> " + fmt("%.3e", kl_end) +
                                         ", variance " + fmt("%.3e", variance.front()) + " -> " +
                                         fmt("%.3e", variance.back()) + (monotone ? ", monotone" : ", NOT monotone")};
}

// ---------------------------------------------------------------------------
// 6

Outcome synthetic_bias() {
  const SyntheticTask data = make_synthetic_task();
  const auto trained = train_synthetic_model(data);
  const auto great = data.vocab.find("great").value();
  MaskedLM biased = trained.model;
  inject_label_bias(biased, great, 2.0);

  std::vector<NullInput> nulls(data.nulls.entries().begin(), data.nulls.entries().begin() + 32);
  const double acc_unbiased = zero_shot_eval(trained.model, data.tokenizer, data.task, data.test).accuracy;
  const double acc_biased = zero_shot_eval(biased, data.tokenizer, data.task, data.test).accuracy;
  const double var_biased = distribution_variance(biased, data.tokenizer, data.task, nulls);

  MaskedLM calibrated = biased;
  CalibrationConfig cfg;
  cfg.lr = 0.2;
  cfg.batch_size = 32;
  cfg.seed = 0;
  const auto r = calibrate(calibrated, data.tokenizer, data.task, nulls, cfg);
  restore_snapshot(calibrated, r.snapshot_one_batch);
  const double acc_cal = zero_shot_eval(calibrated, data.tokenizer, data.task, data.test).accuracy;
  const double var_cal = distribution_variance(calibrated, data.tokenizer, data.task, nulls);

  const bool pass = trained.train_accuracy == 1.0 && acc_biased < acc_unbiased && acc_cal > acc_biased &&
                    r.steps == 1 && var_cal <= 0.5 * var_biased;
  return {pass, "train acc " + fmt("%.2f", trained.train_accuracy) + ", test acc unbiased " + fmt("%.3f", acc_unbiased) +
                    " biased " + fmt("%.3f", acc_biased) + " calibrated " + fmt("%.3f", acc_cal) + ", null variance " +
                    fmt("%.4f", var_biased) + " -> " + fmt("%.4f", var_cal)};
}

// ---------------------------------------------------------------------------
// 7

Outcome filtering_exactness() {
  Rng rng(107);
  NullCorpus c;
  for (std::size_t i = 0; i < 1000; ++i)
    c.add("null input " + std::to_string(i), NullSource::Generated, static_cast<double>(rng.below(200)) / 200.0);
  const auto kept = filter_top_fraction(c, 0.8);

  std::vector<std::size_t> idx(c.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return *c[a].nsp_score > *c[b].nsp_score; });
  std::vector<std::size_t> expect(idx.begin(), idx.begin() + 800);
  std::sort(expect.begin(), expect.end());

  bool equal = kept.size() == expect.size();
  for (std::size_t i = 0; equal && i < expect.size(); ++i) equal = kept[i].id == c[expect[i]].id;
  double min_kept = 1e9, max_dropped = -1e9;
  for (std::size_t i = 0; i < 800; ++i) min_kept = std::min(min_kept, *c[idx[i]].nsp_score);
  for (std::size_t i = 800; i < 1000; ++i) max_dropped = std::max(max_dropped, *c[idx[i]].nsp_score);
  std::set<std::string> kept_ids;
  for (const auto& e : kept.entries()) kept_ids.insert(e.id);
  double min_actual = 1e9, max_actual_dropped = -1e9;
  for (const auto& e : c.entries()) {
    if (kept_ids.count(e.id))
      min_actual = std::min(min_actual, *e.nsp_score);
    else
      max_actual_dropped = std::max(max_actual_dropped, *e.nsp_score);
  }
  return {kept.size() == 800 && equal && min_actual >= max_actual_dropped && min_kept >= max_dropped,
          "retained " + std::to_string(kept.size()) + (equal ? ", equal to sort oracle" : ", DIFFERS from oracle") +
              ", min kept " + fmt("%.3f", min_actual) + " >= max dropped " + fmt("%.3f", max_actual_dropped)};
}

// ---------------------------------------------------------------------------
// 8

Outcome stopping_bookkeeping() {
  const Tokenizer tok = tiny_tokenizer();
  const auto task = sentiment_task();
  const auto corpus = null_inputs(100, 108);
  const MaskedLM base = MaskedLM::random(tiny_config(tiny_vocab().size()), 109, 0.5);
  const std::vector<double> script{0.2, 0.5, 0.9, 0.4, 0.6, 0.3, 0.8, 0.7, 0.1, 0.5};

  CalibrationConfig cfg;
  cfg.lr = 0.1;
  cfg.batch_size = 8;
  cfg.stopping = StoppingMode::ValidationBased;
  cfg.patience = 10;
  cfg.max_batches = 10;
  cfg.seed = 3;

  auto run = [&](std::optional<ParameterSnapshot>* at_three) {
    MaskedLM m = base;
    std::size_t call = 0;
    auto r = calibrate(m, tok, task, corpus, cfg, [&](const MaskedLM& current) {
      if (++call == 3 && at_three) *at_three = take_snapshot(current, update_roles(UpdateMode::BiasOnly));
      return script[call - 1];
    });
    return r;
  };
  std::optional<ParameterSnapshot> state_at_three;
  const auto a = run(&state_at_three);
  const auto b = run(nullptr);
  const bool snap_at_three = a.snapshot_val && state_at_three && same_snapshot(*a.snapshot_val, *state_at_three);
  const bool identical = a.snapshot_val && b.snapshot_val && same_snapshot(*a.snapshot_val, *b.snapshot_val) &&
                         same_snapshot(a.snapshot_one_batch, b.snapshot_one_batch);

  MaskedLM one = base;
  CalibrationConfig ocfg = cfg;
  ocfg.stopping = StoppingMode::OneBatch;
  const auto o = calibrate(one, tok, task, corpus, ocfg);

  return {a.best_batch == 3 && a.steps == 10 && snap_at_three && o.steps == 1 && identical,
          "best batch " + std::to_string(a.best_batch) + " of " + std::to_string(a.steps) +
              (snap_at_three ? ", snapshot equals state after batch 3" : ", snapshot MISMATCH") + ", one-batch steps " +
              std::to_string(o.steps) + (identical ? ", repeat run bit-identical" : ", repeat run DIFFERS")};
}

// ---------------------------------------------------------------------------
// 9

Outcome metric_oracles() {
  Rng rng(110);
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(6);
    ConfusionMatrix m(n);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t count = rng.below(3) == 0 ? 0 : rng.below(30);
        m.add(a, b, count);
        for (std::size_t k = 0; k < count; ++k) pairs.emplace_back(a, b);
      }
    if (pairs.empty()) {
      m.add(0, 0);
      pairs.emplace_back(0, 0);
    }
    const double total = static_cast<double>(pairs.size());
    double correct = 0, wf1 = 0;
    for (auto [x, y] : pairs) correct += x == y;
    for (std::size_t c = 0; c < n; ++c) {
      double tp = 0, fp = 0, fn = 0;
      for (auto [x, y] : pairs) {
        tp += x == c && y == c;
        fp += x != c && y == c;
        fn += x == c && y != c;
      }
      const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
      const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
      const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
      wf1 += (tp + fn) / total * f1;
    }
    worst = std::max({worst, std::abs(accuracy(m) - correct / total), std::abs(weighted_f1(m) - wf1)});
  }
  ConfusionMatrix ex(2);
  ex.add(0, 0, 9);
  ex.add(1, 0, 1);
  const double f1 = weighted_f1(ex);
  return {worst < 1e-9 && std::abs(f1 - 0.8526) < 5e-5,
          "max |err| " + fmt("%.2e", worst) + ", supports (9,1) weighted F1 " + fmt("%.4f", f1)};
}

// ---------------------------------------------------------------------------
// 10

Outcome pseudo_perplexity_oracle() {
  const Tokenizer tok = tiny_tokenizer();
  auto md = MaskedLM::random(tiny_config(tiny_vocab().size(), 2), 111, 0.5).cast<double>();
  randomize_biases(md, 112);
  const std::vector<std::string> words{"the", "movie", "was", "great", "terrible", "okay", ".", "it", "is", "about",
                                       "sports", "science", "a", "film", "good", "bad", "this", "words"};
  Rng rng(113);
  double worst = 0;
  for (int s = 0; s < 20; ++s) {
    std::vector<TokenId> ids{1};
    const std::size_t len = 2 + rng.below(6);
    for (std::size_t i = 0; i < len; ++i) ids.push_back(tok.encode(words[rng.below(words.size())])[0]);
    ids.push_back(2);
    std::vector<std::size_t> positions;
    for (std::size_t p = 1; p + 1 < ids.size(); ++p) positions.push_back(p);
    const auto r = pseudo_log_likelihood(md, std::span<const TokenId>(ids), positions);
    worst = std::max(worst, std::abs(r.log_prob - ref_pseudo_log_likelihood(md, ids)));
  }
  const MaskedLM uniform(tiny_config(tiny_vocab().size()));
  const double ppl = pseudo_perplexity(uniform, tok, "the movie was a good film .").pseudo_perplexity();
  const double v = static_cast<double>(tiny_vocab().size());
  return {worst < 1e-6 && std::abs(ppl - v) <= 1e-9 * v,
          "max |log-prob err| " + fmt("%.2e", worst) + ", uniform model " + fmt("%.9f", ppl) + " vs vocab " +
              fmt("%.0f", v)};
}

struct Criterion {
  const char* name;
  double budget_s;
  Outcome (*run)();
};

}  // namespace

int main() {
  const Criterion criteria[] = {
      {"loss oracle", 1, loss_oracle},
      {"gradient check", 30, gradient_check},
      {"bias-only purity", 60, bias_only_purity},
      {"parameter fraction", 10, parameter_fraction},
      {"convergence to uniform", 120, convergence_to_uniform},
      {"synthetic bias experiment", 180, synthetic_bias},
      {"filtering exactness", 1, filtering_exactness},
      {"stopping bookkeeping", 60, stopping_bookkeeping},
      {"metric oracles", 1, metric_oracles},
      {"pseudo-perplexity oracle", 30, pseudo_perplexity_oracle},
  };
  int failed = 0;
  int index = 0;
  for (const auto& c : criteria) {
    ++index;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool pass = o.pass && secs < c.budget_s;
    failed += !pass;
    std::printf("%s %2d %s: %s (%.2f s, limit %.0f s)\n", pass ? "PASS" : "FAIL", index, c.name, o.detail.c_str(),
                secs, c.budget_s);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}

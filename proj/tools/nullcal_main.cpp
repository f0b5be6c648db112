// nullcal: command-line driver for null-input calibration and evaluation.
//
// Exit codes: 0 success, 2 configuration error (bad flags, missing or
// malformed inputs), 3 runtime error.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "json_config.hpp"
#include "nullcal/calibration.hpp"
#include "nullcal/eval.hpp"
#include "nullcal/model_io.hpp"
#include "nullcal/null_corpus.hpp"
#include "nullcal/parallel.hpp"
#include "nullcal/rng.hpp"
#include "nullcal/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nullcal;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Globals {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string output_dir = "nullcal-out";
};

// Records what a command wrote; saved as index.json in the output directory.
class ArtifactIndex {
 public:
  ArtifactIndex(const Globals& g, std::string command, const CLI::App* sub)
      : dir_(g.output_dir),
        index_{{"command", std::move(command)}, {"seed", g.seed}, {"options", cli::JsonConfig::dump(sub)},
               {"artifacts", json::array()}} {
    fs::create_directories(dir_);
  }

  fs::path path(const std::string& name) const { return dir_ / name; }

  void write_text(const std::string& name, const std::string& text, const std::string& kind) {
    std::ofstream out(path(name), std::ios::binary);
    if (!out) throw Error("cannot write " + path(name).string());
    out << text;
    add(name, kind);
  }

  void add(const std::string& name, const std::string& kind) {
    index_["artifacts"].push_back({{"path", name}, {"kind", kind}});
  }

  void save() const {
    std::ofstream out(dir_ / "index.json", std::ios::binary);
    out << index_.dump(2) << '\n';
  }

 private:
  fs::path dir_;
  json index_;
};

LoadedModel load_model_with_snapshot(const std::string& model_dir, const std::string& snapshot) {
  LoadedModel loaded = load_model(model_dir);
  if (!snapshot.empty() && snapshot != "none") restore_snapshot(loaded.model, load_snapshot(snapshot));
  return loaded;
}

UpdateMode parse_update_mode(const std::string& s) { return s == "full" ? UpdateMode::Full : UpdateMode::BiasOnly; }

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) lines.push_back(line);
  }
  return lines;
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(10);
  out << v;
  return out.str();
}

// "name:rest" pairs from repeated flags.
std::pair<std::string, std::string> split_named(const std::string& s, const std::string& flag) {
  const auto colon = s.find(':');
  if (colon == std::string::npos || colon == 0) throw ConfigError(flag + " expects NAME:VALUE, got '" + s + "'");
  return {s.substr(0, colon), s.substr(colon + 1)};
}

// ---------------------------------------------------------------------------

struct InitModelArgs {
  std::string vocab;
  std::int64_t layers = 2, heads = 2, d_model = 32, d_ff = 64, max_seq_len = 64;
  double init_std = 0.02;
  bool lowercase = false, tie = false;
};

void add_init_model(CLI::App& app, InitModelArgs& a) {
  app.add_option("--vocab", a.vocab, "Vocabulary file, one token per line; must hold <mask> <s> </s> <pad> <unk>")
      ->required()
      ->check(CLI::ExistingFile);
  app.add_option("--layers", a.layers, "Transformer layers")->capture_default_str();
  app.add_option("--heads", a.heads, "Attention heads")->capture_default_str();
  app.add_option("--d-model", a.d_model, "Hidden size")->capture_default_str();
  app.add_option("--d-ff", a.d_ff, "Feed-forward size")->capture_default_str();
  app.add_option("--max-seq-len", a.max_seq_len, "Maximum sequence length")->capture_default_str();
  app.add_option("--init-std", a.init_std, "Standard deviation of the random init")->capture_default_str();
  app.add_flag("--lowercase", a.lowercase, "Lowercase text before lookup");
  app.add_flag("--tie-lm-head", a.tie, "Share the word embeddings with the LM head");
}

int run_init_model(const Globals& g, const InitModelArgs& a, const CLI::App* sub) {
  Vocab vocab = Vocab::load(a.vocab);
  ModelConfig config;
  config.num_layers = a.layers;
  config.num_heads = a.heads;
  config.d_model = a.d_model;
  config.d_ff = a.d_ff;
  config.max_seq_len = a.max_seq_len;
  config.vocab_size = static_cast<std::int64_t>(vocab.size());
  config.tie_lm_head = a.tie;
  config.do_lower_case = a.lowercase;
  auto special = [&](const char* token) {
    auto id = vocab.find(token);
    if (!id) throw ConfigError(std::string("vocabulary lacks the special token ") + token);
    return *id;
  };
  config.mask_token_id = special("<mask>");
  config.cls_token_id = special("<s>");
  config.sep_token_id = special("</s>");
  config.pad_token_id = special("<pad>");
  config.unk_token_id = special("<unk>");
  config.validate();
  ArtifactIndex index(g, "init-model", sub);
  save_model(index.path("model"), MaskedLM::random(config, derive_seed(g.seed, "init"), a.init_std), vocab);
  index.add("model", "model");
  index.save();
  const auto counts = count_parameters(config);
  std::cout << "parameters " << counts.total << " (bias fraction " << counts.bias_fraction() << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  double bias = 2.0;
  std::string bias_word = "great";
  double train_lr = 0.3;
};

void add_synth(CLI::App& app, SynthArgs& a) {
  app.add_option("--bias", a.bias, "Logit bias injected into one label word")->capture_default_str();
  app.add_option("--bias-word", a.bias_word, "Label word receiving the bias")->capture_default_str();
  app.add_option("--train-lr", a.train_lr, "Learning rate for fitting the toy model")->capture_default_str();
}

int run_synth(const Globals& g, const SynthArgs& a, const CLI::App* sub) {
  SyntheticOptions opts;
  opts.seed = g.seed;
  const SyntheticTask data = make_synthetic_task(opts);
  SyntheticTraining training;
  training.lr = a.train_lr;
  training.seed = g.seed;
  const auto trained = train_synthetic_model(data, training);
  const auto word = data.vocab.find(a.bias_word);
  if (!word || !data.task.verbalizer.index_of(a.bias_word == "great" ? "positive" : "negative")) {
    throw ConfigError("--bias-word must be a label word (great or terrible)");
  }
  MaskedLM biased = trained.model;
  inject_label_bias(biased, *word, a.bias);

  ArtifactIndex index(g, "synth-fixture", sub);
  save_model(index.path("model_trained"), trained.model, data.vocab);
  index.add("model_trained", "model");
  save_model(index.path("model_biased"), biased, data.vocab);
  index.add("model_biased", "model");
  index.write_text("template.json", data.task.to_json().dump(2) + "\n", "template");
  write_dataset(index.path("train.jsonl"), data.train);
  index.add("train.jsonl", "dataset");
  write_dataset(index.path("val.jsonl"), data.val);
  index.add("val.jsonl", "dataset");
  write_dataset(index.path("test.jsonl"), data.test);
  index.add("test.jsonl", "dataset");
  write_corpus(index.path("nulls.jsonl"), data.nulls);
  index.add("nulls.jsonl", "null-corpus");
  index.save();
  std::cout << "toy model fitted in " << trained.epochs << " epochs, train accuracy " << trained.train_accuracy << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct CalibrateArgs {
  std::string model, template_file, corpus, snapshot = "none", mode = "bias-only", stop = "one-batch",
                                             demo_mode = "no-demo", train, val, aspects_file;
  std::optional<double> lr;
  std::size_t batch_size = 32, patience = 5, max_batches = 50, max_len = 0;
  std::vector<std::string> aspects;
  bool no_top_n = false;
};

void add_calibrate(CLI::App& app, CalibrateArgs& a) {
  app.add_option("--model", a.model, "Model directory")->required()->check(CLI::ExistingDirectory);
  app.add_option("--template", a.template_file, "Template/verbalizer JSON")->required()->check(CLI::ExistingFile);
  app.add_option("--corpus", a.corpus, "Null-input JSONL")->required()->check(CLI::ExistingFile);
  app.add_option("--snapshot", a.snapshot, "Snapshot applied before calibrating, or none")->capture_default_str();
  app.add_option("--mode", a.mode, "Parameters to update")
      ->check(CLI::IsMember({"bias-only", "full"}))
      ->capture_default_str();
  app.add_option("--stop", a.stop, "Stopping rule")
      ->check(CLI::IsMember({"one-batch", "validation"}))
      ->capture_default_str();
  app.add_option("--demo-mode", a.demo_mode, "Append demonstrations to null prompts")
      ->check(CLI::IsMember({"no-demo", "with-demo"}))
      ->capture_default_str();
  app.add_option("--lr", a.lr, "Learning rate (default depends on --mode and --demo-mode)");
  app.add_option("--batch-size", a.batch_size, "Null prompts per batch")->capture_default_str();
  app.add_option("--patience", a.patience, "Non-improving batches before stopping")->capture_default_str();
  app.add_option("--max-batches", a.max_batches, "Batch cap for validation stopping")->capture_default_str();
  app.add_option("--max-len", a.max_len, "Token limit per prompt (0 = model limit)")->capture_default_str();
  app.add_option("--train", a.train, "Labelled JSONL to draw demonstrations from")->check(CLI::ExistingFile);
  app.add_option("--val", a.val, "Labelled JSONL for validation stopping")->check(CLI::ExistingFile);
  app.add_option("--aspects", a.aspects, "Aspect words for {aspect} templates");
  app.add_option("--aspects-file", a.aspects_file, "Aspect words, one per line")->check(CLI::ExistingFile);
  app.add_flag("--no-top-n", a.no_top_n, "Do not pick the top-N scored inputs for one-batch stopping");
}

int run_calibrate(const Globals& g, const CalibrateArgs& a, const CLI::App* sub) {
  LoadedModel loaded = load_model_with_snapshot(a.model, a.snapshot);
  const TaskPrompt task = load_task_prompt(a.template_file);
  resolve_label_tokens(task.prompt, task.verbalizer, loaded.tokenizer);
  const NullCorpus corpus = ingest(a.corpus);

  CalibrationConfig cfg;
  cfg.update_mode = parse_update_mode(a.mode);
  cfg.stopping = a.stop == "one-batch" ? StoppingMode::OneBatch : StoppingMode::ValidationBased;
  cfg.demo_mode = a.demo_mode == "with-demo" ? DemoMode::WithDemo : DemoMode::NoDemo;
  cfg.lr = a.lr.value_or(default_calibration_lr(cfg.update_mode, cfg.demo_mode));
  cfg.batch_size = a.batch_size;
  cfg.patience = a.patience;
  cfg.max_batches = a.max_batches;
  cfg.seed = g.seed;
  cfg.max_len = a.max_len;
  cfg.aspects = a.aspects;
  if (!a.aspects_file.empty()) {
    const auto extra = read_lines(a.aspects_file);
    cfg.aspects.insert(cfg.aspects.end(), extra.begin(), extra.end());
  }
  if (cfg.demo_mode == DemoMode::WithDemo) {
    if (a.train.empty()) throw ConfigError("--demo-mode with-demo needs --train");
    const auto train = load_dataset(a.train, Split::Train, "train");
    cfg.demos = sample_demos(train, task.verbalizer, derive_seed(g.seed, "calibration-demos"));
  }
  ValidationMetric metric;
  if (cfg.stopping == StoppingMode::ValidationBased) {
    if (a.val.empty()) throw ConfigError("--stop validation needs --val");
    auto val = load_dataset(a.val, Split::Val, "val");
    check_labels(val, task.verbalizer);
    metric = make_validation_metric(loaded.tokenizer, task, std::move(val), {g.threads, a.max_len, g.seed});
  }

  std::vector<NullInput> inputs(corpus.entries().begin(), corpus.entries().end());
  if (cfg.stopping == StoppingMode::OneBatch && !a.no_top_n && corpus.all_scored() &&
      corpus.size() >= cfg.batch_size) {
    inputs = select_top_n(corpus, cfg.batch_size);
  }
  const auto result = calibrate(loaded.model, loaded.tokenizer, task, inputs, cfg, metric);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << '\n';

  ArtifactIndex index(g, "calibrate", sub);
  write_calibration_run(index.path("calibration"), cfg, result, inputs);
  index.add("calibration/manifest.json", "calibration-manifest");
  index.add("calibration/one_batch", "snapshot");
  if (result.snapshot_val) index.add("calibration/val", "snapshot");
  index.save();
  for (std::size_t b = 0; b < result.loss_trace.size(); ++b) {
    std::cout << "batch " << b + 1 << " loss " << fmt(result.loss_trace[b]);
    if (b < result.validation_trace.size()) std::cout << " val " << fmt(result.validation_trace[b]);
    std::cout << '\n';
  }
  std::cout << "stopped: " << stop_reason_name(result.stop_reason) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string model, template_file, test, snapshot = "none", mode = "zero-shot", baseline = "none", train_pool,
                                      ft_roles = "all";
  std::vector<std::string> domains{std::string(kDefaultDomainString)};
  std::vector<std::uint64_t> seeds;
  std::size_t k = 16, max_test = 0, epochs = 20, ft_batch_size = 8, max_len = 0;
  double ft_lr = 1e-5;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  app.add_option("--model", a.model, "Model directory")->required()->check(CLI::ExistingDirectory);
  app.add_option("--template", a.template_file, "Template/verbalizer JSON")->required()->check(CLI::ExistingFile);
  app.add_option("--test", a.test, "Labelled test JSONL")->required()->check(CLI::ExistingFile);
  app.add_option("--snapshot", a.snapshot, "Calibration snapshot directory, or none")->capture_default_str();
  app.add_option("--mode", a.mode, "Evaluation method")
      ->check(CLI::IsMember({"zero-shot", "icl-demo", "prompt-ft", "prompt-ft-demo"}))
      ->capture_default_str();
  app.add_option("--baseline", a.baseline, "Output-side baseline")
      ->check(CLI::IsMember({"none", "outcal"}))
      ->capture_default_str();
  app.add_option("--domain", a.domains, "Domain strings for OutCal")->capture_default_str();
  app.add_option("--train-pool", a.train_pool, "Labelled JSONL for K-shot train/val sampling")
      ->check(CLI::ExistingFile);
  app.add_option("--k", a.k, "Examples per class in K-shot splits")->capture_default_str();
  app.add_option("--seeds", a.seeds, "Data seeds (default: the run seed)");
  app.add_option("--max-test", a.max_test, "Seeded test subsample size (0 = all)")->capture_default_str();
  app.add_option("--ft-lr", a.ft_lr, "Prompt fine-tuning learning rate")->capture_default_str();
  app.add_option("--epochs", a.epochs, "Prompt fine-tuning epochs")->capture_default_str();
  app.add_option("--ft-batch-size", a.ft_batch_size, "Prompt fine-tuning batch size")->capture_default_str();
  app.add_option("--ft-roles", a.ft_roles, "Parameters updated by prompt fine-tuning")
      ->check(CLI::IsMember({"all", "bias"}))
      ->capture_default_str();
  app.add_option("--max-len", a.max_len, "Token limit per prompt (0 = model limit)")->capture_default_str();
}

int run_eval(const Globals& g, const EvalArgs& a, const CLI::App* sub) {
  const LoadedModel loaded = load_model_with_snapshot(a.model, a.snapshot);
  const TaskPrompt task = load_task_prompt(a.template_file);
  resolve_label_tokens(task.prompt, task.verbalizer, loaded.tokenizer);
  auto test = subsample(load_dataset(a.test, Split::Test, "test"), a.max_test, g.seed);
  check_labels(test, task.verbalizer);
  const bool needs_pool = a.mode != "zero-shot";
  std::optional<LabeledDataset> pool;
  if (needs_pool) {
    if (a.train_pool.empty()) throw ConfigError("--mode " + a.mode + " needs --train-pool");
    pool = load_dataset(a.train_pool, Split::Train, "train");
  }
  const bool outcal = a.baseline == "outcal";
  if (outcal && a.domains.empty()) throw ConfigError("--baseline outcal needs at least one --domain");
  const auto seeds = a.seeds.empty() ? std::vector<std::uint64_t>{g.seed} : a.seeds;

  std::vector<RunMetrics> runs;
  for (const auto seed : seeds) {
    const EvalOptions options{g.threads, a.max_len, seed};
    DemonstrationSet demos;
    std::optional<KShotSplit> split;
    if (pool) {
      split = sample_k_shot(*pool, task.verbalizer, a.k, seed);
      if (a.mode == "icl-demo" || a.mode == "prompt-ft-demo") demos = sample_demos(split->train, task.verbalizer, seed);
    }
    MaskedLM model = loaded.model;
    if (a.mode == "prompt-ft" || a.mode == "prompt-ft-demo") {
      PromptFTConfig ft;
      ft.lr = a.ft_lr;
      ft.epochs = a.epochs;
      ft.batch_size = a.ft_batch_size;
      ft.roles = a.ft_roles == "bias" ? RoleSet{Role::Bias} : RoleSet::all();
      ft.seed = seed;
      ft.demos = demos;
      prompt_ft(model, loaded.tokenizer, task, split->train, split->val, ft, options);
    }
    RunMetrics m = outcal ? outcal_eval(model, loaded.tokenizer, task, a.domains, test, demos, options)
                          : icl_with_demo_eval(model, loaded.tokenizer, task, demos, test, options);
    std::cout << "seed " << seed << " accuracy " << fmt(m.accuracy) << " weighted_f1 " << fmt(m.weighted_f1);
    if (m.excluded) std::cout << " excluded " << m.excluded;
    std::cout << '\n';
    runs.push_back(std::move(m));
  }
  const auto report = seed_aggregate(runs, task.verbalizer.labels);
  ArtifactIndex index(g, "eval", sub);
  index.write_text("report.json", report.to_json().dump(2) + "\n", "metrics-report");
  index.write_text("report.csv", report.to_csv(), "metrics-csv");
  index.save();
  std::cout << "mean accuracy " << fmt(report.mean_accuracy) << " (std " << fmt(report.std_accuracy)
            << "), mean weighted_f1 " << fmt(report.mean_weighted_f1) << " (std " << fmt(report.std_weighted_f1)
            << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct FilterArgs {
  std::string corpus, scores;
  double retain = 0.8;
  std::size_t top_n = 0;
  bool keep_all = false;
};

void add_filter(CLI::App& app, FilterArgs& a) {
  app.add_option("--corpus", a.corpus, "Null-input JSONL")->required()->check(CLI::ExistingFile);
  app.add_option("--scores", a.scores, "Score JSONL {id, score}; otherwise the corpus nsp_score is used")
      ->check(CLI::ExistingFile);
  app.add_option("--retain", a.retain, "Fraction of highest-scored inputs kept")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  app.add_option("--top-n", a.top_n, "Also write the N highest-scored inputs (0 = skip)")->capture_default_str();
  app.add_flag("--keep-all", a.keep_all, "Skip fraction filtering (aspect-level tasks)");
}

int run_filter(const Globals& g, const FilterArgs& a, const CLI::App* sub) {
  NullCorpus corpus = ingest(a.corpus);
  if (!a.scores.empty()) corpus = score_nsp(corpus, FileScorer(a.scores), "");
  if (!a.keep_all && !corpus.all_scored()) throw ConfigError("every null input needs a score; pass --scores");
  if (!(a.retain > 0.0)) throw ConfigError("--retain must be in (0, 1]");
  const NullCorpus kept = a.keep_all ? corpus : filter_top_fraction(corpus, a.retain);
  ArtifactIndex index(g, "filter-null", sub);
  write_corpus(index.path("filtered.jsonl"), kept);
  index.add("filtered.jsonl", "null-corpus");
  if (a.top_n > 0) {
    NullCorpus top;
    for (auto& e : select_top_n(kept, a.top_n)) top.add(e.text, e.source, e.nsp_score);
    write_corpus(index.path("top_n.jsonl"), top);
    index.add("top_n.jsonl", "null-corpus");
  }
  index.save();
  std::cout << "kept " << kept.size() << " of " << corpus.size() << " null inputs\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct ScoreArgs {
  std::string corpus, scores, toy_model, template_file, answer_format;
};

void add_score(CLI::App& app, ScoreArgs& a) {
  app.add_option("--corpus", a.corpus, "Null-input JSONL")->required()->check(CLI::ExistingFile);
  auto* file = app.add_option("--scores", a.scores, "Score JSONL {id, score}")->check(CLI::ExistingFile);
  auto* toy = app.add_option("--toy-model", a.toy_model, "Score with a next-sentence head on this model")
                  ->check(CLI::ExistingDirectory);
  file->excludes(toy);
  app.add_option("--template", a.template_file, "Template whose answer format is paired with each input")
      ->check(CLI::ExistingFile);
  app.add_option("--answer-format", a.answer_format, "Answer format (overrides --template)");
}

int run_score(const Globals& g, const ScoreArgs& a, const CLI::App* sub) {
  const NullCorpus corpus = ingest(a.corpus);
  std::string answer = a.answer_format;
  if (answer.empty() && !a.template_file.empty()) answer = load_task_prompt(a.template_file).prompt.answer_format;
  NullCorpus scored;
  if (!a.scores.empty()) {
    scored = score_nsp(corpus, FileScorer(a.scores), answer);
  } else if (!a.toy_model.empty()) {
    if (answer.empty()) throw ConfigError("the toy scorer needs --template or --answer-format");
    const LoadedModel loaded = load_model(a.toy_model);
    scored = score_nsp(corpus, ToyNspScorer(loaded.model, loaded.tokenizer, derive_seed(g.seed, "nsp")), answer);
  } else {
    throw ConfigError("pass --scores or --toy-model");
  }
  ArtifactIndex index(g, "score-nsp", sub);
  write_corpus(index.path("scored.jsonl"), scored);
  index.add("scored.jsonl", "null-corpus");
  index.save();
  std::cout << "scored " << scored.size() << " null inputs\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::size_t target = 1000, per_round = 500, max_rounds = 10;
  std::string instruction{kDefaultNullInstruction};
  bool offline = false;
};

void add_gen(CLI::App& app, GenArgs& a) {
  app.add_option("--target", a.target, "Distinct null inputs to collect")->capture_default_str();
  app.add_option("--per-round", a.per_round, "Inputs requested per round")->capture_default_str();
  app.add_option("--max-rounds", a.max_rounds, "Rounds before giving up")->capture_default_str();
  app.add_option("--instruction", a.instruction, "Generation instruction; <Number> becomes --per-round")
      ->capture_default_str();
  app.add_flag("--offline", a.offline, "Use the built-in catalog even if an endpoint is configured");
}

int run_gen(const Globals& g, const GenArgs& a, const CLI::App* sub) {
  std::unique_ptr<GenerationClient> client;
  std::string source = "catalog";
  if (!a.offline) {
    if (auto http = HttpGenerationClient::from_environment()) {
      client = std::make_unique<HttpGenerationClient>(std::move(*http));
      source = "endpoint";
    }
  }
  if (!client) client = std::make_unique<CatalogClient>(builtin_null_catalog(), derive_seed(g.seed, "catalog"));
  ArtifactIndex index(g, "gen-null", sub);
  try {
    const NullCorpus corpus = acquire_to_target(*client, a.instruction, a.per_round, a.target, a.max_rounds);
    write_corpus(index.path("nulls.jsonl"), corpus);
    index.add("nulls.jsonl", "null-corpus");
    index.save();
    std::cout << "collected " << corpus.size() << " null inputs from " << source << " in " << corpus.meta.iterations
              << " rounds\n";
    return 0;
  } catch (const PartialCorpusError& e) {
    write_corpus(index.path("nulls.partial.jsonl"), e.partial());
    index.add("nulls.partial.jsonl", "null-corpus-partial");
    index.save();
    throw;
  }
}

// ---------------------------------------------------------------------------

struct PplArgs {
  std::string model, input, snapshot = "none", sample = "first";
  std::size_t max_texts = 0;
};

void add_ppl(CLI::App& app, PplArgs& a) {
  app.add_option("--model", a.model, "Model directory")->required()->check(CLI::ExistingDirectory);
  app.add_option("--input", a.input, "Text file, one text per line")->required()->check(CLI::ExistingFile);
  app.add_option("--snapshot", a.snapshot, "Snapshot directory, or none")->capture_default_str();
  app.add_option("--max-texts", a.max_texts, "Score only N texts (0 = all)")->capture_default_str();
  app.add_option("--sample", a.sample, "Which N texts: the first N, or a seeded random N")
      ->check(CLI::IsMember({"first", "random"}))
      ->capture_default_str();
}

int run_ppl(const Globals& g, const PplArgs& a, const CLI::App* sub) {
  const auto all_texts = read_lines(a.input);
  if (all_texts.empty()) throw ConfigError(a.input + " holds no text");
  std::vector<std::size_t> lines(all_texts.size());
  for (std::size_t i = 0; i < lines.size(); ++i) lines[i] = i;
  if (a.max_texts && lines.size() > a.max_texts) {
    if (a.sample == "random") {
      Rng rng(derive_seed(g.seed, "ppl-sample"));
      rng.shuffle(std::span<std::size_t>(lines));
      lines.resize(a.max_texts);
      std::sort(lines.begin(), lines.end());
    } else {
      lines.resize(a.max_texts);
    }
  }
  std::vector<std::string> texts;
  for (auto i : lines) texts.push_back(all_texts[i]);
  const LoadedModel loaded = load_model_with_snapshot(a.model, a.snapshot);
  std::vector<PseudoLogLikelihood> scores(texts.size());
  std::vector<std::string> errors(texts.size());
  parallel_for(texts.size(), g.threads, [&](std::size_t i) {
    try {
      scores[i] = pseudo_perplexity(loaded.model, loaded.tokenizer, texts[i]);
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  std::ostringstream csv;
  csv.precision(10);
  csv << "line,num_tokens,pseudo_perplexity\n";
  double total_log = 0.0, mean_ppl = 0.0;
  std::size_t total_tokens = 0, scored = 0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (!errors[i].empty()) {
      std::cerr << "text " << lines[i] + 1 << ": " << errors[i] << '\n';
      continue;
    }
    const double ppl = scores[i].pseudo_perplexity();
    csv << lines[i] + 1 << ',' << scores[i].num_tokens << ',' << ppl << '\n';
    total_log += scores[i].log_prob;
    total_tokens += scores[i].num_tokens;
    mean_ppl += ppl;
    ++scored;
  }
  if (scored == 0) throw ConfigError("no text in " + a.input + " could be scored");
  const json summary{{"texts", scored},
                     {"tokens", total_tokens},
                     {"mean_pseudo_perplexity", mean_ppl / static_cast<double>(scored)},
                     {"corpus_pseudo_perplexity", std::exp(-total_log / static_cast<double>(total_tokens))}};
  ArtifactIndex index(g, "ppl", sub);
  index.write_text("ppl.csv", csv.str(), "pseudo-perplexity");
  index.write_text("ppl.json", summary.dump(2) + "\n", "pseudo-perplexity-summary");
  index.save();
  std::cout << "mean pseudo-perplexity " << fmt(summary["mean_pseudo_perplexity"].get<double>())
            << ", corpus pseudo-perplexity " << fmt(summary["corpus_pseudo_perplexity"].get<double>()) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct SweepArgs {
  std::string model, template_file, corpus, test, mode = "bias-only";
  std::vector<double> lrs{1e-4, 1e-3, 1e-2};
  std::size_t batch_size = 32, batches = 10, max_test = 0;
};

void add_sweep(CLI::App& app, SweepArgs& a) {
  app.add_option("--model", a.model, "Model directory")->required()->check(CLI::ExistingDirectory);
  app.add_option("--template", a.template_file, "Template/verbalizer JSON")->required()->check(CLI::ExistingFile);
  app.add_option("--corpus", a.corpus, "Null-input JSONL")->required()->check(CLI::ExistingFile);
  app.add_option("--test", a.test, "Labelled JSONL scored after every batch")->required()->check(CLI::ExistingFile);
  app.add_option("--mode", a.mode, "Parameters to update")
      ->check(CLI::IsMember({"bias-only", "full"}))
      ->capture_default_str();
  app.add_option("--lrs", a.lrs, "Learning-rate grid")->capture_default_str();
  app.add_option("--batch-size", a.batch_size, "Null prompts per batch")->capture_default_str();
  app.add_option("--batches", a.batches, "Calibration batches per learning rate")->capture_default_str();
  app.add_option("--max-test", a.max_test, "Seeded test subsample size (0 = all)")->capture_default_str();
}

int run_sweep(const Globals& g, const SweepArgs& a, const CLI::App* sub) {
  const LoadedModel loaded = load_model(a.model);
  const TaskPrompt task = load_task_prompt(a.template_file);
  const NullCorpus corpus = ingest(a.corpus);
  const auto test = subsample(load_dataset(a.test, Split::Test, "test"), a.max_test, g.seed);
  check_labels(test, task.verbalizer);
  const EvalOptions options{g.threads, 0, g.seed};
  const auto base = zero_shot_eval(loaded.model, loaded.tokenizer, task, test, options);

  std::ostringstream csv;
  csv.precision(10);
  csv << "lr,batch,loss,accuracy,weighted_f1\n";
  for (double lr : a.lrs) {
    csv << lr << ",0,," << base.accuracy << ',' << base.weighted_f1 << '\n';
    MaskedLM model = loaded.model;
    CalibrationConfig cfg;
    cfg.lr = lr;
    cfg.batch_size = a.batch_size;
    cfg.update_mode = parse_update_mode(a.mode);
    cfg.stopping = StoppingMode::ValidationBased;
    cfg.patience = a.batches;
    cfg.max_batches = a.batches;
    cfg.seed = g.seed;
    // The trace is a diagnostic: test metrics are recorded after each batch
    // but never used to stop.
    std::vector<RunMetrics> trace;
    const ValidationMetric record = [&](const MaskedLM& m) {
      trace.push_back(zero_shot_eval(m, loaded.tokenizer, task, test, options));
      return 0.0;
    };
    const auto result = calibrate(model, loaded.tokenizer, task, corpus.entries(), cfg, record);
    for (std::size_t b = 0; b < trace.size(); ++b) {
      csv << lr << ',' << b + 1 << ',' << result.loss_trace[b] << ',' << trace[b].accuracy << ','
          << trace[b].weighted_f1 << '\n';
    }
  }
  ArtifactIndex index(g, "sweep", sub);
  index.write_text("sweep.csv", csv.str(), "sweep-trace");
  index.save();
  std::cout << csv.str();
  return 0;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> inputs;
};

void add_report(CLI::App& app, ReportArgs& a) {
  app.add_option("inputs", a.inputs, "NAME:PATH pairs of report.json or calibration manifest.json files")
      ->required();
}

int run_report(const Globals& g, const ReportArgs& a, const CLI::App* sub) {
  std::ostringstream metrics, losses;
  metrics.precision(10);
  losses.precision(10);
  metrics << "name,runs,mean_accuracy,std_accuracy,mean_weighted_f1,std_weighted_f1\n";
  losses << "name,batch,loss,validation\n";
  bool any_metrics = false, any_losses = false;
  for (const auto& item : a.inputs) {
    const auto [name, path] = split_named(item, "report input");
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError(path + ": " + e.what());
    }
    if (j.contains("mean_accuracy")) {
      any_metrics = true;
      metrics << name << ',' << j["runs"].size() << ',' << j["mean_accuracy"].get<double>() << ','
              << j["std_accuracy"].get<double>() << ',' << j["mean_weighted_f1"].get<double>() << ','
              << j["std_weighted_f1"].get<double>() << '\n';
    } else if (j.contains("loss_trace")) {
      any_losses = true;
      const auto loss = j["loss_trace"].get<std::vector<double>>();
      const auto val = j["validation_trace"].get<std::vector<double>>();
      for (std::size_t b = 0; b < loss.size(); ++b) {
        losses << name << ',' << b + 1 << ',' << loss[b] << ',';
        if (b < val.size()) losses << val[b];
        losses << '\n';
      }
    } else {
      throw ConfigError(path + " is neither a metrics report nor a calibration manifest");
    }
  }
  ArtifactIndex index(g, "report", sub);
  if (any_metrics) index.write_text("metrics.csv", metrics.str(), "merged-metrics");
  if (any_losses) index.write_text("loss_traces.csv", losses.str(), "merged-loss-traces");
  index.save();
  if (any_metrics) std::cout << metrics.str();
  return 0;
}

// ---------------------------------------------------------------------------

struct CrossTaskArgs {
  std::string model;
  std::vector<std::string> tasks, snapshots;
  std::size_t max_test = 0;
};

void add_cross_task(CLI::App& app, CrossTaskArgs& a) {
  app.add_option("--model", a.model, "Uncalibrated model directory")->required()->check(CLI::ExistingDirectory);
  app.add_option("--task", a.tasks, "NAME:TEMPLATE_JSON:TEST_JSONL, repeatable")->required();
  app.add_option("--snapshot", a.snapshots, "NAME:SNAPSHOT_DIR, one per task, repeatable")->required();
  app.add_option("--max-test", a.max_test, "Seeded test subsample size (0 = all)")->capture_default_str();
}

int run_cross_task(const Globals& g, const CrossTaskArgs& a, const CLI::App* sub) {
  const LoadedModel loaded = load_model(a.model);
  std::vector<TaskEval> tasks;
  for (const auto& spec : a.tasks) {
    const auto [name, rest] = split_named(spec, "--task");
    const auto [template_file, test_file] = split_named(rest, "--task");
    if (!fs::exists(template_file)) throw ConfigError("no such template file: " + template_file);
    if (!fs::exists(test_file)) throw ConfigError("no such test file: " + test_file);
    TaskEval t{name, load_task_prompt(template_file), subsample(load_dataset(test_file, Split::Test, name), a.max_test, g.seed)};
    check_labels(t.test, t.task.verbalizer);
    tasks.push_back(std::move(t));
  }
  std::vector<std::string> names;
  std::vector<ParameterSnapshot> snapshots;
  for (const auto& spec : a.snapshots) {
    const auto [name, dir] = split_named(spec, "--snapshot");
    if (!fs::is_directory(dir)) throw ConfigError("no such snapshot directory: " + dir);
    names.push_back(name);
    snapshots.push_back(load_snapshot(dir));
  }
  const auto matrix = cross_task_matrix(loaded.model, loaded.tokenizer, tasks, names, snapshots,
                                        {g.threads, 0, g.seed});
  ArtifactIndex index(g, "cross-task", sub);
  index.write_text("cross_task.csv", matrix.to_csv(), "cross-task-matrix");
  index.save();
  std::cout << matrix.to_csv();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Null-input prompting calibration for masked language models"};
  app.config_formatter(std::make_shared<cli::JsonConfig>());
  app.set_config("--config", "", "JSON config file (flags override it)");
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Run seed; every random choice derives from it")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads for evaluation fan-out (0 = all cores)")
      ->capture_default_str();
  app.add_option("--output-dir", g.output_dir, "Directory for artifacts and index.json")->capture_default_str();

  InitModelArgs init_args;
  SynthArgs synth_args;
  CalibrateArgs cal_args;
  EvalArgs eval_args;
  FilterArgs filter_args;
  ScoreArgs score_args;
  GenArgs gen_args;
  PplArgs ppl_args;
  SweepArgs sweep_args;
  ReportArgs report_args;
  CrossTaskArgs cross_args;

  auto* init = app.add_subcommand("init-model", "Write a randomly initialized model directory");
  add_init_model(*init, init_args);
  auto* synth = app.add_subcommand("synth-fixture", "Write the synthetic biased-sentiment fixture");
  add_synth(*synth, synth_args);
  auto* cal = app.add_subcommand("calibrate", "Calibrate a model on null-input prompts");
  add_calibrate(*cal, cal_args);
  auto* ev = app.add_subcommand("eval", "Evaluate a model on a labelled test set");
  add_eval(*ev, eval_args);
  auto* filt = app.add_subcommand("filter-null", "Keep the highest NSP-scored null inputs");
  add_filter(*filt, filter_args);
  auto* score = app.add_subcommand("score-nsp", "Attach NSP scores to null inputs");
  add_score(*score, score_args);
  auto* gen = app.add_subcommand("gen-null", "Collect distinct null inputs from a generator");
  add_gen(*gen, gen_args);
  auto* ppl = app.add_subcommand("ppl", "Pseudo-perplexity of texts");
  add_ppl(*ppl, ppl_args);
  auto* sweep = app.add_subcommand("sweep", "Per-batch test metrics across a learning-rate grid");
  add_sweep(*sweep, sweep_args);
  auto* report = app.add_subcommand("report", "Merge reports and calibration traces into CSV");
  add_report(*report, report_args);
  auto* cross = app.add_subcommand("cross-task", "Accuracy deltas of every task under every task's snapshot");
  add_cross_task(*cross, cross_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*init) return run_init_model(g, init_args, init);
    if (*synth) return run_synth(g, synth_args, synth);
    if (*cal) return run_calibrate(g, cal_args, cal);
    if (*ev) return run_eval(g, eval_args, ev);
    if (*filt) return run_filter(g, filter_args, filt);
    if (*score) return run_score(g, score_args, score);
    if (*gen) return run_gen(g, gen_args, gen);
    if (*ppl) return run_ppl(g, ppl_args, ppl);
    if (*sweep) return run_sweep(g, sweep_args, sweep);
    if (*report) return run_report(g, report_args, report);
    if (*cross) return run_cross_task(g, cross_args, cross);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

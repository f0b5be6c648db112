#include "nullcal/synthetic.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "nullcal/rng.hpp"

namespace nullcal {
namespace {

const std::vector<std::string> kPositive = {"good", "fine", "happy", "nice", "lovely", "superb", "fun", "brilliant"};
const std::vector<std::string> kNegative = {"bad", "awful", "sad", "boring", "dull", "poor", "ugly", "weak"};
const std::vector<std::string> kFiller = {"a",    "film",  "it",   "is",    "this",  "story", "plot",
                                          "and",  "with",  "actor", "scene", "really", "very", "quite",
                                          "some", "words", "text", "just",  "an",    "example", "sentence",
                                          "message", "without", "purpose", "nothing", "here", "of", "that"};
const std::vector<std::string> kTemplateWords = {"the", "movie", "was", "great", "terrible", "."};

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out + " .";
}

// Filler words plus, for labelled sentences, more words of the label's
// polarity than of the opposite one.
std::vector<std::string> make_words(Rng& rng, bool labelled) {
  std::vector<std::string> words;
  const std::size_t fillers = 2 + rng.below(4);
  for (std::size_t i = 0; i < fillers; ++i) words.push_back(kFiller[rng.below(kFiller.size())]);
  if (labelled) {
    const std::size_t hits = 1 + rng.below(3);
    const std::size_t against = rng.below(hits);
    for (std::size_t i = 0; i < hits; ++i) words.push_back(kNegative[rng.below(kNegative.size())]);
    for (std::size_t i = 0; i < against; ++i) words.push_back(kPositive[rng.below(kPositive.size())]);
  }
  rng.shuffle(std::span<std::string>(words));
  return words;
}

// Swaps every polarity word for its counterpart.
std::vector<std::string> mirror(std::vector<std::string> words) {
  for (auto& w : words) {
    if (auto it = std::find(kNegative.begin(), kNegative.end(), w); it != kNegative.end()) {
      w = kPositive[static_cast<std::size_t>(it - kNegative.begin())];
    } else if (auto jt = std::find(kPositive.begin(), kPositive.end(), w); jt != kPositive.end()) {
      w = kNegative[static_cast<std::size_t>(jt - kPositive.begin())];
    }
  }
  return words;
}

// Every negative example is paired with its mirrored positive example.
LabeledDataset make_split(Rng& rng, std::size_t per_class, Split split) {
  LabeledDataset data{{}, split, "synthetic-sentiment"};
  for (std::size_t i = 0; i < per_class; ++i) {
    const auto words = make_words(rng, true);
    data.examples.push_back({join(words), std::nullopt, "negative"});
    data.examples.push_back({join(mirror(words)), std::nullopt, "positive"});
  }
  return data;
}

}  // namespace

Vocab synthetic_vocab() {
  std::vector<std::string> tokens = {"<mask>", "<s>", "</s>", "<pad>", "<unk>"};
  for (const auto* list : {&kTemplateWords, &kPositive, &kNegative, &kFiller})
    for (const auto& w : *list)
      if (std::find(tokens.begin(), tokens.end(), w) == tokens.end()) tokens.push_back(w);
  return Vocab(std::move(tokens));
}

SyntheticTask make_synthetic_task(const SyntheticOptions& options) {
  Vocab vocab = synthetic_vocab();
  ModelConfig config;
  config.vocab_size = static_cast<std::int64_t>(vocab.size());
  config.max_seq_len = 32;
  config.mask_token_id = 0;
  config.cls_token_id = 1;
  config.sep_token_id = 2;
  config.pad_token_id = 3;
  config.unk_token_id = 4;
  config.do_lower_case = true;
  Tokenizer tokenizer(vocab, config.specials(), true);

  TaskPrompt task;
  task.prompt = {"{sentence} The movie was <mask>.", "The movie was <mask>."};
  task.verbalizer = {{"negative", "positive"}, {"terrible", "great"}};

  Rng rng(derive_seed(options.seed, "synthetic-data"));
  SyntheticTask out{vocab, tokenizer, task, make_split(rng, options.train_per_class, Split::Train),
                    make_split(rng, options.val_per_class, Split::Val),
                    make_split(rng, options.test_per_class, Split::Test), NullCorpus{}, {}, config};
  while (out.nulls.size() < options.null_count) out.nulls.add(join(make_words(rng, false)), NullSource::Generated);
  std::set<std::string> null_texts;
  for (const auto& e : out.nulls.entries()) null_texts.insert(e.text);
  while (out.neutral.size() < options.neutral_count) {
    auto text = join(make_words(rng, false));
    if (!null_texts.count(text)) out.neutral.push_back(std::move(text));
  }
  return out;
}

TrainedSynthetic train_synthetic_model(const SyntheticTask& data, const SyntheticTraining& training) {
  TrainedSynthetic out{MaskedLM::random(data.config, derive_seed(training.seed, "synthetic-init")), 0, 0.0};
  const auto labels = resolve_label_tokens(data.task.prompt, data.task.verbalizer, data.tokenizer);
  const auto max_len = static_cast<std::size_t>(data.config.max_seq_len);
  std::vector<std::vector<TokenId>> prompts;
  std::vector<std::int32_t> targets;
  for (const auto& ex : data.train.examples) {
    prompts.push_back(render_prompt(data.task.prompt, data.tokenizer, ex.text, std::nullopt, max_len));
    targets.push_back(static_cast<std::int32_t>(*data.task.verbalizer.index_of(ex.label)));
  }
  // Filler-only sentences appear once under each label, so the best the model
  // can do on them is a uniform prediction.
  for (const auto& text : data.neutral) {
    const auto ids = render_prompt(data.task.prompt, data.tokenizer, text, std::nullopt, max_len);
    for (std::int32_t label = 0; label < 2; ++label) {
      prompts.push_back(ids);
      targets.push_back(label);
    }
  }
  Rng rng(derive_seed(training.seed, "synthetic-train"));
  std::vector<std::size_t> order(prompts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= training.max_epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t begin = 0; begin < order.size(); begin += training.batch_size) {
      std::vector<std::vector<TokenId>> batch;
      std::vector<std::int32_t> batch_targets;
      for (std::size_t i = begin; i < std::min(order.size(), begin + training.batch_size); ++i) {
        batch.push_back(prompts[order[i]]);
        batch_targets.push_back(targets[order[i]]);
      }
      Tape tape(RoleSet::all());
      Var loss = prompt_ft_loss(out.model, tape, std::span<const std::vector<TokenId>>(batch), labels, batch_targets);
      tape.backward(loss);
      sgd_step(out.model.parameters(), training.lr, RoleSet::all());
    }
    out.epochs = epoch;
    out.train_accuracy = zero_shot_eval(out.model, data.tokenizer, data.task, data.train).accuracy;
    if (out.train_accuracy == 1.0) break;
  }
  return out;
}

void inject_label_bias(MaskedLM& model, TokenId token, double delta) {
  auto& bias = model.parameter("lm_head.bias").value();
  if (token < 0 || static_cast<std::size_t>(token) >= bias.numel()) {
    throw ContractError("label token " + std::to_string(token) + " outside the LM head");
  }
  bias[static_cast<std::size_t>(token)] += static_cast<float>(delta);
}

}  // namespace nullcal

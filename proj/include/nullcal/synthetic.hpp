#pragma once

// A small two-label sentiment task with known ground truth, used to exercise
// bias injection and calibration end to end without pretrained weights.
//
// Sentences mix filler words with polarity words; the label is the majority
// polarity. Every example has a mirrored twin with polarity words swapped, so
// the task is symmetric between the labels. Null inputs are filler-only.

#include <cstdint>
#include <string>
#include <vector>

#include "nullcal/eval.hpp"
#include "nullcal/masked_lm.hpp"
#include "nullcal/null_corpus.hpp"
#include "nullcal/prompting.hpp"
#include "nullcal/tokenizer.hpp"

namespace nullcal {

struct SyntheticTask {
  Vocab vocab;
  Tokenizer tokenizer;
  TaskPrompt task;
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
  NullCorpus nulls;
  // Filler-only sentences, disjoint from the null corpus, shown during
  // training under both labels.
  std::vector<std::string> neutral;
  ModelConfig config;
};

struct SyntheticOptions {
  std::size_t train_per_class = 64;
  std::size_t val_per_class = 16;
  std::size_t test_per_class = 100;
  std::size_t null_count = 64;
  std::size_t neutral_count = 32;
  std::uint64_t seed = 0;
};

// Special tokens first (<mask>, <s>, </s>, <pad>, <unk>), then words.
Vocab synthetic_vocab();
SyntheticTask make_synthetic_task(const SyntheticOptions& options = {});

struct SyntheticTraining {
  double lr = 0.3;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 300;
  std::uint64_t seed = 0;
};

struct TrainedSynthetic {
  MaskedLM model;
  std::size_t epochs = 0;
  double train_accuracy = 0.0;
};

// Random init followed by full-parameter prompt fine-tuning on the train
// split plus the neutral sentences, stopping at the first epoch that reaches
// 100% accuracy on the train split.
TrainedSynthetic train_synthetic_model(const SyntheticTask& data, const SyntheticTraining& training = {});

// lm_head.bias[token] += delta.
void inject_label_bias(MaskedLM& model, TokenId token, double delta);

}  // namespace nullcal

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nullcal/autograd.hpp"
#include "nullcal/distribution.hpp"
#include "nullcal/model_config.hpp"
#include "nullcal/tokenizer.hpp"

namespace nullcal {

// Post-LN transformer encoder with learned absolute positions and a linear
// LM head: logits = W_lm_head . h + b_lm_head.
//
// Padding: key positions holding pad_token_id are excluded from attention,
// so pad tokens appended after a sequence never change other positions.
template <typename T>
class BasicMaskedLM {
 public:
  using ParameterT = BasicParameter<T>;
  using TapeT = BasicTape<T>;

  // Weights zero, LayerNorm gains one.
  explicit BasicMaskedLM(ModelConfig config);
  // Weights and embeddings ~ N(0, stddev^2); biases zero; LayerNorm gains one.
  static BasicMaskedLM random(ModelConfig config, std::uint64_t seed, double stddev = 0.02);

  BasicMaskedLM(const BasicMaskedLM&) = default;
  BasicMaskedLM& operator=(const BasicMaskedLM&) = default;
  BasicMaskedLM(BasicMaskedLM&&) noexcept = default;
  BasicMaskedLM& operator=(BasicMaskedLM&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  std::span<ParameterT> parameters() { return params_; }
  std::span<const ParameterT> parameters() const { return params_; }
  ParameterT* find(std::string_view name);
  const ParameterT* find(std::string_view name) const;
  ParameterT& parameter(std::string_view name);
  const ParameterT& parameter(std::string_view name) const;
  // The matrix multiplying h_<mask>; the word embeddings when tied.
  const ParameterT& lm_head_weight() const;

  template <typename U>
  BasicMaskedLM<U> cast() const {
    BasicMaskedLM<U> out(config_);
    for (std::size_t i = 0; i < params_.size(); ++i) out.parameters()[i].value() = params_[i].value().template cast<U>();
    return out;
  }

  // Final-layer hidden states, shape [len(ids), d_model]. The non-const
  // overloads bind parameters for gradient accumulation (subject to the
  // tape's role set); the const overloads bind them as constants.
  Var encode(TapeT& tape, std::span<const TokenId> ids);
  Var encode(TapeT& tape, std::span<const TokenId> ids) const;

  // Full-vocabulary logits at the single mask position, shape [1, vocab].
  Var mask_logits(TapeT& tape, std::span<const TokenId> ids);
  Var mask_logits(TapeT& tape, std::span<const TokenId> ids) const;

  // Softmax restricted to the label-word logits, shape [1, |Y|].
  Var label_probs(TapeT& tape, std::span<const TokenId> ids, std::span<const TokenId> label_tokens);
  Var label_probs(TapeT& tape, std::span<const TokenId> ids, std::span<const TokenId> label_tokens) const;

  // Position of the single mask token; throws ContractError otherwise.
  std::size_t mask_position(std::span<const TokenId> ids) const;

 private:
  template <typename Self>
  static Var encode_impl(Self& self, TapeT& tape, std::span<const TokenId> ids);
  template <typename Self>
  static Var mask_logits_impl(Self& self, TapeT& tape, std::span<const TokenId> ids);

  void check_sequence(std::span<const TokenId> ids) const;

  ModelConfig config_;
  std::vector<ParameterT> params_;
};

using MaskedLM = BasicMaskedLM<float>;

extern template class BasicMaskedLM<float>;
extern template class BasicMaskedLM<double>;

// Throws ConfigError on duplicate or out-of-range label tokens.
void check_label_tokens(std::span<const TokenId> label_tokens, std::int64_t vocab_size);

std::vector<float> mask_logits(const MaskedLM& model, std::span<const TokenId> ids);
ClassDistribution label_probs(const MaskedLM& model, std::span<const TokenId> ids,
                              std::span<const TokenId> label_tokens);

struct PseudoLogLikelihood {
  double log_prob = 0.0;  // sum over scored tokens, natural log
  std::size_t num_tokens = 0;
  double pseudo_perplexity() const;
};

// Masks each position of `ids` in turn (full-vocab softmax at the mask) and
// sums log P(original token). `ids` is scored as given: no special tokens
// are added.
template <typename T>
PseudoLogLikelihood pseudo_log_likelihood(const BasicMaskedLM<T>& model, std::span<const TokenId> ids,
                                          std::span<const std::size_t> scored_positions);

// Tokenizes `text`, wraps it as <s> text </s> and scores every text token.
// Throws ContractError when the text produces no tokens.
PseudoLogLikelihood pseudo_perplexity(const MaskedLM& model, const Tokenizer& tokenizer, std::string_view text);

}  // namespace nullcal

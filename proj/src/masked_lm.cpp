#include "nullcal/masked_lm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "nullcal/rng.hpp"

namespace nullcal {
namespace {

// Offsets into the parameter_layout() order.
constexpr std::size_t kWordEmb = 0;
constexpr std::size_t kPosEmb = 1;
constexpr std::size_t kEmbLnGain = 2;
constexpr std::size_t kEmbLnBias = 3;
constexpr std::size_t kFirstLayer = 4;
constexpr std::size_t kPerLayer = 16;

struct LayerSlots {
  std::size_t q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
  std::size_t attn_ln_g, attn_ln_b;
  std::size_t ff1_w, ff1_b, ff2_w, ff2_b;
  std::size_t ffn_ln_g, ffn_ln_b;
};

LayerSlots layer_slots(std::size_t layer) {
  const std::size_t b = kFirstLayer + layer * kPerLayer;
  return {b, b + 1, b + 2, b + 3, b + 4, b + 5, b + 6, b + 7, b + 8, b + 9, b + 10, b + 11, b + 12, b + 13, b + 14, b + 15};
}

constexpr double kMaskedScore = -1e9;

}  // namespace

template <typename T>
BasicMaskedLM<T>::BasicMaskedLM(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  for (auto& spec : parameter_layout(config_)) {
    BasicTensor<T> value(spec.shape);
    if (spec.name.ends_with("layer_norm.weight")) value.fill(T{1});
    params_.emplace_back(std::move(spec.name), spec.role, std::move(value));
  }
}

template <typename T>
BasicMaskedLM<T> BasicMaskedLM<T>::random(ModelConfig config, std::uint64_t seed, double stddev) {
  BasicMaskedLM model(std::move(config));
  Rng rng(seed);
  for (auto& p : model.params_) {
    if (p.role() == Role::Bias || p.name().ends_with("layer_norm.weight")) continue;
    for (auto& v : p.value().data()) v = static_cast<T>(stddev * rng.normal());
  }
  return model;
}

template <typename T>
typename BasicMaskedLM<T>::ParameterT* BasicMaskedLM<T>::find(std::string_view name) {
  auto it = std::find_if(params_.begin(), params_.end(), [&](const ParameterT& p) { return p.name() == name; });
  return it == params_.end() ? nullptr : &*it;
}

template <typename T>
const typename BasicMaskedLM<T>::ParameterT* BasicMaskedLM<T>::find(std::string_view name) const {
  auto it = std::find_if(params_.begin(), params_.end(), [&](const ParameterT& p) { return p.name() == name; });
  return it == params_.end() ? nullptr : &*it;
}

template <typename T>
typename BasicMaskedLM<T>::ParameterT& BasicMaskedLM<T>::parameter(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw ContractError("model has no parameter named '" + std::string(name) + "'");
}

template <typename T>
const typename BasicMaskedLM<T>::ParameterT& BasicMaskedLM<T>::parameter(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw ContractError("model has no parameter named '" + std::string(name) + "'");
}

template <typename T>
const typename BasicMaskedLM<T>::ParameterT& BasicMaskedLM<T>::lm_head_weight() const {
  return config_.tie_lm_head ? params_[kWordEmb] : params_[params_.size() - 2];
}

template <typename T>
void BasicMaskedLM<T>::check_sequence(std::span<const TokenId> ids) const {
  if (ids.empty()) throw ContractError("empty token sequence");
  if (ids.size() > static_cast<std::size_t>(config_.max_seq_len)) {
    throw OverlengthError("sequence of " + std::to_string(ids.size()) + " tokens exceeds max_seq_len " +
                              std::to_string(config_.max_seq_len),
                          ids.size(), static_cast<std::size_t>(config_.max_seq_len));
  }
  for (TokenId id : ids) {
    if (id < 0 || id >= config_.vocab_size) throw ContractError("token id " + std::to_string(id) + " outside vocab");
  }
}

template <typename T>
std::size_t BasicMaskedLM<T>::mask_position(std::span<const TokenId> ids) const {
  std::size_t count = 0, pos = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == config_.mask_token_id) {
      ++count;
      pos = i;
    }
  }
  if (count != 1) {
    throw ContractError("expected exactly one mask token, found " + std::to_string(count));
  }
  return pos;
}

template <typename T>
template <typename Self>
Var BasicMaskedLM<T>::encode_impl(Self& self, TapeT& tape, std::span<const TokenId> ids) {
  self.check_sequence(ids);
  const auto& cfg = self.config_;
  const std::size_t len = ids.size();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto heads = static_cast<std::size_t>(cfg.num_heads);
  const std::size_t head_dim = d / heads;
  auto& params = self.params_;

  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  Var words = ops::gather_rows(tape, tape.param(params[kWordEmb]), std::span<const std::int32_t>(idx));
  Var positions = ops::slice_rows(tape, tape.param(params[kPosEmb]), 0, len);
  Var x = ops::add(tape, words, positions);
  x = ops::layer_norm(tape, x, tape.param(params[kEmbLnGain]), tape.param(params[kEmbLnBias]));

  const bool has_pad = std::find(ids.begin(), ids.end(), cfg.pad_token_id) != ids.end();
  std::optional<Var> key_mask;
  if (has_pad) {
    BasicTensor<T> mask({len, len});
    for (std::size_t q = 0; q < len; ++q)
      for (std::size_t k = 0; k < len; ++k)
        if (ids[k] == cfg.pad_token_id) mask[q * len + k] = static_cast<T>(kMaskedScore);
    key_mask = tape.constant(std::move(mask));
  }
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));

  auto linear = [&](Var in, std::size_t w, std::size_t b) {
    return ops::add_row(tape, ops::matmul_nt(tape, in, tape.param(params[w])), tape.param(params[b]));
  };

  for (std::int64_t l = 0; l < cfg.num_layers; ++l) {
    const LayerSlots s = layer_slots(static_cast<std::size_t>(l));
    Var q = linear(x, s.q_w, s.q_b);
    Var k = linear(x, s.k_w, s.k_b);
    Var v = linear(x, s.v_w, s.v_b);
    std::vector<Var> contexts;
    contexts.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Var qh = ops::slice_cols(tape, q, h * head_dim, head_dim);
      Var kh = ops::slice_cols(tape, k, h * head_dim, head_dim);
      Var vh = ops::slice_cols(tape, v, h * head_dim, head_dim);
      Var scores = ops::scale(tape, ops::matmul_nt(tape, qh, kh), inv_sqrt);
      if (key_mask) scores = ops::add(tape, scores, *key_mask);
      Var attn = ops::softmax(tape, scores);
      contexts.push_back(ops::matmul(tape, attn, vh));
    }
    Var context = heads == 1 ? contexts[0] : ops::concat_cols(tape, std::span<const Var>(contexts));
    Var attn_out = linear(context, s.o_w, s.o_b);
    x = ops::layer_norm(tape, ops::add(tape, x, attn_out), tape.param(params[s.attn_ln_g]),
                        tape.param(params[s.attn_ln_b]));
    Var hidden = ops::gelu(tape, linear(x, s.ff1_w, s.ff1_b));
    Var ffn_out = linear(hidden, s.ff2_w, s.ff2_b);
    x = ops::layer_norm(tape, ops::add(tape, x, ffn_out), tape.param(params[s.ffn_ln_g]),
                        tape.param(params[s.ffn_ln_b]));
  }
  return x;
}

template <typename T>
template <typename Self>
Var BasicMaskedLM<T>::mask_logits_impl(Self& self, TapeT& tape, std::span<const TokenId> ids) {
  const std::size_t pos = self.mask_position(ids);
  Var hidden = encode_impl(self, tape, ids);
  Var h_mask = ops::slice_rows(tape, hidden, pos, 1);
  auto& params = self.params_;
  auto& head_w = self.config_.tie_lm_head ? params[kWordEmb] : params[params.size() - 2];
  Var logits = ops::matmul_nt(tape, h_mask, tape.param(head_w));
  return ops::add_row(tape, logits, tape.param(params.back()));
}

template <typename T>
Var BasicMaskedLM<T>::encode(TapeT& tape, std::span<const TokenId> ids) {
  return encode_impl(*this, tape, ids);
}

template <typename T>
Var BasicMaskedLM<T>::encode(TapeT& tape, std::span<const TokenId> ids) const {
  return encode_impl(*this, tape, ids);
}

template <typename T>
Var BasicMaskedLM<T>::mask_logits(TapeT& tape, std::span<const TokenId> ids) {
  return mask_logits_impl(*this, tape, ids);
}

template <typename T>
Var BasicMaskedLM<T>::mask_logits(TapeT& tape, std::span<const TokenId> ids) const {
  return mask_logits_impl(*this, tape, ids);
}

template <typename T>
Var BasicMaskedLM<T>::label_probs(TapeT& tape, std::span<const TokenId> ids, std::span<const TokenId> label_tokens) {
  check_label_tokens(label_tokens, config_.vocab_size);
  Var logits = mask_logits(tape, ids);
  return ops::softmax(tape, ops::select_cols(tape, logits, label_tokens));
}

template <typename T>
Var BasicMaskedLM<T>::label_probs(TapeT& tape, std::span<const TokenId> ids,
                                  std::span<const TokenId> label_tokens) const {
  check_label_tokens(label_tokens, config_.vocab_size);
  Var logits = mask_logits(tape, ids);
  return ops::softmax(tape, ops::select_cols(tape, logits, label_tokens));
}

template class BasicMaskedLM<float>;
template class BasicMaskedLM<double>;

void check_label_tokens(std::span<const TokenId> label_tokens, std::int64_t vocab_size) {
  if (label_tokens.size() < 2) throw ConfigError("a verbalizer needs at least two label tokens");
  std::set<TokenId> seen;
  for (TokenId id : label_tokens) {
    if (id < 0 || id >= vocab_size) throw ConfigError("label token id " + std::to_string(id) + " outside vocab");
    if (!seen.insert(id).second) throw ConfigError("duplicate label token id " + std::to_string(id));
  }
}

std::vector<float> mask_logits(const MaskedLM& model, std::span<const TokenId> ids) {
  Tape tape(RoleSet::none());
  Var logits = model.mask_logits(tape, ids);
  const auto data = tape.value(logits).data();
  return {data.begin(), data.end()};
}

ClassDistribution label_probs(const MaskedLM& model, std::span<const TokenId> ids,
                              std::span<const TokenId> label_tokens) {
  check_label_tokens(label_tokens, model.config().vocab_size);
  const auto logits = mask_logits(model, ids);
  // Softmax in double over the selected logits only.
  std::vector<double> z;
  z.reserve(label_tokens.size());
  for (TokenId id : label_tokens) z.push_back(logits[static_cast<std::size_t>(id)]);
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0;
  for (auto& v : z) {
    v = std::exp(v - mx);
    total += v;
  }
  for (auto& v : z) v /= total;
  return ClassDistribution{std::move(z)};
}

double PseudoLogLikelihood::pseudo_perplexity() const {
  if (num_tokens == 0) throw ContractError("pseudo-perplexity of zero tokens");
  return std::exp(-log_prob / static_cast<double>(num_tokens));
}

template <typename T>
PseudoLogLikelihood pseudo_log_likelihood(const BasicMaskedLM<T>& model, std::span<const TokenId> ids,
                                          std::span<const std::size_t> scored_positions) {
  PseudoLogLikelihood out;
  std::vector<TokenId> masked(ids.begin(), ids.end());
  for (std::size_t pos : scored_positions) {
    if (pos >= ids.size()) throw ContractError("scored position outside sequence");
    masked[pos] = model.config().mask_token_id;
    BasicTape<T> tape(RoleSet::none());
    const auto& logits = tape.value(model.mask_logits(tape, masked));
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : logits.data()) mx = std::max(mx, static_cast<double>(v));
    double z = 0;
    for (T v : logits.data()) z += std::exp(static_cast<double>(v) - mx);
    out.log_prob += static_cast<double>(logits[static_cast<std::size_t>(ids[pos])]) - mx - std::log(z);
    ++out.num_tokens;
    masked[pos] = ids[pos];
  }
  return out;
}

template PseudoLogLikelihood pseudo_log_likelihood<float>(const BasicMaskedLM<float>&, std::span<const TokenId>,
                                                          std::span<const std::size_t>);
template PseudoLogLikelihood pseudo_log_likelihood<double>(const BasicMaskedLM<double>&, std::span<const TokenId>,
                                                           std::span<const std::size_t>);

PseudoLogLikelihood pseudo_perplexity(const MaskedLM& model, const Tokenizer& tokenizer, std::string_view text) {
  const auto body = tokenizer.encode(text);
  if (body.empty()) throw ContractError("pseudo-perplexity needs at least one token");
  std::vector<TokenId> ids;
  ids.reserve(body.size() + 2);
  ids.push_back(model.config().cls_token_id);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(model.config().sep_token_id);
  std::vector<std::size_t> positions(body.size());
  for (std::size_t i = 0; i < body.size(); ++i) positions[i] = i + 1;
  return pseudo_log_likelihood(model, ids, positions);
}

}  // namespace nullcal

#include "nullcal/model_config.hpp"

#include <set>

#include "nullcal/errors.hpp"

namespace nullcal {

void ModelConfig::validate() const {
  auto positive = [](std::int64_t v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
  };
  positive(num_layers, "num_layers");
  positive(num_heads, "num_heads");
  positive(d_model, "d_model");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (max_seq_len > 512) throw ConfigError("model config: max_seq_len above 512 is not supported");
  if (d_model % num_heads != 0) throw ConfigError("model config: d_model must be divisible by num_heads");
  const std::set<TokenId> ids{mask_token_id, cls_token_id, sep_token_id, pad_token_id, unk_token_id};
  if (ids.size() != 5) throw ConfigError("model config: special token ids must be distinct");
  for (TokenId id : ids) {
    if (id < 0 || id >= vocab_size) throw ConfigError("model config: special token id outside vocab");
  }
}

SpecialTokens ModelConfig::specials() const {
  return SpecialTokens{mask_token_id, cls_token_id, sep_token_id, pad_token_id, unk_token_id};
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{
      {"num_layers", num_layers},       {"num_heads", num_heads},         {"d_model", d_model},
      {"d_ff", d_ff},                   {"vocab_size", vocab_size},       {"max_seq_len", max_seq_len},
      {"mask_token_id", mask_token_id}, {"cls_token_id", cls_token_id},   {"sep_token_id", sep_token_id},
      {"pad_token_id", pad_token_id},   {"unk_token_id", unk_token_id},   {"tie_lm_head", tie_lm_head},
      {"do_lower_case", do_lower_case},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    j.at("num_layers").get_to(c.num_layers);
    j.at("num_heads").get_to(c.num_heads);
    j.at("d_model").get_to(c.d_model);
    j.at("d_ff").get_to(c.d_ff);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_seq_len").get_to(c.max_seq_len);
    j.at("mask_token_id").get_to(c.mask_token_id);
    j.at("cls_token_id").get_to(c.cls_token_id);
    j.at("sep_token_id").get_to(c.sep_token_id);
    j.at("pad_token_id").get_to(c.pad_token_id);
    j.at("unk_token_id").get_to(c.unk_token_id);
    c.tie_lm_head = j.value("tie_lm_head", false);
    c.do_lower_case = j.value("do_lower_case", false);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("config.json: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<ParameterSpec> parameter_layout(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto ff = static_cast<std::size_t>(c.d_ff);
  const auto vocab = static_cast<std::size_t>(c.vocab_size);
  const auto positions = static_cast<std::size_t>(c.max_seq_len);

  std::vector<ParameterSpec> out;
  out.push_back({"embeddings.word_embeddings.weight", Role::Embedding, {vocab, d}});
  out.push_back({"embeddings.position_embeddings.weight", Role::Embedding, {positions, d}});
  out.push_back({"embeddings.layer_norm.weight", Role::Weight, {d}});
  out.push_back({"embeddings.layer_norm.bias", Role::Bias, {d}});
  for (std::int64_t l = 0; l < c.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* proj : {"query", "key", "value", "output"}) {
      out.push_back({p + "attention." + proj + ".weight", Role::Weight, {d, d}});
      out.push_back({p + "attention." + proj + ".bias", Role::Bias, {d}});
    }
    out.push_back({p + "attention.layer_norm.weight", Role::Weight, {d}});
    out.push_back({p + "attention.layer_norm.bias", Role::Bias, {d}});
    out.push_back({p + "ffn.intermediate.weight", Role::Weight, {ff, d}});
    out.push_back({p + "ffn.intermediate.bias", Role::Bias, {ff}});
    out.push_back({p + "ffn.output.weight", Role::Weight, {d, ff}});
    out.push_back({p + "ffn.output.bias", Role::Bias, {d}});
    out.push_back({p + "ffn.layer_norm.weight", Role::Weight, {d}});
    out.push_back({p + "ffn.layer_norm.bias", Role::Bias, {d}});
  }
  if (!c.tie_lm_head) out.push_back({"lm_head.weight", Role::Weight, {vocab, d}});
  out.push_back({"lm_head.bias", Role::Bias, {vocab}});
  return out;
}

ParameterCounts count_parameters(const ModelConfig& config) {
  ParameterCounts counts;
  for (const auto& spec : parameter_layout(config)) {
    std::uint64_t n = 1;
    for (auto dim : spec.shape) n *= dim;
    counts.total += n;
    switch (spec.role) {
      case Role::Weight: counts.weight += n; break;
      case Role::Bias: counts.bias += n; break;
      case Role::Embedding: counts.embedding += n; break;
    }
  }
  return counts;
}

}  // namespace nullcal

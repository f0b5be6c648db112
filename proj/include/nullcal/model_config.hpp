#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "nullcal/autograd.hpp"
#include "nullcal/tokenizer.hpp"

namespace nullcal {

struct ModelConfig {
  std::int64_t num_layers = 2;
  std::int64_t num_heads = 2;
  std::int64_t d_model = 32;
  std::int64_t d_ff = 64;
  std::int64_t vocab_size = 0;
  std::int64_t max_seq_len = 64;
  TokenId mask_token_id = 0;
  TokenId cls_token_id = 0;
  TokenId sep_token_id = 0;
  TokenId pad_token_id = 0;
  TokenId unk_token_id = 0;
  bool tie_lm_head = false;
  bool do_lower_case = false;

  // Throws ConfigError describing the first violated invariant.
  void validate() const;
  SpecialTokens specials() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct ParameterSpec {
  std::string name;
  Role role;
  Shape shape;
};

// Every parameter the topology defines, in model order. Pure arithmetic on
// the config; nothing is allocated.
std::vector<ParameterSpec> parameter_layout(const ModelConfig& config);

struct ParameterCounts {
  std::uint64_t total = 0;
  std::uint64_t weight = 0;
  std::uint64_t bias = 0;
  std::uint64_t embedding = 0;

  double bias_fraction() const { return total ? static_cast<double>(bias) / static_cast<double>(total) : 0.0; }
};

ParameterCounts count_parameters(const ModelConfig& config);

}  // namespace nullcal

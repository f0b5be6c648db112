#pragma once

// Shared fixtures and independent reference implementations for the tests.

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "nullcal/masked_lm.hpp"
#include "nullcal/prompting.hpp"
#include "nullcal/rng.hpp"
#include "nullcal/tokenizer.hpp"

namespace nullcal::testing {

inline Vocab tiny_vocab() {
  return Vocab({"<mask>", "<s>", "</s>", "<pad>", "<unk>", "the", "movie", "was", "great", "terrible", "okay", ".",
                "it", "is", "about", "sports", "science", "a", "film", "good", "bad", "n/a", "this", "words"});
}

inline ModelConfig tiny_config(std::size_t vocab_size, std::int64_t layers = 1, std::int64_t d_model = 8,
                               std::int64_t heads = 2) {
  ModelConfig c;
  c.num_layers = layers;
  c.num_heads = heads;
  c.d_model = d_model;
  c.d_ff = 2 * d_model;
  c.vocab_size = static_cast<std::int64_t>(vocab_size);
  c.max_seq_len = 32;
  c.mask_token_id = 0;
  c.cls_token_id = 1;
  c.sep_token_id = 2;
  c.pad_token_id = 3;
  c.unk_token_id = 4;
  c.do_lower_case = true;
  return c;
}

inline Tokenizer tiny_tokenizer() {
  const Vocab v = tiny_vocab();
  return Tokenizer(v, tiny_config(v.size()).specials(), true);
}

inline TaskPrompt sentiment_task() {
  TaskPrompt t;
  t.prompt = {"{sentence} The movie was <mask>.", "The movie was <mask>."};
  t.verbalizer = {{"negative", "positive"}, {"terrible", "great"}};
  return t;
}

inline TaskPrompt three_way_task() {
  TaskPrompt t;
  t.prompt = {"{sentence} The movie was <mask>.", "The movie was <mask>."};
  t.verbalizer = {{"negative", "neutral", "positive"}, {"terrible", "okay", "great"}};
  return t;
}

// Unique scratch directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("nullcal-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// ---------------------------------------------------------------------------
// Reference forward pass: plain loops in double, parameters looked up by name.

using Matrix = std::vector<std::vector<double>>;

template <typename T>
Matrix param_matrix(const BasicMaskedLM<T>& m, const std::string& name) {
  const auto& v = m.parameter(name).value();
  Matrix out(v.rows(), std::vector<double>(v.cols()));
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < v.cols(); ++c) out[r][c] = static_cast<double>(v.at(r, c));
  return out;
}

template <typename T>
std::vector<double> param_vector(const BasicMaskedLM<T>& m, const std::string& name) {
  const auto& v = m.parameter(name).value();
  return std::vector<double>(v.data().begin(), v.data().end());
}

// x W^T + b
inline Matrix ref_linear(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  Matrix out(x.size(), std::vector<double>(w.size()));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t o = 0; o < w.size(); ++o) {
      double acc = b[o];
      for (std::size_t k = 0; k < x[i].size(); ++k) acc += x[i][k] * w[o][k];
      out[i][o] = acc;
    }
  return out;
}

inline Matrix ref_layer_norm(const Matrix& x, const std::vector<double>& g, const std::vector<double>& b) {
  Matrix out = x;
  for (auto& row : out) {
    double mean = 0, var = 0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - mean) / std::sqrt(var + 1e-5) * g[c] + b[c];
  }
  return out;
}

inline std::vector<double> ref_softmax(const std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  std::vector<double> out(z.size());
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += out[i] = std::exp(z[i] - mx);
  for (double& v : out) v /= s;
  return out;
}

template <typename T>
Matrix ref_encode(const BasicMaskedLM<T>& m, const std::vector<TokenId>& ids) {
  const auto& c = m.config();
  const auto we = param_matrix(m, "embeddings.word_embeddings.weight");
  const auto pe = param_matrix(m, "embeddings.position_embeddings.weight");
  const std::size_t len = ids.size(), d = static_cast<std::size_t>(c.d_model);
  Matrix x(len, std::vector<double>(d));
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t k = 0; k < d; ++k) x[i][k] = we[static_cast<std::size_t>(ids[i])][k] + pe[i][k];
  x = ref_layer_norm(x, param_vector(m, "embeddings.layer_norm.weight"), param_vector(m, "embeddings.layer_norm.bias"));
  const std::size_t heads = static_cast<std::size_t>(c.num_heads), hd = d / heads;
  for (std::int64_t l = 0; l < c.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto lin = [&](const Matrix& in, const std::string& name) {
      return ref_linear(in, param_matrix(m, p + name + ".weight"), param_vector(m, p + name + ".bias"));
    };
    const Matrix q = lin(x, "attention.query"), k = lin(x, "attention.key"), v = lin(x, "attention.value");
    Matrix ctx(len, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        std::vector<double> s(len);
        for (std::size_t j = 0; j < len; ++j) {
          double acc = 0;
          for (std::size_t e = 0; e < hd; ++e) acc += q[i][h * hd + e] * k[j][h * hd + e];
          s[j] = acc / std::sqrt(static_cast<double>(hd));
          if (ids[j] == c.pad_token_id) s[j] = -1e9;
        }
        const auto a = ref_softmax(s);
        for (std::size_t j = 0; j < len; ++j)
          for (std::size_t e = 0; e < hd; ++e) ctx[i][h * hd + e] += a[j] * v[j][h * hd + e];
      }
    }
    Matrix attn = lin(ctx, "attention.output");
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t e = 0; e < d; ++e) attn[i][e] += x[i][e];
    x = ref_layer_norm(attn, param_vector(m, p + "attention.layer_norm.weight"),
                       param_vector(m, p + "attention.layer_norm.bias"));
    Matrix hidden = lin(x, "ffn.intermediate");
    for (auto& row : hidden)
      for (double& v2 : row) v2 = 0.5 * v2 * (1.0 + std::erf(v2 / std::sqrt(2.0)));
    Matrix out = lin(hidden, "ffn.output");
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t e = 0; e < d; ++e) out[i][e] += x[i][e];
    x = ref_layer_norm(out, param_vector(m, p + "ffn.layer_norm.weight"), param_vector(m, p + "ffn.layer_norm.bias"));
  }
  return x;
}

template <typename T>
std::vector<double> ref_logits_at(const BasicMaskedLM<T>& m, const std::vector<TokenId>& ids, std::size_t pos) {
  const Matrix h = ref_encode(m, ids);
  const Matrix w = m.config().tie_lm_head ? param_matrix(m, "embeddings.word_embeddings.weight")
                                          : param_matrix(m, "lm_head.weight");
  return ref_linear({h[pos]}, w, param_vector(m, "lm_head.bias"))[0];
}

// Pseudo-log-likelihood by masking each position of ids[1..n-2] in turn.
template <typename T>
double ref_pseudo_log_likelihood(const BasicMaskedLM<T>& m, const std::vector<TokenId>& ids) {
  double total = 0;
  for (std::size_t pos = 1; pos + 1 < ids.size(); ++pos) {
    auto masked = ids;
    masked[pos] = m.config().mask_token_id;
    const auto p = ref_softmax(ref_logits_at(m, masked, pos));
    total += std::log(p[static_cast<std::size_t>(ids[pos])]);
  }
  return total;
}

}  // namespace nullcal::testing

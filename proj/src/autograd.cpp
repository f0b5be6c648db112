#include "nullcal/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace nullcal {

std::string_view role_name(Role role) {
  switch (role) {
    case Role::Weight: return "weight";
    case Role::Bias: return "bias";
    case Role::Embedding: return "embedding";
  }
  return "weight";
}

std::optional<Role> parse_role(std::string_view name) {
  if (name == "weight") return Role::Weight;
  if (name == "bias") return Role::Bias;
  if (name == "embedding") return Role::Embedding;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var BasicTape<T>::constant(TensorT value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var BasicTape<T>::constant_ref(const TensorT& value) {
  Node n;
  n.borrowed = &value;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var BasicTape<T>::param(BasicParameter<T>& p) {
  if (!grad_roles_.contains(p.role())) return constant_ref(p.value());
  Node n;
  n.borrowed = &p.value();
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var BasicTape<T>::record(TensorT value, std::vector<Var> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  for (Var v : inputs) {
    if (v.index >= nodes_.size()) throw ContractError("tape input refers to a node that does not exist");
    n.requires_grad = n.requires_grad || nodes_[v.index].requires_grad;
  }
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.fn = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
const BasicTensor<T>& BasicTape<T>::value(Var v) const {
  return node_value(nodes_.at(v.index));
}

template <typename T>
const BasicTensor<T>& BasicTape<T>::grad(Var v) const {
  if (v.index >= grads_.size() || grads_[v.index].empty()) {
    throw ContractError("no gradient recorded for tape node " + std::to_string(v.index));
  }
  return grads_[v.index];
}

template <typename T>
void BasicTape<T>::backward(Var loss) {
  const Node& root = nodes_.at(loss.index);
  if (node_value(root).numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_string(node_value(root).shape()));
  }
  grads_.assign(nodes_.size(), TensorT{});
  for (std::size_t i = 0; i <= loss.index; ++i) {
    if (nodes_[i].requires_grad) grads_[i] = TensorT(node_value(nodes_[i]).shape());
  }
  if (!root.requires_grad) return;
  grads_[loss.index][0] = T{1};

  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    if (n.fn) {
      BackwardContext ctx{node_value(n), grads_[i], {}, {}};
      ctx.inputs.reserve(n.inputs.size());
      ctx.input_grads.reserve(n.inputs.size());
      for (Var in : n.inputs) {
        ctx.inputs.push_back(&node_value(nodes_[in.index]));
        ctx.input_grads.push_back(nodes_[in.index].requires_grad ? &grads_[in.index] : nullptr);
      }
      n.fn(ctx);
    }
    if (n.param) n.param->grad().add_(grads_[i]);
  }
}

template class BasicTape<float>;
template class BasicTape<double>;

// ---------------------------------------------------------------------------
// Primitives

namespace ops {
namespace {

template <typename T>
void require_rank2(const BasicTensor<T>& x, const char* op) {
  if (x.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(x.shape()));
}

}  // namespace

template <typename T>
Var matmul(BasicTape<T>& t, Var av, Var bv) {
  const auto& a = t.value(av);
  const auto& b = t.value(bv);
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  BasicTensor<T> out({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const T* brow = &b[p * n];
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<T>(acc[j]);
  }
  return t.record(std::move(out), {av, bv}, [m, k, n](auto& ctx) {
    const auto& a = *ctx.inputs[0];
    const auto& b = *ctx.inputs[1];
    const auto& g = ctx.output_grad;
    if (auto* ga = ctx.input_grads[0]) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0;
          for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(g[i * n + j]) * b[p * n + j];
          (*ga)[i * k + p] += static_cast<T>(s);
        }
    }
    if (auto* gb = ctx.input_grads[1]) {
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0;
          for (std::size_t i = 0; i < m; ++i) s += static_cast<double>(a[i * k + p]) * g[i * n + j];
          (*gb)[p * n + j] += static_cast<T>(s);
        }
    }
  });
}

template <typename T>
Var matmul_nt(BasicTape<T>& t, Var av, Var bv) {
  const auto& a = t.value(av);
  const auto& b = t.value(bv);
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  }
  BasicTensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = &a[i * k];
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = &b[j * k];
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += static_cast<double>(arow[p]) * brow[p];
      out[i * n + j] = static_cast<T>(s);
    }
  }
  return t.record(std::move(out), {av, bv}, [m, k, n](auto& ctx) {
    const auto& a = *ctx.inputs[0];
    const auto& b = *ctx.inputs[1];
    const auto& g = ctx.output_grad;
    if (auto* ga = ctx.input_grads[0]) {
      std::vector<double> acc(k);
      for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          if (gij == 0.0) continue;
          const T* brow = &b[j * k];
          for (std::size_t p = 0; p < k; ++p) acc[p] += gij * brow[p];
        }
        for (std::size_t p = 0; p < k; ++p) (*ga)[i * k + p] += static_cast<T>(acc[p]);
      }
    }
    if (auto* gb = ctx.input_grads[1]) {
      std::vector<double> acc(k);
      for (std::size_t j = 0; j < n; ++j) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          const double gij = g[i * n + j];
          if (gij == 0.0) continue;
          const T* arow = &a[i * k];
          for (std::size_t p = 0; p < k; ++p) acc[p] += gij * arow[p];
        }
        for (std::size_t p = 0; p < k; ++p) (*gb)[j * k + p] += static_cast<T>(acc[p]);
      }
    }
  });
}

template <typename T>
Var add(BasicTape<T>& t, Var av, Var bv) {
  const auto& a = t.value(av);
  const auto& b = t.value(bv);
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  BasicTensor<T> out = a;
  out.add_(b);
  return t.record(std::move(out), {av, bv}, [](auto& ctx) {
    for (auto* g : ctx.input_grads)
      if (g) g->add_(ctx.output_grad);
  });
}

template <typename T>
Var add_row(BasicTape<T>& t, Var xv, Var bv) {
  const auto& x = t.value(xv);
  const auto& b = t.value(bv);
  const std::size_t n = x.cols();
  if (b.numel() != n) {
    throw DimensionError("add_row: " + shape_string(x.shape()) + " + " + shape_string(b.shape()));
  }
  BasicTensor<T> out = x;
  const std::size_t rows = x.rows();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += b[c];
  return t.record(std::move(out), {xv, bv}, [rows, n](auto& ctx) {
    const auto& g = ctx.output_grad;
    if (auto* gx = ctx.input_grads[0]) gx->add_(g);
    if (auto* gb = ctx.input_grads[1]) {
      for (std::size_t c = 0; c < n; ++c) {
        double s = 0;
        for (std::size_t r = 0; r < rows; ++r) s += g[r * n + c];
        (*gb)[c] += static_cast<T>(s);
      }
    }
  });
}

template <typename T>
Var scale(BasicTape<T>& t, Var xv, T factor) {
  BasicTensor<T> out = t.value(xv);
  for (auto& v : out.data()) v *= factor;
  return t.record(std::move(out), {xv}, [factor](auto& ctx) {
    auto* gx = ctx.input_grads[0];
    for (std::size_t i = 0; i < gx->numel(); ++i) (*gx)[i] += factor * ctx.output_grad[i];
  });
}

template <typename T>
Var sum(BasicTape<T>& t, Var xv) {
  double s = 0;
  for (T v : t.value(xv).data()) s += v;
  return t.record(BasicTensor<T>::scalar(static_cast<T>(s)), {xv}, [](auto& ctx) {
    auto* gx = ctx.input_grads[0];
    const T g = ctx.output_grad[0];
    for (auto& v : gx->data()) v += g;
  });
}

template <typename T>
Var gather_rows(BasicTape<T>& t, Var tablev, std::span<const std::int32_t> ids) {
  const auto& table = t.value(tablev);
  require_rank2(table, "gather_rows");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  BasicTensor<T> out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw DimensionError("gather_rows: index " + std::to_string(ids[r]) + " outside table of " +
                           std::to_string(vocab) + " rows");
    }
    std::copy_n(&table[static_cast<std::size_t>(ids[r]) * d], d, &out[r * d]);
  }
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  return t.record(std::move(out), {tablev}, [idx = std::move(idx), d](auto& ctx) {
    auto* gt = ctx.input_grads[0];
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) (*gt)[static_cast<std::size_t>(idx[r]) * d + c] += ctx.output_grad[r * d + c];
  });
}

template <typename T>
Var slice_rows(BasicTape<T>& t, Var xv, std::size_t begin, std::size_t count) {
  const auto& x = t.value(xv);
  require_rank2(x, "slice_rows");
  const std::size_t d = x.dim(1);
  if (count == 0 || begin + count > x.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                         shape_string(x.shape()));
  }
  BasicTensor<T> out({count, d});
  std::copy_n(&x[begin * d], count * d, &out[0]);
  return t.record(std::move(out), {xv}, [begin, count, d](auto& ctx) {
    auto* gx = ctx.input_grads[0];
    for (std::size_t i = 0; i < count * d; ++i) (*gx)[begin * d + i] += ctx.output_grad[i];
  });
}

template <typename T>
Var slice_cols(BasicTape<T>& t, Var xv, std::size_t begin, std::size_t count) {
  const auto& x = t.value(xv);
  require_rank2(x, "slice_cols");
  const std::size_t rows = x.dim(0), n = x.dim(1);
  if (count == 0 || begin + count > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                         shape_string(x.shape()));
  }
  BasicTensor<T> out({rows, count});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(&x[r * n + begin], count, &out[r * count]);
  return t.record(std::move(out), {xv}, [rows, n, begin, count](auto& ctx) {
    auto* gx = ctx.input_grads[0];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) (*gx)[r * n + begin + c] += ctx.output_grad[r * count + c];
  });
}

template <typename T>
Var concat_cols(BasicTape<T>& t, std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = t.value(parts[0]).dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    const auto& x = t.value(p);
    require_rank2(x, "concat_cols");
    if (x.dim(0) != rows) throw DimensionError("concat_cols: row count mismatch");
    widths.push_back(x.dim(1));
    total += x.dim(1);
  }
  BasicTensor<T> out({rows, total});
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& x = t.value(parts[i]);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(&x[r * widths[i]], widths[i], &out[r * total + off]);
    off += widths[i];
  }
  return t.record(std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                  [rows, total, widths = std::move(widths)](auto& ctx) {
                    std::size_t off = 0;
                    for (std::size_t i = 0; i < widths.size(); ++i) {
                      if (auto* g = ctx.input_grads[i]) {
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t c = 0; c < widths[i]; ++c)
                            (*g)[r * widths[i] + c] += ctx.output_grad[r * total + off + c];
                      }
                      off += widths[i];
                    }
                  });
}

template <typename T>
Var concat_rows(BasicTape<T>& t, std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t cols = t.value(parts[0]).dim(1);
  std::vector<std::size_t> heights;
  std::size_t total = 0;
  for (Var p : parts) {
    const auto& x = t.value(p);
    require_rank2(x, "concat_rows");
    if (x.dim(1) != cols) throw DimensionError("concat_rows: column count mismatch");
    heights.push_back(x.dim(0));
    total += x.dim(0);
  }
  BasicTensor<T> out({total, cols});
  std::size_t off = 0;
  for (Var p : parts) {
    const auto& x = t.value(p);
    std::copy(x.data().begin(), x.data().end(), &out[off * cols]);
    off += x.dim(0);
  }
  return t.record(std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                  [cols, heights = std::move(heights)](auto& ctx) {
                    std::size_t off = 0;
                    for (std::size_t i = 0; i < heights.size(); ++i) {
                      if (auto* g = ctx.input_grads[i]) {
                        for (std::size_t j = 0; j < heights[i] * cols; ++j) (*g)[j] += ctx.output_grad[off * cols + j];
                      }
                      off += heights[i];
                    }
                  });
}

template <typename T>
Var select_cols(BasicTape<T>& t, Var xv, std::span<const std::int32_t> cols) {
  const auto& x = t.value(xv);
  require_rank2(x, "select_cols");
  const std::size_t rows = x.dim(0), n = x.dim(1), k = cols.size();
  for (auto c : cols) {
    if (c < 0 || static_cast<std::size_t>(c) >= n) {
      throw DimensionError("select_cols: column " + std::to_string(c) + " outside " + shape_string(x.shape()));
    }
  }
  BasicTensor<T> out({rows, k});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = x[r * n + static_cast<std::size_t>(cols[j])];
  std::vector<std::int32_t> idx(cols.begin(), cols.end());
  return t.record(std::move(out), {xv}, [rows, n, k, idx = std::move(idx)](auto& ctx) {
    auto* gx = ctx.input_grads[0];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < k; ++j) (*gx)[r * n + static_cast<std::size_t>(idx[j])] += ctx.output_grad[r * k + j];
  });
}

template <typename T>
Var softmax(BasicTape<T>& t, Var xv, std::size_t axis) {
  const auto& x = t.value(xv);
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + shape_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);

  BasicTensor<T> y(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, static_cast<double>(x[base + i * inner]));
      double z = 0;
      for (std::size_t i = 0; i < len; ++i) z += std::exp(static_cast<double>(x[base + i * inner]) - mx);
      for (std::size_t i = 0; i < len; ++i)
        y[base + i * inner] = static_cast<T>(std::exp(static_cast<double>(x[base + i * inner]) - mx) / z);
    }
  return t.record(std::move(y), {xv}, [outer, inner, len](auto& ctx) {
    const auto& y = ctx.output;
    const auto& g = ctx.output_grad;
    auto* gx = ctx.input_grads[0];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0;
        for (std::size_t i = 0; i < len; ++i) dot += static_cast<double>(g[base + i * inner]) * y[base + i * inner];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t j = base + i * inner;
          (*gx)[j] += static_cast<T>(y[j] * (g[j] - dot));
        }
      }
  });
}

template <typename T>
Var softmax(BasicTape<T>& t, Var xv) {
  const auto rank = t.value(xv).rank();
  if (rank == 0) throw DimensionError("softmax of a rank-0 tensor");
  return softmax(t, xv, rank - 1);
}

template <typename T>
Var layer_norm(BasicTape<T>& t, Var xv, Var gainv, Var biasv, double eps) {
  const auto& x = t.value(xv);
  const auto& gain = t.value(gainv);
  const auto& bias = t.value(biasv);
  const std::size_t n = x.cols(), rows = x.rows();
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm: gain/bias length must equal last dimension " + std::to_string(n));
  }
  BasicTensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = &x[r * n];
    double mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += xr[c];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) y[r * n + c] = static_cast<T>(gain[c] * ((xr[c] - mean) * rstd) + bias[c]);
  }
  return t.record(std::move(y), {xv, gainv, biasv}, [rows, n, eps](auto& ctx) {
    const auto& x = *ctx.inputs[0];
    const auto& gain = *ctx.inputs[1];
    const auto& g = ctx.output_grad;
    auto* gx = ctx.input_grads[0];
    auto* ggain = ctx.input_grads[1];
    auto* gbias = ctx.input_grads[2];
    std::vector<double> xhat(n), dxhat(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = &x[r * n];
      double mean = 0;
      for (std::size_t c = 0; c < n; ++c) mean += xr[c];
      mean /= static_cast<double>(n);
      double var = 0;
      for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
      var /= static_cast<double>(n);
      const double rstd = 1.0 / std::sqrt(var + eps);
      double mean_d = 0, mean_dx = 0;
      for (std::size_t c = 0; c < n; ++c) {
        xhat[c] = (xr[c] - mean) * rstd;
        dxhat[c] = static_cast<double>(g[r * n + c]) * gain[c];
        mean_d += dxhat[c];
        mean_dx += dxhat[c] * xhat[c];
        if (ggain) (*ggain)[c] += static_cast<T>(g[r * n + c] * xhat[c]);
        if (gbias) (*gbias)[c] += g[r * n + c];
      }
      mean_d /= static_cast<double>(n);
      mean_dx /= static_cast<double>(n);
      if (gx) {
        for (std::size_t c = 0; c < n; ++c)
          (*gx)[r * n + c] += static_cast<T>(rstd * (dxhat[c] - mean_d - xhat[c] * mean_dx));
      }
    }
  });
}

template <typename T>
Var gelu(BasicTape<T>& t, Var xv) {
  BasicTensor<T> y = t.value(xv);
  for (auto& v : y.data()) {
    const double x = v;
    v = static_cast<T>(0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)));
  }
  return t.record(std::move(y), {xv}, [](auto& ctx) {
    const auto& x = *ctx.inputs[0];
    auto* gx = ctx.input_grads[0];
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double xi = x[i];
      const double d = 0.5 * (1.0 + std::erf(xi / std::numbers::sqrt2)) + xi * inv_sqrt_2pi * std::exp(-0.5 * xi * xi);
      (*gx)[i] += static_cast<T>(d * ctx.output_grad[i]);
    }
  });
}

template <typename T>
Var cross_entropy(BasicTape<T>& t, Var logitsv, std::span<const std::int32_t> targets) {
  const auto& z = t.value(logitsv);
  require_rank2(z, "cross_entropy");
  const std::size_t rows = z.dim(0), n = z.dim(1);
  if (targets.size() != rows) throw DimensionError("cross_entropy: one target per row required");
  std::vector<double> probs(rows * n);
  double loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= n) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[r]) + " out of range");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, static_cast<double>(z[r * n + c]));
    double s = 0;
    for (std::size_t c = 0; c < n; ++c) s += std::exp(static_cast<double>(z[r * n + c]) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < n; ++c) probs[r * n + c] = std::exp(static_cast<double>(z[r * n + c]) - lse);
    loss += lse - z[r * n + static_cast<std::size_t>(targets[r])];
  }
  loss /= static_cast<double>(rows);
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  return t.record(BasicTensor<T>::scalar(static_cast<T>(loss)), {logitsv},
                  [rows, n, probs = std::move(probs), tg = std::move(tg)](auto& ctx) {
                    auto* gz = ctx.input_grads[0];
                    const double g = static_cast<double>(ctx.output_grad[0]) / static_cast<double>(rows);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < n; ++c) {
                        const double onehot = static_cast<std::size_t>(tg[r]) == c ? 1.0 : 0.0;
                        (*gz)[r * n + c] += static_cast<T>(g * (probs[r * n + c] - onehot));
                      }
                  });
}

#define NULLCAL_INSTANTIATE_OPS(T)                                                               \
  template Var matmul<T>(BasicTape<T>&, Var, Var);                                              \
  template Var matmul_nt<T>(BasicTape<T>&, Var, Var);                                           \
  template Var add<T>(BasicTape<T>&, Var, Var);                                                 \
  template Var add_row<T>(BasicTape<T>&, Var, Var);                                             \
  template Var scale<T>(BasicTape<T>&, Var, T);                                                 \
  template Var sum<T>(BasicTape<T>&, Var);                                                      \
  template Var gather_rows<T>(BasicTape<T>&, Var, std::span<const std::int32_t>);               \
  template Var slice_rows<T>(BasicTape<T>&, Var, std::size_t, std::size_t);                     \
  template Var slice_cols<T>(BasicTape<T>&, Var, std::size_t, std::size_t);                     \
  template Var concat_cols<T>(BasicTape<T>&, std::span<const Var>);                             \
  template Var concat_rows<T>(BasicTape<T>&, std::span<const Var>);                             \
  template Var select_cols<T>(BasicTape<T>&, Var, std::span<const std::int32_t>);               \
  template Var softmax<T>(BasicTape<T>&, Var, std::size_t);                                     \
  template Var softmax<T>(BasicTape<T>&, Var);                                                  \
  template Var layer_norm<T>(BasicTape<T>&, Var, Var, Var, double);                             \
  template Var gelu<T>(BasicTape<T>&, Var);                                                     \
  template Var cross_entropy<T>(BasicTape<T>&, Var, std::span<const std::int32_t>);

NULLCAL_INSTANTIATE_OPS(float)
NULLCAL_INSTANTIATE_OPS(double)
#undef NULLCAL_INSTANTIATE_OPS

}  // namespace ops

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
void sgd_step(std::span<BasicParameter<T>> params, double lr, RoleSet roles) {
  if (!std::isfinite(lr) || lr < 0.0) {
    throw ConfigError("learning rate must be a finite non-negative number, got " + std::to_string(lr));
  }
  for (auto& p : params) {
    if (lr > 0.0 && roles.contains(p.role())) {
      auto value = p.value().data();
      auto grad = p.grad().data();
      const T step = static_cast<T>(lr);
      for (std::size_t i = 0; i < value.size(); ++i) value[i] -= step * grad[i];
    }
    p.zero_grad();
  }
}

template <typename T>
void zero_grads(std::span<BasicParameter<T>> params) {
  for (auto& p : params) p.zero_grad();
}

template void sgd_step<float>(std::span<BasicParameter<float>>, double, RoleSet);
template void sgd_step<double>(std::span<BasicParameter<double>>, double, RoleSet);
template void zero_grads<float>(std::span<BasicParameter<float>>);
template void zero_grads<double>(std::span<BasicParameter<double>>);

}  // namespace nullcal

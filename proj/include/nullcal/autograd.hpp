#pragma once

// Reverse-mode automatic differentiation over BasicTensor.
//
// A BasicTape records primitive operations in execution order, which is a
// topological order of the computation graph. backward() walks the record
// once in reverse and accumulates gradients into the Parameters that were
// bound to the tape with param().
//
// Forward passes over a const model bind parameters as constants, so any
// number of tapes may read the same parameter set concurrently. backward()
// and sgd_step() write parameter gradients/values and need exclusive access.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nullcal/tensor.hpp"

namespace nullcal {

enum class Role : std::uint8_t { Weight = 0, Bias = 1, Embedding = 2 };

std::string_view role_name(Role role);
std::optional<Role> parse_role(std::string_view name);

class RoleSet {
 public:
  constexpr RoleSet() = default;
  constexpr RoleSet(std::initializer_list<Role> roles) {
    for (Role r : roles) bits_ |= bit(r);
  }
  static constexpr RoleSet all() { return {Role::Weight, Role::Bias, Role::Embedding}; }
  static constexpr RoleSet none() { return {}; }
  constexpr bool contains(Role r) const { return (bits_ & bit(r)) != 0; }
  constexpr void insert(Role r) { bits_ |= bit(r); }
  constexpr bool operator==(const RoleSet&) const = default;

 private:
  static constexpr std::uint8_t bit(Role r) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(r)); }
  std::uint8_t bits_ = 0;
};

template <typename T>
class BasicParameter {
 public:
  BasicParameter(std::string name, Role role, BasicTensor<T> value)
      : name_(std::move(name)), role_(role), value_(std::move(value)), grad_(value_.shape()) {}

  const std::string& name() const { return name_; }
  Role role() const { return role_; }

  BasicTensor<T>& value() { return value_; }
  const BasicTensor<T>& value() const { return value_; }
  BasicTensor<T>& grad() { return grad_; }
  const BasicTensor<T>& grad() const { return grad_; }

  void zero_grad() { grad_.fill(T{0}); }

 private:
  std::string name_;
  Role role_;
  BasicTensor<T> value_;
  BasicTensor<T> grad_;
};

using Parameter = BasicParameter<float>;

// Handle to a node on a tape. Only meaningful for the tape that issued it.
struct Var {
  std::size_t index = 0;
};

template <typename T>
class BasicTape {
 public:
  using TensorT = BasicTensor<T>;

  struct BackwardContext {
    const TensorT& output;
    const TensorT& output_grad;
    std::vector<const TensorT*> inputs;
    // nullptr where the input does not require a gradient
    std::vector<TensorT*> input_grads;
  };
  using BackwardFn = std::function<void(BackwardContext&)>;

  // Parameters whose role is outside grad_roles are bound as constants.
  explicit BasicTape(RoleSet grad_roles = RoleSet::all()) : grad_roles_(grad_roles) {}

  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;
  BasicTape(BasicTape&&) = default;
  BasicTape& operator=(BasicTape&&) = default;

  Var constant(TensorT value);
  // Borrows the tensor; it must outlive the tape.
  Var constant_ref(const TensorT& value);
  Var param(BasicParameter<T>& p);
  Var param(const BasicParameter<T>& p) { return constant_ref(p.value()); }

  // Appends a primitive. `fn` is invoked during backward() if any input
  // requires a gradient.
  Var record(TensorT value, std::vector<Var> inputs, BackwardFn fn);

  const TensorT& value(Var v) const;
  const TensorT& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.index).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  RoleSet grad_roles() const { return grad_roles_; }

  // Populates node gradients and adds d(loss)/d(value) into every bound
  // Parameter's grad. Throws ContractError when loss is not a scalar.
  void backward(Var loss);

 private:
  struct Node {
    TensorT owned;
    const TensorT* borrowed = nullptr;
    BasicParameter<T>* param = nullptr;
    std::vector<Var> inputs;
    BackwardFn fn;
    bool requires_grad = false;
  };

  const TensorT& node_value(const Node& n) const { return n.borrowed ? *n.borrowed : n.owned; }

  RoleSet grad_roles_;
  std::vector<Node> nodes_;
  std::vector<TensorT> grads_;
};

using Tape = BasicTape<float>;

// Primitive operations. All are differentiable with respect to every input.
namespace ops {

// [m,k] x [k,n] -> [m,n]
template <typename T> Var matmul(BasicTape<T>& t, Var a, Var b);
// [m,k] x [n,k]^T -> [m,n]
template <typename T> Var matmul_nt(BasicTape<T>& t, Var a, Var b);
template <typename T> Var add(BasicTape<T>& t, Var a, Var b);
// x[m,n] + b[n] broadcast over rows
template <typename T> Var add_row(BasicTape<T>& t, Var x, Var b);
template <typename T> Var scale(BasicTape<T>& t, Var x, T factor);
template <typename T> Var sum(BasicTape<T>& t, Var x);
// table[V,d], ids -> [len(ids), d]
template <typename T> Var gather_rows(BasicTape<T>& t, Var table, std::span<const std::int32_t> ids);
template <typename T> Var slice_rows(BasicTape<T>& t, Var x, std::size_t begin, std::size_t count);
template <typename T> Var slice_cols(BasicTape<T>& t, Var x, std::size_t begin, std::size_t count);
template <typename T> Var concat_cols(BasicTape<T>& t, std::span<const Var> parts);
template <typename T> Var concat_rows(BasicTape<T>& t, std::span<const Var> parts);
// x[m,n] -> x[:, cols]
template <typename T> Var select_cols(BasicTape<T>& t, Var x, std::span<const std::int32_t> cols);
template <typename T> Var softmax(BasicTape<T>& t, Var x, std::size_t axis);
// Softmax over the last axis.
template <typename T> Var softmax(BasicTape<T>& t, Var x);
// Normalizes over the last axis, then gain * xhat + bias.
template <typename T> Var layer_norm(BasicTape<T>& t, Var x, Var gain, Var bias, double eps = 1e-5);
template <typename T> Var gelu(BasicTape<T>& t, Var x);
// Mean over rows of -log softmax(logits[r])[targets[r]].
template <typename T> Var cross_entropy(BasicTape<T>& t, Var logits, std::span<const std::int32_t> targets);

}  // namespace ops

// value <- value - lr * grad for parameters whose role is in `roles`, then
// zeroes every gradient. Other parameters are not touched. lr must be finite
// and >= 0.
template <typename T>
void sgd_step(std::span<BasicParameter<T>> params, double lr, RoleSet roles);

template <typename T>
void zero_grads(std::span<BasicParameter<T>> params);

}  // namespace nullcal

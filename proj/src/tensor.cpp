#include "nullcal/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace nullcal {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T{0}) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::filled(Shape shape, T value) {
  BasicTensor t(std::move(shape));
  t.fill(value);
  return t;
}

template <typename T>
std::size_t BasicTensor<T>::rows() const {
  if (shape_.empty()) return 0;
  return data_.size() / shape_.back();
}

template <typename T>
T BasicTensor<T>::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

template <typename T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void BasicTensor<T>::add_(const BasicTensor& other) {
  if (other.shape_ != shape_) {
    throw DimensionError("add_: " + shape_string(shape_) + " vs " + shape_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

template <typename T>
bool BasicTensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace nullcal

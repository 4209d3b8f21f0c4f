#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "macnn/error.hpp"

namespace macnn {

#ifdef MACNN_USE_FLOAT32
using real_t = float;
#else
using real_t = double;
#endif

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

/// Dense row-major n-dimensional array. Every dimension is positive and
/// data().size() == product(shape) at all times.
template <std::floating_point T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_dims();
    data_.assign(shape_size(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(shape_)) {
      fail(ErrorKind::shape, "tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // 3-D accessor (channel, row, column).
  T& operator()(std::size_t c, std::size_t i, std::size_t j) noexcept {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  const T& operator()(std::size_t c, std::size_t i, std::size_t j) const noexcept {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }

  /// Same data viewed under a different shape with the same element count.
  BasicTensor reshaped(Shape shape) const& { return BasicTensor(std::move(shape), data_); }
  BasicTensor reshaped(Shape shape) && { return BasicTensor(std::move(shape), std::move(data_)); }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) fail(ErrorKind::shape, "tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<real_t>;

/// Gradients produced by a layer's backward pass.
template <std::floating_point T>
struct BasicLayerGrad {
  BasicTensor<T> d_input;
  std::vector<BasicTensor<T>> d_params;
};

using LayerGrad = BasicLayerGrad<real_t>;

inline void require_shape(const Shape& actual, const Shape& expected, std::string_view what) {
  if (actual != expected) {
    fail(ErrorKind::shape, std::string(what) + ": expected shape " + shape_string(expected) + ", got " +
                               shape_string(actual));
  }
}

}  // namespace macnn

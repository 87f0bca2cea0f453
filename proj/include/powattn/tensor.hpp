#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <ranges>
#include <span>
#include <string>
#include <vector>

#include "powattn/error.hpp"

namespace powattn {

// Dense row-major array. Sequence data uses the [batch, time, head, feature]
// layout; per-timestep gates drop the feature axis.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  Tensor(std::initializer_list<std::size_t> shape, T fill = T(0))
      : Tensor(std::vector<std::size_t>(shape), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == count(shape_), ErrorCode::ShapeMismatch,
            "tensor data does not match its shape");
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t b, std::size_t t, std::size_t h, std::size_t f) {
    return data_[offset(b, t, h, f)];
  }
  const T& at(std::size_t b, std::size_t t, std::size_t h, std::size_t f) const {
    return data_[offset(b, t, h, f)];
  }
  T& at(std::size_t b, std::size_t t, std::size_t h) {
    return data_[(b * shape_[1] + t) * shape_[2] + h];
  }
  const T& at(std::size_t b, std::size_t t, std::size_t h) const {
    return data_[(b * shape_[1] + t) * shape_[2] + h];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }

 private:
  std::size_t offset(std::size_t b, std::size_t t, std::size_t h,
                     std::size_t f) const {
    return ((b * shape_[1] + t) * shape_[2] + h) * shape_[3] + f;
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

// Strided view of one (batch, head) stream of a [b, t, h, f] tensor: row i is
// the f-vector at timestep i. Gates use f = 1.
template <typename T>
class StreamView {
 public:
  StreamView(T* base, std::size_t length, std::size_t stride, std::size_t width)
      : base_(base), length_(length), stride_(stride), width_(width) {}

  std::size_t length() const noexcept { return length_; }
  std::size_t width() const noexcept { return width_; }

  std::span<T> row(std::size_t i) const { return {base_ + i * stride_, width_}; }
  T& operator()(std::size_t i, std::size_t f) const { return base_[i * stride_ + f]; }

  StreamView slice(std::size_t begin, std::size_t len) const {
    return {base_ + begin * stride_, len, stride_, width_};
  }

 private:
  T* base_;
  std::size_t length_;
  std::size_t stride_;
  std::size_t width_;
};

template <typename T>
StreamView<T> stream(Tensor<T>& x, std::size_t b, std::size_t h) {
  const std::size_t t = x.dim(1), heads = x.dim(2);
  const std::size_t width = x.rank() == 4 ? x.dim(3) : 1;
  return {x.data() + (b * t * heads + h) * width, t, heads * width, width};
}

template <typename T>
StreamView<const T> stream(const Tensor<T>& x, std::size_t b, std::size_t h) {
  const std::size_t t = x.dim(1), heads = x.dim(2);
  const std::size_t width = x.rank() == 4 ? x.dim(3) : 1;
  return {x.data() + (b * t * heads + h) * width, t, heads * width, width};
}

// Max-norm relative discrepancy ||a - b||_inf / ||b||_inf. Falls back to the
// absolute discrepancy when the reference is identically zero.
template <std::ranges::contiguous_range A, std::ranges::contiguous_range B>
double max_rel_error(const A& a, const B& b) {
  require(std::ranges::size(a) == std::ranges::size(b), ErrorCode::ShapeMismatch,
          "compared arrays differ in size");
  const auto* pa = std::ranges::data(a);
  const auto* pb = std::ranges::data(b);
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < std::ranges::size(a); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(pa[i]) - static_cast<double>(pb[i])));
    ref = std::max(ref, std::abs(static_cast<double>(pb[i])));
  }
  return ref > 0.0 ? diff / ref : diff;
}

template <typename A, typename B>
double max_rel_error(const Tensor<A>& a, const Tensor<B>& b) {
  require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
          "compared tensors differ in shape");
  return max_rel_error(a.flat(), b.flat());
}

template <std::ranges::contiguous_range A, std::ranges::contiguous_range B>
double max_abs_error(const A& a, const B& b) {
  require(std::ranges::size(a) == std::ranges::size(b), ErrorCode::ShapeMismatch,
          "compared arrays differ in size");
  const auto* pa = std::ranges::data(a);
  const auto* pb = std::ranges::data(b);
  double diff = 0.0;
  for (std::size_t i = 0; i < std::ranges::size(a); ++i)
    diff = std::max(diff, std::abs(static_cast<double>(pa[i]) - static_cast<double>(pb[i])));
  return diff;
}

}  // namespace powattn

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cdhvae/core/error.hpp"

namespace cdhvae {

/// NCHW extent. Matrices are stored as (1, 1, rows, cols).
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t per_sample() const noexcept { return static_cast<std::size_t>(c) * h * w; }
  std::size_t spatial() const noexcept { return static_cast<std::size_t>(h) * w; }

  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw InputError("tensor data size does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(int n, int c, int h, int w) noexcept { return data_[index(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const noexcept { return data_[index(n, c, h, w)]; }

  /// Pointer to sample n.
  T* sample(int n) noexcept { return data_.data() + static_cast<std::size_t>(n) * shape_.per_sample(); }
  const T* sample(int n) const noexcept {
    return data_.data() + static_cast<std::size_t>(n) * shape_.per_sample();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (s.size() != shape_.size()) {
      throw InputError("cannot reshape " + shape_.str() + " to " + s.str());
    }
    return Tensor(s, data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t index(int n, int c, int h, int w) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) throw InputError("shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
T mean_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) throw InputError("shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - b[i]);
  return static_cast<T>(s / static_cast<double>(a.size()));
}

/// Stack single-sample tensors along the batch axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) throw InputError("cannot stack zero tensors");
  Shape s = items.front().shape();
  for (const auto& t : items) {
    if (t.shape().n != 1 || t.shape().c != s.c || t.shape().h != s.h || t.shape().w != s.w) {
      throw InputError("stack: inconsistent item shape " + t.shape().str());
    }
  }
  s.n = static_cast<int>(items.size());
  Tensor<T> out(s);
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::copy(items[i].values().begin(), items[i].values().end(), out.sample(static_cast<int>(i)));
  }
  return out;
}

template <typename T>
Tensor<T> take_sample(const Tensor<T>& t, int n) {
  Shape s = t.shape();
  s.n = 1;
  Tensor<T> out(s);
  std::copy(t.sample(n), t.sample(n) + s.size(), out.data());
  return out;
}

}  // namespace cdhvae

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <type_traits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "clora/errors.hpp"

namespace clora {

/// Allocator that leaves trivially constructible elements uninitialised on
/// resize; every Tensor constructor still writes each element explicitly.
template <class T, class A = std::allocator<T>>
class default_init_allocator : public A {
 public:
  template <class U>
  struct rebind {
    using other = default_init_allocator<U, typename std::allocator_traits<A>::template rebind_alloc<U>>;
  };
  using A::A;

  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    std::allocator_traits<A>::construct(static_cast<A&>(*this), p, std::forward<Args>(args)...);
  }
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array. Holds values only; gradient bookkeeping lives in
/// Parameter and Tape.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  struct uninitialized_t {};
  static constexpr uninitialized_t uninitialized{};

  /// Storage with unspecified contents; the caller must overwrite every element.
  Tensor(Shape shape, uninitialized_t) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.resize(shape_numel(shape_));
  }

  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_shape(shape_);
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor " + shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                       " elements, got " + std::to_string(data_.size()));
    }
  }

  /// Matrix literal, mostly for tests: Tensor<double>::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
  }

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) throw ShapeError("dimension " + std::to_string(i) + " out of range for " + shape_str(shape_));
    return shape_[i];
  }

  // Rows/cols view the tensor as a matrix: leading dimension by the product of the rest.
  std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_.front(); }
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : data_.size() / shape_.front(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) noexcept { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const noexcept {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor out(std::move(shape), uninitialized);
    std::copy(data_.begin(), data_.end(), out.data_.begin());
    return out;
  }

  template <std::floating_point U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_, Tensor<U>::uninitialized);
    std::copy(data_.begin(), data_.end(), out.data().begin());
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  std::vector<T> to_vector() const { return std::vector<T>(data_.begin(), data_.end()); }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  static void check_shape(const Shape& shape) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
  }

  Shape shape_;
  std::vector<T, default_init_allocator<T>> data_;
};

template <std::floating_point T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Bitwise equality on the raw element representation (distinguishes -0.0 from 0.0).
template <std::floating_point T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(), [](T x, T y) {
    return std::memcmp(&x, &y, sizeof(T)) == 0;
  });
}

}  // namespace clora

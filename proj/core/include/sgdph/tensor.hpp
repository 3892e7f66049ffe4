#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace sgdph {

using Shape = std::vector<std::size_t>;
using Axes = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

// Right-aligned broadcast of two shapes. Every mismatched extent must be 1.
Shape broadcast_shape(const Shape& a, const Shape& b);

// Dense row-major tensor. Every extent is >= 1; a scalar is any tensor with
// a single element (typically shape {1}).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{1}) {}
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }
  static Tensor vector(std::initializer_list<T> values) {
    return Tensor(Shape{values.size()}, std::vector<T>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Multi-index access, bounds checked.
  T& at(std::initializer_list<std::size_t> index);
  const T& at(std::initializer_list<std::size_t> index) const;

  // The single element of a one-element tensor.
  T item() const;

  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<T> data_;
};

enum class Elementwise { kAdd, kSub, kMul, kDiv, kSqrt, kAbs, kRecip, kRelu, kExp, kLog };

enum class Padding { kValid, kSame };

// Single entry point over the elementwise kernels. Binary ops require b.
template <class T>
Tensor<T> elementwise(Elementwise op, const Tensor<T>& a,
                      const std::optional<Tensor<T>>& b = std::nullopt);

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <class T> Tensor<T> neg(const Tensor<T>& a);
template <class T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <class T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);
template <class T> Tensor<T> sqrt(const Tensor<T>& a);
template <class T> Tensor<T> abs(const Tensor<T>& a);
template <class T> Tensor<T> recip(const Tensor<T>& a);
template <class T> Tensor<T> relu(const Tensor<T>& a);
template <class T> Tensor<T> exp(const Tensor<T>& a);
template <class T> Tensor<T> log(const Tensor<T>& a);

// 1 where a > 0, else 0.
template <class T> Tensor<T> positive_mask(const Tensor<T>& a);
// -1, 0 or 1 per entry.
template <class T> Tensor<T> sign(const Tensor<T>& a);

template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> transpose(const Tensor<T>& a);

// Stride-1 cross-correlation, NCHW input, [C_out, C_in, k1, k2] kernel.
// kSame requires odd kernel extents.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, Padding padding);

// Adjoint of conv2d with respect to its input, given the output adjoint.
template <class T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& w,
                                const Shape& input_shape, Padding padding);

// Adjoint of conv2d with respect to its kernel, given the output adjoint.
template <class T>
Tensor<T> conv2d_backward_weight(const Tensor<T>& x, const Tensor<T>& grad_out,
                                 const Shape& weight_shape, Padding padding);

Shape conv2d_output_shape(const Shape& x, const Shape& w, Padding padding);

// Sum over the given axes. With keepdims the reduced axes stay as extent 1;
// otherwise they are dropped (an empty result shape becomes {1}).
template <class T>
Tensor<T> sum(const Tensor<T>& a, const Axes& axes, bool keepdims = true);
template <class T> T sum_all(const Tensor<T>& a);

template <class T> Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape);
// Inverse of broadcast_to: sums the broadcast axes back down to shape.
template <class T> Tensor<T> sum_to(const Tensor<T>& a, const Shape& shape);
template <class T> Tensor<T> reshape(const Tensor<T>& a, const Shape& shape);

template <class T>
struct Moments {
  Tensor<T> mean;
  Tensor<T> var;
};

// Population mean and variance over axes (divide by the element count),
// reduced axes kept with extent 1.
template <class T> Moments<T> moments(const Tensor<T>& x, const Axes& axes);

}  // namespace sgdph

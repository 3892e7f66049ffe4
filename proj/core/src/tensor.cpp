#include "sgdph/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sgdph/errors.hpp"

namespace sgdph {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + to_string(shape));
  }
}

// Strides of `shape` viewed inside the right-aligned broadcast shape `out`;
// broadcast axes get stride 0.
std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  const std::size_t lead = out.size() - shape.size();
  std::size_t stride = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[lead + i] = (shape[i] == 1 && out[lead + i] != 1) ? 0 : stride;
    stride *= shape[i];
  }
  return strides;
}

// Visits every element of `out` in row-major order together with the
// matching flat offsets into a and b. The innermost axis is a plain loop.
template <class F>
void broadcast_visit(const Shape& out, const std::vector<std::size_t>& sa,
                     const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t rank = out.size();
  const std::size_t inner = out[rank - 1];
  const std::size_t ia_step = sa[rank - 1];
  const std::size_t ib_step = sb[rank - 1];
  const std::size_t outer = element_count(out) / inner;
  std::vector<std::size_t> idx(rank, 0);
  std::size_t flat = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t ia = 0;
    std::size_t ib = 0;
    for (std::size_t d = 0; d + 1 < rank; ++d) {
      ia += idx[d] * sa[d];
      ib += idx[d] * sb[d];
    }
    for (std::size_t i = 0; i < inner; ++i) {
      f(flat++, ia, ib);
      ia += ia_step;
      ib += ib_step;
    }
    for (std::size_t d = rank - 1; d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
}

template <class T, class F>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor<T> out(a.shape());
    auto o = out.data();
    auto da = a.data();
    auto db = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(da[i], db[i]);
    return out;
  }
  const Shape shape = broadcast_shape(a.shape(), b.shape());
  Tensor<T> out(shape);
  auto o = out.data();
  auto da = a.data();
  auto db = b.data();
  broadcast_visit(shape, broadcast_strides(a.shape(), shape), broadcast_strides(b.shape(), shape),
                  [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = f(da[ia], db[ib]); });
  return out;
}

template <class T, class F>
Tensor<T> unary(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto da = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(da[i]);
  return out;
}

void check_axes(const Axes& axes, std::size_t rank) {
  std::vector<bool> seen(rank, false);
  for (auto ax : axes) {
    if (ax >= rank) {
      throw ShapeError("reduction axis " + std::to_string(ax) + " out of range for rank " +
                       std::to_string(rank));
    }
    if (seen[ax]) throw ShapeError("duplicate reduction axis " + std::to_string(ax));
    seen[ax] = true;
  }
}

std::size_t same_pad(std::size_t k, Padding padding) {
  if (padding == Padding::kValid) return 0;
  if (k % 2 == 0) throw ShapeError("same padding requires odd kernel extents");
  return (k - 1) / 2;
}

struct ConvGeometry {
  std::size_t n, c_in, h, w, c_out, k1, k2, oh, ow, p1, p2;
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, Padding padding) {
  if (x.size() != 4) throw ShapeError("conv2d input must be 4-D NCHW, got " + to_string(x));
  if (w.size() != 4) throw ShapeError("conv2d kernel must be 4-D, got " + to_string(w));
  if (x[1] != w[1]) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(x) + ", kernel " + to_string(w));
  }
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], 0, 0, 0, 0};
  g.p1 = same_pad(g.k1, padding);
  g.p2 = same_pad(g.k2, padding);
  if (g.k1 > g.h + 2 * g.p1 || g.k2 > g.w + 2 * g.p2) {
    throw ShapeError("conv2d kernel " + to_string(w) + " larger than input " + to_string(x));
  }
  g.oh = g.h + 2 * g.p1 - g.k1 + 1;
  g.ow = g.w + 2 * g.p2 - g.k2 + 1;
  return g;
}

// Output rows/cols [lo, hi) for which input index o + k - p is in [0, n).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out_n, std::size_t in_n,
                                                       std::size_t k, std::size_t p) {
  const std::size_t lo = p > k ? p - k : 0;
  const std::size_t hi = in_n + p > k ? std::min(out_n, in_n + p - k) : 0;
  return {lo, std::max(lo, hi)};
}

}  // namespace

template <class T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(element_count(shape_), fill);
}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != element_count(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
  }
}

template <class T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw ShapeError("index rank " + std::to_string(index.size()) + " does not match shape " +
                     to_string(shape_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template <class T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[offset(index)];
}

template <class T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

template <class T>
T Tensor<T>::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " + to_string(shape_));
  }
  return data_[0];
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  return Tensor(std::move(shape), data_);
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  return Tensor(std::move(shape), std::move(data_));
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, [](T x, T y) { return x + y; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, [](T x, T y) { return x - y; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, [](T x, T y) { return x * y; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  for (T v : b.data()) {
    if (v == T(0)) throw DomainError("division by zero");
  }
  return binary(a, b, [](T x, T y) { return x / y; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary(a, [](T x) { return -x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(a, [factor](T x) { return x * factor; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return unary(a, [offset](T x) { return x + offset; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  for (T v : a.data()) {
    if (v < T(0)) throw DomainError("sqrt of negative value " + std::to_string(v));
  }
  return unary(a, [](T x) { return std::sqrt(x); });
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary(a, [](T x) { return std::abs(x); });
}

template <class T>
Tensor<T> recip(const Tensor<T>& a) {
  for (T v : a.data()) {
    if (v == T(0)) throw DomainError("reciprocal of zero");
  }
  return unary(a, [](T x) { return T(1) / x; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(a, [](T x) { return x > T(0) ? x : T(0); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary(a, [](T x) { return std::exp(x); });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.data()) {
    if (v <= T(0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return unary(a, [](T x) { return std::log(x); });
}

template <class T>
Tensor<T> positive_mask(const Tensor<T>& a) {
  return unary(a, [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sign(const Tensor<T>& a) {
  return unary(a, [](T x) { return T((x > T(0)) - (x < T(0))); });
}

template <class T>
Tensor<T> elementwise(Elementwise op, const Tensor<T>& a, const std::optional<Tensor<T>>& b) {
  auto rhs = [&]() -> const Tensor<T>& {
    if (!b) throw std::invalid_argument("binary elementwise op needs a second operand");
    return *b;
  };
  switch (op) {
    case Elementwise::kAdd: return add(a, rhs());
    case Elementwise::kSub: return sub(a, rhs());
    case Elementwise::kMul: return mul(a, rhs());
    case Elementwise::kDiv: return div(a, rhs());
    case Elementwise::kSqrt: return sqrt(a);
    case Elementwise::kAbs: return abs(a);
    case Elementwise::kRecip: return recip(a);
    case Elementwise::kRelu: return relu(a);
    case Elementwise::kExp: return exp(a);
    case Elementwise::kLog: return log(a);
  }
  throw std::invalid_argument("unknown elementwise op");
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul dimension mismatch: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<T> out(Shape{m, n});
  auto o = out.data();
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = o.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = da[i * k + p];
      if (av == T(0)) continue;
      const T* brow = db.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose needs a 2-D tensor, got " + to_string(a.shape()));
  const std::size_t m = a.extent(0), n = a.extent(1);
  Tensor<T> out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  }
  return out;
}

Shape conv2d_output_shape(const Shape& x, const Shape& w, Padding padding) {
  const auto g = conv_geometry(x, w, padding);
  return {g.n, g.c_out, g.oh, g.ow};
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, Padding padding) {
  const auto g = conv_geometry(x.shape(), w.shape(), padding);
  Tensor<T> out(Shape{g.n, g.c_out, g.oh, g.ow});
  auto o = out.data();
  auto dx = x.data();
  auto dw = w.data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t co = 0; co < g.c_out; ++co) {
      T* oplane = o.data() + (n * g.c_out + co) * g.oh * g.ow;
      for (std::size_t ci = 0; ci < g.c_in; ++ci) {
        const T* iplane = dx.data() + (n * g.c_in + ci) * g.h * g.w;
        for (std::size_t kh = 0; kh < g.k1; ++kh) {
          const auto [r0, r1] = valid_range(g.oh, g.h, kh, g.p1);
          for (std::size_t kw = 0; kw < g.k2; ++kw) {
            const T wv = dw[((co * g.c_in + ci) * g.k1 + kh) * g.k2 + kw];
            if (wv == T(0)) continue;
            const auto [c0, c1] = valid_range(g.ow, g.w, kw, g.p2);
            for (std::size_t r = r0; r < r1; ++r) {
              T* orow = oplane + r * g.ow;
              const T* irow = iplane + (r + kh - g.p1) * g.w + kw - g.p2;
              for (std::size_t c = c0; c < c1; ++c) orow[c] += wv * irow[c];
            }
          }
        }
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& w,
                                const Shape& input_shape, Padding padding) {
  const auto g = conv_geometry(input_shape, w.shape(), padding);
  if (grad_out.shape() != Shape{g.n, g.c_out, g.oh, g.ow}) {
    throw ShapeError("conv2d output adjoint has shape " + to_string(grad_out.shape()));
  }
  Tensor<T> gx(input_shape);
  auto dgx = gx.data();
  auto dgy = grad_out.data();
  auto dw = w.data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t co = 0; co < g.c_out; ++co) {
      const T* gplane = dgy.data() + (n * g.c_out + co) * g.oh * g.ow;
      for (std::size_t ci = 0; ci < g.c_in; ++ci) {
        T* iplane = dgx.data() + (n * g.c_in + ci) * g.h * g.w;
        for (std::size_t kh = 0; kh < g.k1; ++kh) {
          const auto [r0, r1] = valid_range(g.oh, g.h, kh, g.p1);
          for (std::size_t kw = 0; kw < g.k2; ++kw) {
            const T wv = dw[((co * g.c_in + ci) * g.k1 + kh) * g.k2 + kw];
            if (wv == T(0)) continue;
            const auto [c0, c1] = valid_range(g.ow, g.w, kw, g.p2);
            for (std::size_t r = r0; r < r1; ++r) {
              const T* grow = gplane + r * g.ow;
              T* irow = iplane + (r + kh - g.p1) * g.w + kw - g.p2;
              for (std::size_t c = c0; c < c1; ++c) irow[c] += wv * grow[c];
            }
          }
        }
      }
    }
  }
  return gx;
}

template <class T>
Tensor<T> conv2d_backward_weight(const Tensor<T>& x, const Tensor<T>& grad_out,
                                 const Shape& weight_shape, Padding padding) {
  const auto g = conv_geometry(x.shape(), weight_shape, padding);
  if (grad_out.shape() != Shape{g.n, g.c_out, g.oh, g.ow}) {
    throw ShapeError("conv2d output adjoint has shape " + to_string(grad_out.shape()));
  }
  Tensor<T> gw(weight_shape);
  auto dgw = gw.data();
  auto dgy = grad_out.data();
  auto dx = x.data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t co = 0; co < g.c_out; ++co) {
      const T* gplane = dgy.data() + (n * g.c_out + co) * g.oh * g.ow;
      for (std::size_t ci = 0; ci < g.c_in; ++ci) {
        const T* iplane = dx.data() + (n * g.c_in + ci) * g.h * g.w;
        for (std::size_t kh = 0; kh < g.k1; ++kh) {
          const auto [r0, r1] = valid_range(g.oh, g.h, kh, g.p1);
          for (std::size_t kw = 0; kw < g.k2; ++kw) {
            const auto [c0, c1] = valid_range(g.ow, g.w, kw, g.p2);
            T acc = 0;
            for (std::size_t r = r0; r < r1; ++r) {
              const T* grow = gplane + r * g.ow;
              const T* irow = iplane + (r + kh - g.p1) * g.w + kw - g.p2;
              for (std::size_t c = c0; c < c1; ++c) acc += irow[c] * grow[c];
            }
            dgw[((co * g.c_in + ci) * g.k1 + kh) * g.k2 + kw] += acc;
          }
        }
      }
    }
  }
  return gw;
}

template <class T>
Tensor<T> sum(const Tensor<T>& a, const Axes& axes, bool keepdims) {
  check_axes(axes, a.rank());
  Shape kept = a.shape();
  for (auto ax : axes) kept[ax] = 1;

  // Neumaier-compensated accumulation per output element.
  std::vector<T> total(element_count(kept), T(0));
  std::vector<T> comp(total.size(), T(0));
  const auto strides = broadcast_strides(kept, a.shape());
  const std::vector<std::size_t> unit(a.rank(), 0);
  auto da = a.data();
  broadcast_visit(a.shape(), strides, unit, [&](std::size_t i, std::size_t io, std::size_t) {
    const T v = da[i];
    const T t = total[io] + v;
    if (std::abs(total[io]) >= std::abs(v)) {
      comp[io] += (total[io] - t) + v;
    } else {
      comp[io] += (v - t) + total[io];
    }
    total[io] = t;
  });
  for (std::size_t i = 0; i < total.size(); ++i) total[i] += comp[i];

  if (keepdims) return Tensor<T>(kept, std::move(total));
  Shape dropped;
  for (std::size_t d = 0; d < a.rank(); ++d) {
    if (std::find(axes.begin(), axes.end(), d) == axes.end()) dropped.push_back(a.extent(d));
  }
  if (dropped.empty()) dropped.push_back(1);
  return Tensor<T>(dropped, std::move(total));
}

template <class T>
T sum_all(const Tensor<T>& a) {
  Axes all(a.rank());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return sum(a, all, true).item();
}

template <class T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape) {
  if (broadcast_shape(a.shape(), shape) != shape) {
    throw ShapeError("cannot broadcast " + to_string(a.shape()) + " to " + to_string(shape));
  }
  if (a.shape() == shape) return a;
  Tensor<T> out(shape);
  auto o = out.data();
  auto da = a.data();
  const std::vector<std::size_t> unit(shape.size(), 0);
  broadcast_visit(shape, broadcast_strides(a.shape(), shape), unit,
                  [&](std::size_t i, std::size_t ia, std::size_t) { o[i] = da[ia]; });
  return out;
}

template <class T>
Tensor<T> sum_to(const Tensor<T>& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  if (broadcast_shape(shape, a.shape()) != a.shape()) {
    throw ShapeError("cannot sum " + to_string(a.shape()) + " down to " + to_string(shape));
  }
  const std::size_t lead = a.rank() - shape.size();
  Axes axes;
  for (std::size_t d = 0; d < a.rank(); ++d) {
    if (d < lead || (shape[d - lead] == 1 && a.extent(d) != 1)) axes.push_back(d);
  }
  return sum(a, axes, true).reshaped(shape);
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape) {
  if (element_count(shape) != a.size()) {
    throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  return a.reshaped(shape);
}

template <class T>
Moments<T> moments(const Tensor<T>& x, const Axes& axes) {
  if (axes.empty()) throw ShapeError("moments needs at least one reduction axis");
  check_axes(axes, x.rank());
  std::size_t m = 1;
  for (auto ax : axes) m *= x.extent(ax);
  const T inv_m = T(1) / static_cast<T>(m);
  Tensor<T> mean = scale(sum(x, axes, true), inv_m);
  Tensor<T> centered = sub(x, mean);
  Tensor<T> var = scale(sum(mul(centered, centered), axes, true), inv_m);
  return {std::move(mean), std::move(var)};
}

#define SGDPH_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                    \
  template Tensor<T> elementwise(Elementwise, const Tensor<T>&, const std::optional<Tensor<T>>&); \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> neg(const Tensor<T>&);                                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> sqrt(const Tensor<T>&);                                                   \
  template Tensor<T> abs(const Tensor<T>&);                                                    \
  template Tensor<T> recip(const Tensor<T>&);                                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> exp(const Tensor<T>&);                                                    \
  template Tensor<T> log(const Tensor<T>&);                                                    \
  template Tensor<T> positive_mask(const Tensor<T>&);                                          \
  template Tensor<T> sign(const Tensor<T>&);                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, Padding);                      \
  template Tensor<T> conv2d_backward_input(const Tensor<T>&, const Tensor<T>&, const Shape&,   \
                                           Padding);                                           \
  template Tensor<T> conv2d_backward_weight(const Tensor<T>&, const Tensor<T>&, const Shape&,  \
                                            Padding);                                          \
  template Tensor<T> sum(const Tensor<T>&, const Axes&, bool);                                 \
  template T sum_all(const Tensor<T>&);                                                        \
  template Tensor<T> broadcast_to(const Tensor<T>&, const Shape&);                             \
  template Tensor<T> sum_to(const Tensor<T>&, const Shape&);                                   \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                  \
  template Moments<T> moments(const Tensor<T>&, const Axes&);

SGDPH_INSTANTIATE(float)
SGDPH_INSTANTIATE(double)

#undef SGDPH_INSTANTIATE

}  // namespace sgdph

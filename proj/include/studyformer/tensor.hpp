#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Every operation records its inputs and a backward closure on the result node
// when at least one input requires a gradient. backward() walks the recorded
// graph once in reverse topological order, accumulating into each input's
// gradient buffer, then releases the closures so intermediate activations can
// be freed. A graph and its tensors belong to a single thread.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "studyformer/errors.hpp"

namespace studyformer {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(detail::NodePtr<T> node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
    }
    if (values.size() != shape_numel(shape)) {
      throw DimensionError("tensor of shape " + shape_string(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " elements, got " +
                           std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Direct element access for initialisation and optimiser updates only.
  std::span<T> mutable_data() { return node_->value; }
  T operator[](std::size_t flat) const { return node_->value[flat]; }
  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  // Leaf toggle. Enabling allocates a zeroed gradient; disabling frees it.
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) {
      node_->grad.assign(node_->value.size(), T(0));
    } else {
      node_->grad.clear();
      node_->grad.shrink_to_fit();
    }
  }
  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  const detail::NodePtr<T>& node() const { return node_; }

 private:
  detail::NodePtr<T> node_;
};

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// While alive, operations on this thread record no graph (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<NodePtr<T>> inputs,
                  std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  const bool any = grad_mode() && std::any_of(inputs.begin(), inputs.end(),
                                              [](const NodePtr<T>& n) { return n->requires_grad; });
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

template <class T>
void require_rank(const char* op, const Tensor<T>& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_string(a.shape()));
  }
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_op<T>(x.shape(), std::move(out), {x.node()}, [deriv](Node<T>& self) {
    auto& src = *self.inputs[0];
    auto& g = src.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(src.value[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = self.inputs[k];
      if (!in->requires_grad) continue;
      const T sign = k == 0 ? T(1) : T(-1);
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.value[i];
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.value[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary(x, [factor](T v) { return v * factor; },
                       [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return detail::unary(x, [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); },
                       [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// tanh approximation
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T c = T(0.7978845608028654);
  constexpr T k = T(0.044715);
  return detail::unary(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(c * (v + k * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * k * v * v);
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// Natural log; inputs must be positive.
template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> pow_scalar(const Tensor<T>& x, T exponent) {
  return detail::unary(
      x, [exponent](T v) { return std::pow(v, exponent); },
      [exponent](T v, T) { return exponent == T(0) ? T(0) : exponent * std::pow(v, exponent - T(1)); });
}

// Gradient passes where lo <= x <= hi, zero outside.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
                       [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return detail::make_op<T>(Shape{}, {total}, {x.node()}, [](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::MatrixMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatrixMap<T>(a.data().data(), m, k) * detail::ConstMatrixMap<T>(b.data().data(), k, n);
  return detail::make_op<T>(Shape{a.dim(0), b.dim(1)}, std::move(out), {a.node(), b.node()},
                            [m, k, n](detail::Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    const detail::ConstMatrixMap<T> dout(self.grad.data(), m, n);
    if (x.requires_grad) {
      detail::MatrixMap<T>(x.grad_buffer().data(), m, k).noalias() +=
          dout * detail::ConstMatrixMap<T>(y.value.data(), k, n).transpose();
    }
    if (y.requires_grad) {
      detail::MatrixMap<T>(y.grad_buffer().data(), k, n).noalias() +=
          detail::ConstMatrixMap<T>(x.value.data(), m, k).transpose() * dout;
    }
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank("transpose", x, 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return detail::make_op<T>(Shape{c, r}, std::move(out), {x.node()}, [r, c](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

// x[N x D] + bias[D] added to every row.
template <class T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_rank("add_row_bias", x, 2);
  if (bias.size() != x.dim(1)) {
    throw DimensionError("add_row_bias: bias " + shape_string(bias.shape()) + " does not match rows of " +
                         shape_string(x.shape()));
  }
  const std::size_t rows = x.dim(0), d = x.dim(1);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] + bias[j];
  return detail::make_op<T>(x.shape(), std::move(out), {x.node(), bias.node()},
                            [rows, d](detail::Node<T>& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
    }
  });
}

// x[B x C x H x W] + bias[C].
template <class T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_rank("add_channel_bias", x, 4);
  if (bias.size() != x.dim(1)) {
    throw DimensionError("add_channel_bias: bias " + shape_string(bias.shape()) + " does not match channels of " +
                         shape_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<T> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t base = (b * ch + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[base + p] = x[base + p] + bias[c];
    }
  return detail::make_op<T>(x.shape(), std::move(out), {x.node(), bias.node()},
                            [batch, ch, plane](detail::Node<T>& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < ch; ++c) {
          const std::size_t base = (b * ch + c) * plane;
          T acc = T(0);
          for (std::size_t p = 0; p < plane; ++p) acc += self.grad[base + p];
          g[c] += acc;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalisation
// ---------------------------------------------------------------------------

// Softmax over the last axis with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) throw DimensionError("softmax: rank-0 input");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  std::vector<T> out(x.size());
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = in.data() + r * width;
    T* dst = out.data() + r * width;
    const T peak = *std::max_element(src, src + width);
    T total = T(0);
    for (std::size_t j = 0; j < width; ++j) {
      dst[j] = std::exp(src[j] - peak);
      total += dst[j];
    }
    for (std::size_t j = 0; j < width; ++j) dst[j] /= total;
  }
  return detail::make_op<T>(x.shape(), std::move(out), {x.node()}, [rows, width](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * width;
      const T* dy = self.grad.data() + r * width;
      T dot = T(0);
      for (std::size_t j = 0; j < width; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < width; ++j) g[r * width + j] += y[j] * (dy[j] - dot);
    }
  });
}

// Layer normalisation over the last axis: (x - mean) / sqrt(var + eps) * gamma + beta,
// with the biased variance.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: rank-0 input");
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: gamma " + shape_string(gamma.shape()) + " / beta " +
                         shape_string(beta.shape()) + " do not match last axis of " + shape_string(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(rows);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = in.data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += src[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (src[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gamma[j] + beta[j];
    }
  }
  return detail::make_op<T>(
      x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& self) {
        auto& xin = *self.inputs[0];
        auto& gam = *self.inputs[1];
        auto& bet = *self.inputs[2];
        if (gam.requires_grad) {
          auto& g = gam.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j] * xhat[r * d + j];
        }
        if (bet.requires_grad) {
          auto& g = bet.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
        }
        if (xin.requires_grad) {
          auto& g = xin.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              const T dxhat = self.grad[r * d + j] * gam.value[j];
              mean_dxhat += dxhat;
              mean_dxhat_xhat += dxhat * xhat[r * d + j];
            }
            mean_dxhat /= static_cast<T>(d);
            mean_dxhat_xhat /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dxhat = self.grad[r * d + j] * gam.value[j];
              g[r * d + j] += rstd[r] * (dxhat - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution and pooling (NCHW)
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, stride, padding, out_h, out_w;
  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

template <class T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  const std::size_t p = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T(0) : src[ix];
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* image) {
  const std::size_t p = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) dst[ix] += row[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation (no kernel flip) of input[B x Cin x H x W] with
// kernel[Cout x Cin x kh x kw].
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t padding) {
  if (input.rank() != 4 || kernel.rank() != 4 || input.dim(1) != kernel.dim(1)) {
    throw DimensionError("conv2d: incompatible input " + shape_string(input.shape()) + " and kernel " +
                         shape_string(kernel.shape()));
  }
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t batch = input.dim(0), cout = kernel.dim(0);
  detail::ConvGeometry geo{input.dim(1), input.dim(2), input.dim(3), kernel.dim(2), kernel.dim(3),
                           stride, padding, 0, 0};
  if (geo.height + 2 * padding < geo.kh || geo.width + 2 * padding < geo.kw) {
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) + " larger than padded input " +
                         shape_string(input.shape()) + " with padding " + std::to_string(padding));
  }
  geo.out_h = (geo.height + 2 * padding - geo.kh) / stride + 1;
  geo.out_w = (geo.width + 2 * padding - geo.kw) / stride + 1;

  const auto rows = static_cast<Eigen::Index>(geo.rows());
  const auto cols = static_cast<Eigen::Index>(geo.cols());
  const auto co = static_cast<Eigen::Index>(cout);
  const std::size_t in_stride = geo.channels * geo.height * geo.width;
  std::vector<T> out(batch * cout * geo.cols());
  std::vector<T> buffer(geo.rows() * geo.cols());
  const detail::ConstMatrixMap<T> k_mat(kernel.data().data(), co, rows);
  for (std::size_t b = 0; b < batch; ++b) {
    detail::im2col(input.data().data() + b * in_stride, geo, buffer.data());
    detail::MatrixMap<T>(out.data() + b * cout * geo.cols(), co, cols).noalias() =
        k_mat * detail::ConstMatrixMap<T>(buffer.data(), rows, cols);
  }
  return detail::make_op<T>(
      Shape{batch, cout, geo.out_h, geo.out_w}, std::move(out), {input.node(), kernel.node()},
      [geo, batch, cout, in_stride, rows, cols, co](detail::Node<T>& self) {
        auto& x = *self.inputs[0];
        auto& k = *self.inputs[1];
        std::vector<T> scratch(geo.rows() * geo.cols());
        for (std::size_t b = 0; b < batch; ++b) {
          const detail::ConstMatrixMap<T> dout(self.grad.data() + b * cout * geo.cols(), co, cols);
          if (k.requires_grad) {
            detail::im2col(x.value.data() + b * in_stride, geo, scratch.data());
            detail::MatrixMap<T>(k.grad_buffer().data(), co, rows).noalias() +=
                dout * detail::ConstMatrixMap<T>(scratch.data(), rows, cols).transpose();
          }
          if (x.requires_grad) {
            detail::MatrixMap<T>(scratch.data(), rows, cols).noalias() =
                detail::ConstMatrixMap<T>(k.value.data(), co, rows).transpose() * dout;
            detail::col2im_add(scratch.data(), geo, x.grad_buffer().data() + b * in_stride);
          }
        }
      });
}

// Non-overlapping factor x factor max pooling; extents must divide evenly.
// Ties resolve to the first element in row-major window order.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t factor) {
  detail::require_rank("max_pool2d", x, 4);
  if (factor == 0 || x.dim(2) % factor != 0 || x.dim(3) % factor != 0) {
    throw DimensionError("max_pool2d: factor " + std::to_string(factor) + " does not divide " +
                         shape_string(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / factor, ow = w / factor;
  std::vector<T> out(planes * oh * ow);
  std::vector<std::uint32_t> argmax(out.size());
  const auto in = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + oy * factor * w + ox * factor;
        for (std::size_t dy = 0; dy < factor; ++dy)
          for (std::size_t dx = 0; dx < factor; ++dx) {
            const std::size_t idx = p * h * w + (oy * factor + dy) * w + ox * factor + dx;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = in[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
  return detail::make_op<T>(Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {x.node()},
                            [argmax = std::move(argmax)](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
  });
}

// [B x C x H x W] -> [B x C]
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank("global_avg_pool", x, 4);
  const std::size_t planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
  std::vector<T> out(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    T acc = T(0);
    for (std::size_t i = 0; i < area; ++i) acc += x[p * area + i];
    out[p] = acc / static_cast<T>(area);
  }
  return detail::make_op<T>(Shape{x.dim(0), x.dim(1)}, std::move(out), {x.node()},
                            [planes, area](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T inv = T(1) / static_cast<T>(area);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < area; ++i) g[p * area + i] += self.grad[p] * inv;
  });
}

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_op<T>(std::move(shape), std::move(out), {x.node()}, [](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// Columns [start, start + count) of a matrix.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_rank("slice_cols", x, 2);
  const std::size_t rows = x.dim(0), width = x.dim(1);
  if (count == 0 || start + count > width) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_string(x.shape()));
  }
  std::vector<T> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * width + start, count, out.data() + r * count);
  return detail::make_op<T>(Shape{rows, count}, std::move(out), {x.node()},
                            [rows, width, start, count](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < count; ++j) g[r * width + start + j] += self.grad[r * count + j];
  });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_rank("slice_rows", x, 2);
  const std::size_t width = x.dim(1);
  if (count == 0 || start + count > x.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_string(x.shape()));
  }
  std::vector<T> out(x.data().begin() + static_cast<std::ptrdiff_t>(start * width),
                     x.data().begin() + static_cast<std::ptrdiff_t>((start + count) * width));
  return detail::make_op<T>(Shape{count, width}, std::move(out), {x.node()},
                            [start, width](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * width + i] += self.grad[i];
  });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts.front().dim(0);
  std::size_t width = 0;
  std::vector<std::size_t> offsets;
  std::vector<detail::NodePtr<T>> nodes;
  for (const auto& p : parts) {
    detail::require_rank("concat_cols", p, 2);
    if (p.dim(0) != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    }
    offsets.push_back(width);
    width += p.dim(1);
    nodes.push_back(p.node());
  }
  std::vector<T> out(rows * width);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(parts[k].data().data() + r * w, w, out.data() + r * width + offsets[k]);
  }
  return detail::make_op<T>(Shape{rows, width}, std::move(out), std::move(nodes),
                            [rows, width, offsets](detail::Node<T>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      const std::size_t w = in.shape[1];
      auto& g = in.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) g[r * w + j] += self.grad[r * width + offsets[k] + j];
    }
  });
}

// Concatenate along axis 0. All parts must agree on the trailing extents.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const Shape tail(parts.front().shape().begin() + 1, parts.front().shape().end());
  std::size_t lead = 0;
  std::vector<detail::NodePtr<T>> nodes;
  std::vector<T> out;
  for (const auto& p : parts) {
    if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw DimensionError("concat_rows: trailing extents differ " + shape_string(parts.front().shape()) +
                           " vs " + shape_string(p.shape()));
    }
    lead += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
    nodes.push_back(p.node());
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return detail::make_op<T>(std::move(shape), std::move(out), std::move(nodes), [](detail::Node<T>& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->value.size();
      if (in->requires_grad) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

// Element `index` along axis 0, dropping that axis.
template <class T>
Tensor<T> select(const Tensor<T>& x, std::size_t index) {
  if (x.rank() == 0 || index >= x.dim(0)) {
    throw DimensionError("select: index " + std::to_string(index) + " out of range for " + shape_string(x.shape()));
  }
  const Shape shape(x.shape().begin() + 1, x.shape().end());
  const std::size_t n = shape_numel(shape);
  std::vector<T> out(x.data().begin() + static_cast<std::ptrdiff_t>(index * n),
                     x.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * n));
  return detail::make_op<T>(shape, std::move(out), {x.node()}, [index, n](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g[index * n + i] += self.grad[i];
  });
}

// Stack equal-shape tensors along a new leading axis.
template <class T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("stack: no inputs");
  for (const auto& p : parts) detail::require_same_shape("stack", parts.front(), p);
  std::vector<Tensor<T>> lifted;
  lifted.reserve(parts.size());
  Shape unit{1};
  unit.insert(unit.end(), parts.front().shape().begin(), parts.front().shape().end());
  for (const auto& p : parts) lifted.push_back(reshape(p, unit));
  return concat_rows(lifted);
}

// Elementwise maximum over equal-shape tensors. The gradient goes to the first
// input attaining the maximum.
template <class T>
Tensor<T> elementwise_max(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("elementwise_max: no inputs");
  std::vector<detail::NodePtr<T>> nodes;
  for (const auto& p : parts) {
    detail::require_same_shape("elementwise_max", parts.front(), p);
    nodes.push_back(p.node());
  }
  const std::size_t n = parts.front().size();
  std::vector<T> out(parts.front().data().begin(), parts.front().data().end());
  std::vector<std::uint32_t> winner(n, 0);
  for (std::size_t k = 1; k < parts.size(); ++k)
    for (std::size_t i = 0; i < n; ++i)
      if (parts[k][i] > out[i]) {
        out[i] = parts[k][i];
        winner[i] = static_cast<std::uint32_t>(k);
      }
  return detail::make_op<T>(parts.front().shape(), std::move(out), std::move(nodes),
                            [winner = std::move(winner)](detail::Node<T>& self) {
    for (std::size_t i = 0; i < winner.size(); ++i) {
      auto& in = *self.inputs[winner[i]];
      if (in.requires_grad) in.grad_buffer()[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Populate gradients of every requires-grad leaf reachable from `loss`.
// Gradients accumulate; call zero_grad() on leaves between steps. The recorded
// graph is consumed.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  auto* root = loss.node().get();
  if (!root->requires_grad) return;

  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward && node->grad.size() == node->value.size()) node->backward(*node);
  }
  for (auto* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->inputs.clear();
    }
  }
}

}  // namespace studyformer

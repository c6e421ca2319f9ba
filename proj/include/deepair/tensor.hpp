#pragma once

// Minimal differentiable core: dense tensors, the forward ops the forecaster
// needs, a single-use gradient tape, SGD and checkpoint I/O.
//
// Tensors are templated on the storage scalar. Training instantiates float;
// finite-difference checks instantiate double. Reductions accumulate in double
// regardless of the storage type.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "deepair/common.hpp"

namespace deepair::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

enum class Mode { train, eval };

namespace detail {
template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first touched
  bool requires_grad = false;
};
}  // namespace detail

/// Shared handle to a dense row-major array with an optional gradient slot.
/// Copies alias the same storage; use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    node_->data.assign(shape_size(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size())
      throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " + shape_string(shape));
    Tensor t;
    t.node_ = std::make_shared<detail::Node<T>>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  explicit operator bool() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T* ptr() { return node_->data.data(); }
  const T* ptr() const { return node_->data.data(); }
  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }

  /// Gradient slot, allocated (zeroed) on first access.
  std::span<T> grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }
  void drop_grad() { node_->grad.clear(); node_->grad.shrink_to_fit(); }

  bool same(const Tensor& o) const { return node_ == o.node_; }

  Tensor clone() const {
    Tensor t = from(shape(), node_->data, requires_grad());
    return t;
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> v(node_->data.begin(), node_->data.end());
    return Tensor<U>::from(shape(), std::move(v), requires_grad());
  }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

template <class T>
void check_finite(const Tensor<T>& t, const std::string& op) {
  for (T v : t.data())
    if (!std::isfinite(v)) throw NonFiniteError(op);
}

template <class T>
void check_finite_grad(const Tensor<T>& t, const std::string& op) {
  if (!t.requires_grad() || !t.has_grad()) return;
  for (T v : t.grad())
    if (!std::isfinite(v)) throw NonFiniteError(op + " (backward)");
}

/// Records ops during a forward pass and replays their chain rule in reverse.
/// A tape is single-use: a second backward() is an error.
template <class T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }
  const std::string& op_name(std::size_t i) const { return entries_.at(i).op; }

  bool tracks(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    for (auto* t : inputs)
      if (t && *t && t->requires_grad()) return true;
    return false;
  }

  void record(std::string op, std::vector<Tensor<T>> inputs, std::function<void()> backward) {
    if (consumed_) throw Error("tensorcore", "cannot record on a tape after backward()");
    entries_.push_back({std::move(op), std::move(inputs), std::move(backward)});
  }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded op's backward once, newest first.
  void backward(const Tensor<T>& loss) {
    if (consumed_) throw Error("tensorcore", "tape already consumed by a previous backward()");
    if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_string(loss.shape()));
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      it->backward();
      for (const auto& in : it->inputs) check_finite_grad(in, it->op);
    }
    entries_.clear();
  }

 private:
  struct Entry {
    std::string op;
    std::vector<Tensor<T>> inputs;
    std::function<void()> backward;
  };
  bool recording_;
  bool consumed_ = false;
  std::vector<Entry> entries_;
};

namespace detail {

template <class T>
Tensor<T> make_output(Shape shape, bool track) {
  return Tensor<T>(std::move(shape), T(0), track);
}

template <class T>
void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

struct ConvDims {
  std::size_t n, ci, co, h, w, k;
  std::size_t pad() const { return k / 2; }
  std::size_t padded_width() const { return w + 2 * pad(); }
  std::size_t padded_height() const { return h + 2 * pad(); }
  // Columns per sample: output rows laid out with the padded row stride; the
  // trailing 2*pad columns of every row are scratch and carry no signal.
  std::size_t span() const { return h * padded_width(); }
  std::size_t taps() const { return ci * k * k; }
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Unfolds a zero-padded input into [C_in*k*k, N*span] so convolution is one GEMM.
template <class T>
RowMatrix im2col(const T* in, const ConvDims& d) {
  const std::size_t p = d.pad(), wp = d.padded_width(), L = d.span();
  RowMatrix cols(static_cast<Eigen::Index>(d.taps()), static_cast<Eigen::Index>(d.n * L));
  std::vector<double> padded(d.padded_height() * wp + 2 * p);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t ci = 0; ci < d.ci; ++ci) {
      std::fill(padded.begin(), padded.end(), 0.0);
      const T* src = in + (n * d.ci + ci) * d.h * d.w;
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t x = 0; x < d.w; ++x) padded[(y + p) * wp + x + p] = static_cast<double>(src[y * d.w + x]);
      for (std::size_t ky = 0; ky < d.k; ++ky)
        for (std::size_t kx = 0; kx < d.k; ++kx) {
          const std::size_t row = (ci * d.k + ky) * d.k + kx;
          const double* from = padded.data() + ky * wp + kx;
          double* to = cols.data() + row * cols.cols() + n * L;
          std::copy_n(from, L, to);
        }
    }
  return cols;
}

template <class T>
RowMatrix kernel_matrix(const T* wt, const ConvDims& d) {
  RowMatrix m(static_cast<Eigen::Index>(d.co), static_cast<Eigen::Index>(d.taps()));
  std::transform(wt, wt + d.co * d.taps(), m.data(), [](T v) { return static_cast<double>(v); });
  return m;
}

template <class T>
void conv_forward(const T* in, const T* wt, const T* bias, T* out, const ConvDims& d) {
  const RowMatrix y = kernel_matrix(wt, d) * im2col(in, d);
  const std::size_t wp = d.padded_width(), L = d.span();
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t co = 0; co < d.co; ++co) {
      const double b = bias ? static_cast<double>(bias[co]) : 0.0;
      const double* src = y.data() + co * y.cols() + n * L;
      T* dst = out + (n * d.co + co) * d.h * d.w;
      for (std::size_t r = 0; r < d.h; ++r)
        for (std::size_t x = 0; x < d.w; ++x) dst[r * d.w + x] = static_cast<T>(src[r * wp + x] + b);
    }
}

/// Output gradient in the padded-stride column layout, scratch columns zeroed.
template <class T>
RowMatrix grad_columns(const T* gout, const ConvDims& d) {
  const std::size_t wp = d.padded_width(), L = d.span();
  RowMatrix g = RowMatrix::Zero(static_cast<Eigen::Index>(d.co), static_cast<Eigen::Index>(d.n * L));
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t co = 0; co < d.co; ++co) {
      const T* src = gout + (n * d.co + co) * d.h * d.w;
      double* dst = g.data() + co * g.cols() + n * L;
      for (std::size_t r = 0; r < d.h; ++r)
        for (std::size_t x = 0; x < d.w; ++x) dst[r * wp + x] = static_cast<double>(src[r * d.w + x]);
    }
  return g;
}

template <class T>
void conv_backward_input(const RowMatrix& g, const T* wt, T* gin, const ConvDims& d) {
  const RowMatrix dcols = kernel_matrix(wt, d).transpose() * g;
  const std::size_t p = d.pad(), wp = d.padded_width(), L = d.span();
  std::vector<double> padded(d.padded_height() * wp + 2 * p);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t ci = 0; ci < d.ci; ++ci) {
      std::fill(padded.begin(), padded.end(), 0.0);
      for (std::size_t ky = 0; ky < d.k; ++ky)
        for (std::size_t kx = 0; kx < d.k; ++kx) {
          const std::size_t row = (ci * d.k + ky) * d.k + kx;
          const double* from = dcols.data() + row * dcols.cols() + n * L;
          double* to = padded.data() + ky * wp + kx;
          for (std::size_t i = 0; i < L; ++i) to[i] += from[i];
        }
      T* dst = gin + (n * d.ci + ci) * d.h * d.w;
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t x = 0; x < d.w; ++x) dst[y * d.w + x] += static_cast<T>(padded[(y + p) * wp + x + p]);
    }
}

template <class T>
void conv_backward_weight(const RowMatrix& g, const T* in, T* gw, const ConvDims& d) {
  const RowMatrix dw = g * im2col(in, d).transpose();
  for (std::size_t i = 0; i < d.co * d.taps(); ++i) gw[i] += static_cast<T>(dw.data()[i]);
}

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

/// Shape-preserving cross-correlation with zero padding (k-1)/2.
/// Input [C_in,H,W] or [N,C_in,H,W]; kernel [C_out,C_in,k,k]; bias [C_out] or empty.
template <class T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias = {}) {
  detail::require<T>(x.rank() == 3 || x.rank() == 4, "conv2d input must be [C,H,W] or [N,C,H,W]");
  detail::require<T>(kernel.rank() == 4 && kernel.dim(2) == kernel.dim(3) && (kernel.dim(2) == 1 || kernel.dim(2) == 3),
                     "conv2d kernel must be [C_out,C_in,k,k] with k in {1,3}");
  const bool batched = x.rank() == 4;
  detail::ConvDims d{batched ? x.dim(0) : 1, x.dim(batched ? 1 : 0), kernel.dim(0), x.dim(batched ? 2 : 1),
                     x.dim(batched ? 3 : 2), kernel.dim(2)};
  if (kernel.dim(1) != d.ci)
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(d.ci) + " channels, kernel expects " +
                     std::to_string(kernel.dim(1)));
  if (bias) detail::require<T>(bias.size() == d.co, "conv2d bias must have C_out entries");
  const bool track = tape.tracks({&x, &kernel, &bias});
  Shape out_shape = batched ? Shape{d.n, d.co, d.h, d.w} : Shape{d.co, d.h, d.w};
  auto out = detail::make_output<T>(out_shape, track);
  detail::conv_forward(x.ptr(), kernel.ptr(), bias ? bias.ptr() : nullptr, out.ptr(), d);
  check_finite(out, "conv2d");
  if (track) {
    tape.record("conv2d", {x, kernel, bias}, [x, kernel, bias, out, d]() mutable {
      const T* g = out.grad().data();
      const auto gcols = detail::grad_columns(g, d);
      if (x.requires_grad()) detail::conv_backward_input(gcols, kernel.ptr(), x.grad().data(), d);
      if (kernel.requires_grad()) detail::conv_backward_weight(gcols, x.ptr(), kernel.grad().data(), d);
      if (bias && bias.requires_grad()) {
        auto gb = bias.grad();
        const std::size_t hw = d.h * d.w;
        for (std::size_t co = 0; co < d.co; ++co) {
          double s = 0;
          for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t i = 0; i < hw; ++i) s += g[(n * d.co + co) * hw + i];
          gb[co] += static_cast<T>(s);
        }
      }
    });
  }
  return out;
}

/// Running statistics of one batch-norm layer (non-trainable).
template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

/// Per-channel batch normalization over [N,]C,H,W followed by scale/shift.
/// Train mode normalizes with batch statistics and updates the running ones;
/// eval mode normalizes with the running statistics.
template <class T>
Tensor<T> batchnorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                    BatchNormState<T>& state, Mode mode) {
  detail::require<T>(x.rank() == 3 || x.rank() == 4, "batchnorm input must be [C,H,W] or [N,C,H,W]");
  const bool batched = x.rank() == 4;
  const std::size_t n = batched ? x.dim(0) : 1;
  const std::size_t c = x.dim(batched ? 1 : 0);
  const std::size_t hw = x.size() / (n * c);
  detail::require<T>(scale.size() == c && shift.size() == c, "batchnorm scale/shift must have C entries");
  detail::require<T>(state.running_mean.size() == c && state.running_var.size() == c, "batchnorm running stats must have C entries");
  const std::size_t m = n * hw;
  if (mode == Mode::train && m < 2) throw ShapeError("batchnorm in train mode needs batch*H*W >= 2");

  const bool track = tape.tracks({&x, &scale, &shift});
  auto out = detail::make_output<T>(x.shape(), track);
  std::vector<double> mean(c), inv_std(c);
  const T* xp = x.ptr();
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (mode == Mode::train) {
      double s = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) s += xp[(b * c + ch) * hw + i];
      const double mu = s / static_cast<double>(m);
      double v = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const double dlt = xp[(b * c + ch) * hw + i] - mu;
          v += dlt * dlt;
        }
      const double var = v / static_cast<double>(m);
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + kBatchNormEps);
      auto rm = state.running_mean.data();
      auto rv = state.running_var.data();
      rm[ch] = static_cast<T>((1.0 - kBatchNormMomentum) * rm[ch] + kBatchNormMomentum * mu);
      rv[ch] = static_cast<T>((1.0 - kBatchNormMomentum) * rv[ch] +
                              kBatchNormMomentum * var * static_cast<double>(m) / static_cast<double>(m - 1));
    } else {
      mean[ch] = state.running_mean.data()[ch];
      inv_std[ch] = 1.0 / std::sqrt(static_cast<double>(state.running_var.data()[ch]) + kBatchNormEps);
    }
  }
  std::vector<T> xhat(track ? x.size() : 0);
  T* op = out.ptr();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double g = scale.data()[ch], sh = shift.data()[ch];
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        const double xh = (xp[idx] - mean[ch]) * inv_std[ch];
        if (track) xhat[idx] = static_cast<T>(xh);
        op[idx] = static_cast<T>(g * xh + sh);
      }
    }
  check_finite(out, "batchnorm");
  if (track) {
    tape.record("batchnorm", {x, scale, shift},
                [x, scale, shift, out, xhat = std::move(xhat), inv_std, n, c, hw, m, mode]() mutable {
                  const auto g = out.grad();
                  std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                  for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t ch = 0; ch < c; ++ch)
                      for (std::size_t i = 0; i < hw; ++i) {
                        const std::size_t idx = (b * c + ch) * hw + i;
                        sum_g[ch] += g[idx];
                        sum_gx[ch] += static_cast<double>(g[idx]) * xhat[idx];
                      }
                  if (scale.requires_grad()) {
                    auto gs = scale.grad();
                    for (std::size_t ch = 0; ch < c; ++ch) gs[ch] += static_cast<T>(sum_gx[ch]);
                  }
                  if (shift.requires_grad()) {
                    auto gsh = shift.grad();
                    for (std::size_t ch = 0; ch < c; ++ch) gsh[ch] += static_cast<T>(sum_g[ch]);
                  }
                  if (!x.requires_grad()) return;
                  auto gx = x.grad();
                  const double md = static_cast<double>(m);
                  for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const double gamma = scale.data()[ch];
                      for (std::size_t i = 0; i < hw; ++i) {
                        const std::size_t idx = (b * c + ch) * hw + i;
                        double v;
                        if (mode == Mode::train) {
                          v = gamma * inv_std[ch] / md *
                              (md * g[idx] - sum_g[ch] - static_cast<double>(xhat[idx]) * sum_gx[ch]);
                        } else {
                          v = gamma * inv_std[ch] * g[idx];
                        }
                        gx[idx] += static_cast<T>(v);
                      }
                    }
                });
  }
  return out;
}

template <class T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  const bool track = tape.tracks({&x});
  auto out = detail::make_output<T>(x.shape(), track);
  const T* xp = x.ptr();
  T* op = out.ptr();
  for (std::size_t i = 0; i < x.size(); ++i) op[i] = xp[i] > T(0) ? xp[i] : T(0);
  if (track) {
    tape.record("relu", {x}, [x, out]() mutable {
      auto gx = x.grad();
      const auto g = out.grad();
      const T* xp = x.ptr();
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (xp[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  const bool track = tape.tracks({&a, &b});
  auto out = detail::make_output<T>(a.shape(), track);
  for (std::size_t i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
  check_finite(out, "add");
  if (track) {
    tape.record("add", {a, b}, [a, b, out]() mutable {
      const auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

/// Row `index` of an embedding table [V,d].
template <class T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::size_t index) {
  detail::require<T>(table.rank() == 2, "embedding table must be [V,d]");
  if (index >= table.dim(0))
    throw Error("tensorcore", "embedding index " + std::to_string(index) + " out of range for table with " +
                                  std::to_string(table.dim(0)) + " rows");
  const std::size_t d = table.dim(1);
  const bool track = tape.tracks({&table});
  auto out = detail::make_output<T>({d}, track);
  std::copy_n(table.ptr() + index * d, d, out.ptr());
  if (track) {
    tape.record("embedding", {table}, [table, out, index, d]() mutable {
      auto gt = table.grad();
      const auto g = out.grad();
      for (std::size_t j = 0; j < d; ++j) gt[index * d + j] += g[j];
    });
  }
  return out;
}

/// y = W x + b with W [d_out,d_in].
template <class T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require<T>(x.rank() == 1 && w.rank() == 2 && w.dim(1) == x.size() && b.size() == w.dim(0),
                     "linear: expected x[d_in], W[d_out,d_in], b[d_out]");
  const std::size_t din = w.dim(1), dout = w.dim(0);
  const bool track = tape.tracks({&x, &w, &b});
  auto out = detail::make_output<T>({dout}, track);
  for (std::size_t o = 0; o < dout; ++o) {
    double s = b.ptr()[o];
    const T* row = w.ptr() + o * din;
    for (std::size_t i = 0; i < din; ++i) s += static_cast<double>(row[i]) * x.ptr()[i];
    out.ptr()[o] = static_cast<T>(s);
  }
  check_finite(out, "linear");
  if (track) {
    tape.record("linear", {x, w, b}, [x, w, b, out, din, dout]() mutable {
      const auto g = out.grad();
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t o = 0; o < dout; ++o) gb[o] += g[o];
      }
      if (w.requires_grad()) {
        auto gw = w.grad();
        for (std::size_t o = 0; o < dout; ++o)
          for (std::size_t i = 0; i < din; ++i) gw[o * din + i] += g[o] * x.ptr()[i];
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < din; ++i) {
          double s = 0;
          for (std::size_t o = 0; o < dout; ++o) s += static_cast<double>(w.ptr()[o * din + i]) * g[o];
          gx[i] += static_cast<T>(s);
        }
      }
    });
  }
  return out;
}

/// Weights of one LSTM layer; gate blocks ordered (input, forget, cell, output).
template <class T>
struct LstmWeights {
  Tensor<T> w_ih;  // [4H, D]
  Tensor<T> w_hh;  // [4H, H]
  Tensor<T> bias;  // [4H]
};

/// Standard gated update without peepholes:
///   i,f,o = sigmoid(.), g = tanh(.), c = f*c_prev + i*g, h = o*tanh(c).
template <class T>
std::pair<Tensor<T>, Tensor<T>> lstm_cell(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& h_prev,
                                          const Tensor<T>& c_prev, const LstmWeights<T>& p) {
  const std::size_t hd = h_prev.size();
  const std::size_t din = x.size();
  detail::require<T>(x.rank() == 1 && h_prev.rank() == 1 && c_prev.size() == hd, "lstm_cell: x, h, c must be vectors");
  detail::require<T>(p.w_ih.rank() == 2 && p.w_ih.dim(0) == 4 * hd && p.w_ih.dim(1) == din, "lstm_cell: w_ih must be [4H,D]");
  detail::require<T>(p.w_hh.rank() == 2 && p.w_hh.dim(0) == 4 * hd && p.w_hh.dim(1) == hd, "lstm_cell: w_hh must be [4H,H]");
  detail::require<T>(p.bias.size() == 4 * hd, "lstm_cell: bias must have 4H entries");
  const bool track = tape.tracks({&x, &h_prev, &c_prev, &p.w_ih, &p.w_hh, &p.bias});

  std::vector<double> gates(4 * hd);
  for (std::size_t r = 0; r < 4 * hd; ++r) {
    double s = p.bias.ptr()[r];
    const T* wi = p.w_ih.ptr() + r * din;
    for (std::size_t j = 0; j < din; ++j) s += static_cast<double>(wi[j]) * x.ptr()[j];
    const T* wh = p.w_hh.ptr() + r * hd;
    for (std::size_t j = 0; j < hd; ++j) s += static_cast<double>(wh[j]) * h_prev.ptr()[j];
    gates[r] = s;
  }
  for (std::size_t j = 0; j < hd; ++j) {
    gates[j] = detail::sigmoid(gates[j]);
    gates[hd + j] = detail::sigmoid(gates[hd + j]);
    gates[2 * hd + j] = std::tanh(gates[2 * hd + j]);
    gates[3 * hd + j] = detail::sigmoid(gates[3 * hd + j]);
  }
  auto h = detail::make_output<T>({hd}, track);
  auto c = detail::make_output<T>({hd}, track);
  std::vector<double> tanh_c(hd);
  for (std::size_t j = 0; j < hd; ++j) {
    const double cv = gates[hd + j] * c_prev.ptr()[j] + gates[j] * gates[2 * hd + j];
    c.ptr()[j] = static_cast<T>(cv);
    tanh_c[j] = std::tanh(cv);
    h.ptr()[j] = static_cast<T>(gates[3 * hd + j] * tanh_c[j]);
  }
  check_finite(h, "lstm_cell");
  check_finite(c, "lstm_cell");
  if (track) {
    tape.record("lstm_cell", {x, h_prev, c_prev, p.w_ih, p.w_hh, p.bias},
                [x, h_prev, c_prev, p, h, c, gates = std::move(gates), tanh_c = std::move(tanh_c), hd, din]() mutable {
                  const bool gh = h.has_grad(), gc = c.has_grad();
                  if (!gh && !gc) return;
                  std::vector<double> dz(4 * hd);
                  for (std::size_t j = 0; j < hd; ++j) {
                    const double i = gates[j], f = gates[hd + j], g = gates[2 * hd + j], o = gates[3 * hd + j];
                    const double dh = gh ? static_cast<double>(h.grad()[j]) : 0.0;
                    const double dct = (gc ? static_cast<double>(c.grad()[j]) : 0.0) + dh * o * (1.0 - tanh_c[j] * tanh_c[j]);
                    dz[j] = dct * g * i * (1.0 - i);
                    dz[hd + j] = dct * c_prev.ptr()[j] * f * (1.0 - f);
                    dz[2 * hd + j] = dct * i * (1.0 - g * g);
                    dz[3 * hd + j] = dh * tanh_c[j] * o * (1.0 - o);
                    if (c_prev.requires_grad()) c_prev.grad()[j] += static_cast<T>(dct * f);
                  }
                  if (p.bias.requires_grad()) {
                    auto gb = p.bias.grad();
                    for (std::size_t r = 0; r < 4 * hd; ++r) gb[r] += static_cast<T>(dz[r]);
                  }
                  if (p.w_ih.requires_grad()) {
                    auto gw = p.w_ih.grad();
                    for (std::size_t r = 0; r < 4 * hd; ++r)
                      for (std::size_t j = 0; j < din; ++j) gw[r * din + j] += static_cast<T>(dz[r] * x.ptr()[j]);
                  }
                  if (p.w_hh.requires_grad()) {
                    auto gw = p.w_hh.grad();
                    for (std::size_t r = 0; r < 4 * hd; ++r)
                      for (std::size_t j = 0; j < hd; ++j) gw[r * hd + j] += static_cast<T>(dz[r] * h_prev.ptr()[j]);
                  }
                  if (x.requires_grad()) {
                    auto gx = x.grad();
                    for (std::size_t j = 0; j < din; ++j) {
                      double s = 0;
                      for (std::size_t r = 0; r < 4 * hd; ++r) s += static_cast<double>(p.w_ih.ptr()[r * din + j]) * dz[r];
                      gx[j] += static_cast<T>(s);
                    }
                  }
                  if (h_prev.requires_grad()) {
                    auto gh_prev = h_prev.grad();
                    for (std::size_t j = 0; j < hd; ++j) {
                      double s = 0;
                      for (std::size_t r = 0; r < 4 * hd; ++r) s += static_cast<double>(p.w_hh.ptr()[r * hd + j]) * dz[r];
                      gh_prev[j] += static_cast<T>(s);
                    }
                  }
                });
  }
  return {h, c};
}

/// Squared Euclidean norm of (pred - target) over entries where `mask` is set
/// (all entries when the mask is empty). The target is a constant.
template <class T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& pred, std::span<const T> target, std::span<const std::uint8_t> mask = {}) {
  if (pred.size() != target.size()) throw ShapeError("mse_loss: prediction and target sizes differ");
  if (!mask.empty() && mask.size() != target.size()) throw ShapeError("mse_loss: mask size differs");
  const bool track = tape.tracks({&pred});
  auto out = detail::make_output<T>({}, track);
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const double d = static_cast<double>(pred.ptr()[i]) - target[i];
    s += d * d;
  }
  out.ptr()[0] = static_cast<T>(s);
  check_finite(out, "mse_loss");
  if (track) {
    std::vector<T> tgt(target.begin(), target.end());
    std::vector<std::uint8_t> msk(mask.begin(), mask.end());
    tape.record("mse_loss", {pred}, [pred, out, tgt = std::move(tgt), msk = std::move(msk)]() mutable {
      const double g = out.grad()[0];
      auto gp = pred.grad();
      for (std::size_t i = 0; i < gp.size(); ++i) {
        if (!msk.empty() && !msk[i]) continue;
        gp[i] += static_cast<T>(2.0 * g * (static_cast<double>(pred.ptr()[i]) - tgt[i]));
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
  return mse_loss(tape, pred, target.data());
}

/// [N,C,H,W] -> [N,2C]: the center cell's channel column followed by the
/// per-channel spatial mean.
template <class T>
Tensor<T> center_and_mean(Tape<T>& tape, const Tensor<T>& x) {
  detail::require<T>(x.rank() == 4, "center_and_mean input must be [N,C,H,W]");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), hw = h * w;
  const std::size_t center = (h / 2) * w + w / 2;
  const bool track = tape.tracks({&x});
  auto out = detail::make_output<T>({n, 2 * c}, track);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = x.ptr() + (b * c + ch) * hw;
      double s = 0;
      for (std::size_t i = 0; i < hw; ++i) s += p[i];
      out.ptr()[b * 2 * c + ch] = p[center];
      out.ptr()[b * 2 * c + c + ch] = static_cast<T>(s / static_cast<double>(hw));
    }
  if (track) {
    tape.record("center_and_mean", {x}, [x, out, n, c, hw, center]() mutable {
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          T* p = gx.data() + (b * c + ch) * hw;
          p[center] += g[b * 2 * c + ch];
          const T gm = static_cast<T>(static_cast<double>(g[b * 2 * c + c + ch]) / static_cast<double>(hw));
          for (std::size_t i = 0; i < hw; ++i) p[i] += gm;
        }
    });
  }
  return out;
}

/// Appends K spatially constant planes to [N,C,H,W]; plane k of sample n holds values[n,k].
template <class T>
Tensor<T> append_constant_planes(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& values) {
  detail::require<T>(x.rank() == 4 && values.rank() == 2 && values.dim(0) == x.dim(0),
                     "append_constant_planes expects x[N,C,H,W] and values[N,K]");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), k = values.dim(1);
  const bool track = tape.tracks({&x, &values});
  auto out = detail::make_output<T>({n, c + k, x.dim(2), x.dim(3)}, track);
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(x.ptr() + b * c * hw, c * hw, out.ptr() + b * (c + k) * hw);
    for (std::size_t j = 0; j < k; ++j)
      std::fill_n(out.ptr() + (b * (c + k) + c + j) * hw, hw, values.ptr()[b * k + j]);
  }
  if (track) {
    tape.record("append_constant_planes", {x, values}, [x, values, out, n, c, hw, k]() mutable {
      const auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t i = 0; i < c * hw; ++i) gx[b * c * hw + i] += g[b * (c + k) * hw + i];
      }
      if (values.requires_grad()) {
        auto gv = values.grad();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t j = 0; j < k; ++j) {
            double s = 0;
            const T* p = g.data() + (b * (c + k) + c + j) * hw;
            for (std::size_t i = 0; i < hw; ++i) s += p[i];
            gv[b * k + j] += static_cast<T>(s);
          }
      }
    });
  }
  return out;
}

/// Stacks equally shaped tensors along a new leading axis.
template <class T>
Tensor<T> stack(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("stack of zero tensors");
  const Shape inner = parts.front().shape();
  const std::size_t sz = parts.front().size();
  bool track = false;
  for (const auto& p : parts) {
    if (p.shape() != inner) throw ShapeError("stack: mismatched shapes");
    track = track || tape.tracks({&p});
  }
  Shape s{parts.size()};
  s.insert(s.end(), inner.begin(), inner.end());
  auto out = detail::make_output<T>(s, track);
  for (std::size_t i = 0; i < parts.size(); ++i) std::copy_n(parts[i].ptr(), sz, out.ptr() + i * sz);
  if (track) {
    tape.record("stack", parts, [parts, out, sz]() mutable {
      const auto g = out.grad();
      for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!parts[i].requires_grad()) continue;
        auto gp = parts[i].grad();
        for (std::size_t j = 0; j < sz; ++j) gp[j] += g[i * sz + j];
      }
    });
  }
  return out;
}

/// Concatenates 1-D tensors.
template <class T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  std::size_t total = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (p.rank() != 1) throw ShapeError("concat expects 1-D tensors");
    total += p.size();
    track = track || tape.tracks({&p});
  }
  auto out = detail::make_output<T>({total}, track);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.ptr(), p.size(), out.ptr() + off);
    off += p.size();
  }
  if (track) {
    tape.record("concat", parts, [parts, out]() mutable {
      const auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t j = 0; j < p.size(); ++j) gp[j] += g[off + j];
        }
        off += p.size();
      }
    });
  }
  return out;
}

/// Row `i` of a [N,F] tensor.
template <class T>
Tensor<T> select_row(Tape<T>& tape, const Tensor<T>& x, std::size_t i) {
  detail::require<T>(x.rank() == 2 && i < x.dim(0), "select_row: index out of range or input not [N,F]");
  const std::size_t f = x.dim(1);
  const bool track = tape.tracks({&x});
  auto out = detail::make_output<T>({f}, track);
  std::copy_n(x.ptr() + i * f, f, out.ptr());
  if (track) {
    tape.record("select_row", {x}, [x, out, i, f]() mutable {
      auto gx = x.grad();
      const auto g = out.grad();
      for (std::size_t j = 0; j < f; ++j) gx[i * f + j] += g[j];
    });
  }
  return out;
}

/// Scalar sum_i weights[i] * x[i] with constant weights (sum when weights is empty).
template <class T>
Tensor<T> weighted_sum(Tape<T>& tape, const Tensor<T>& x, std::span<const T> weights = {}) {
  if (!weights.empty() && weights.size() != x.size()) throw ShapeError("weighted_sum: weight count mismatch");
  const bool track = tape.tracks({&x});
  auto out = detail::make_output<T>({}, track);
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (weights.empty() ? 1.0 : static_cast<double>(weights[i])) * x.ptr()[i];
  out.ptr()[0] = static_cast<T>(s);
  if (track) {
    std::vector<T> w(weights.begin(), weights.end());
    tape.record("weighted_sum", {x}, [x, out, w = std::move(w)]() mutable {
      const T g = out.grad()[0];
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += w.empty() ? g : static_cast<T>(g * w[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

/// Named trainable tensors plus non-trainable buffers (batch-norm running stats).
/// Names are unique and their order is stable; it defines checkpoint layout.
template <class T>
class ParameterSet {
 public:
  Tensor<T> add(const std::string& name, Shape shape, T fill = T(0)) {
    check_new(name);
    Tensor<T> t(std::move(shape), fill, true);
    index_[name] = params_.size();
    params_.emplace_back(name, t);
    return t;
  }

  Tensor<T> add_buffer(const std::string& name, Shape shape, T fill = T(0)) {
    check_new(name);
    Tensor<T> t(std::move(shape), fill, false);
    buffer_index_[name] = buffers_.size();
    buffers_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& buffers() const { return buffers_; }

  Tensor<T> at(const std::string& name) const {
    if (auto it = index_.find(name); it != index_.end()) return params_[it->second].second;
    if (auto it = buffer_index_.find(name); it != buffer_index_.end()) return buffers_[it->second].second;
    throw Error("tensorcore", "no parameter named '" + name + "'");
  }
  bool contains(const std::string& name) const { return index_.count(name) || buffer_index_.count(name); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  /// Copies values (not handles) from a set with identical names and shapes.
  template <class U>
  void assign_from(const ParameterSet<U>& other) {
    auto copy = [](auto& dst_list, const auto& src_set) {
      for (auto& [name, dst] : dst_list) {
        const auto src = src_set.at(name);
        if (src.shape() != dst.shape())
          throw ShapeError("parameter '" + name + "' has shape " + shape_string(src.shape()) + ", expected " +
                           shape_string(dst.shape()));
        std::transform(src.data().begin(), src.data().end(), dst.data().begin(),
                       [](U v) { return static_cast<T>(v); });
      }
    };
    copy(params_, other);
    copy(buffers_, other);
  }

  /// Deep copy with the same names and order.
  ParameterSet clone() const {
    ParameterSet out;
    for (const auto& [name, t] : params_) out.add(name, t.shape()).data();
    for (const auto& [name, t] : buffers_) out.add_buffer(name, t.shape());
    out.assign_from(*this);
    return out;
  }

 private:
  void check_new(const std::string& name) const {
    if (index_.count(name) || buffer_index_.count(name)) throw Error("tensorcore", "duplicate parameter name '" + name + "'");
  }

  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::pair<std::string, Tensor<T>>> buffers_;
  std::unordered_map<std::string, std::size_t> index_;
  std::unordered_map<std::string, std::size_t> buffer_index_;
};

/// p <- p - lr * grad(p) for every parameter, then zero the gradients.
template <class T>
void sgd_step(ParameterSet<T>& params, double lr, double grad_scale = 1.0) {
  for (const auto& [name, p] : params.params()) {
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto v = const_cast<Tensor<T>&>(p).data();
    if (lr != 0.0)
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(v[i] - lr * grad_scale * g[i]);
    std::fill(g.begin(), g.end(), T(0));
  }
}

// ---------------------------------------------------------------------------
// Initialisation

template <class T>
void uniform_init(Tensor<T>& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

/// Kaiming-uniform for ReLU networks: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <class T>
void kaiming_uniform(Tensor<T>& t, std::size_t fan_in, std::mt19937_64& rng) {
  uniform_init(t, std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, u32 version, u64 header length, JSON header, float32 payload.

inline constexpr char kCheckpointMagic[8] = {'D', 'A', 'I', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json header;
  ParameterSet<float> params;
};

/// Serializes parameters then buffers, each as float32 in header order. `meta`
/// is stored verbatim under "meta".
inline std::vector<char> serialize_checkpoint(const ParameterSet<float>& params, const nlohmann::json& meta) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : params.params()) entries.push_back({{"name", name}, {"shape", t.shape()}, {"kind", "param"}});
  for (const auto& [name, t] : params.buffers()) entries.push_back({{"name", name}, {"shape", t.shape()}, {"kind", "buffer"}});
  const nlohmann::json header = {{"format", "deepair-checkpoint"},
                                 {"version", kCheckpointVersion},
                                 {"dtype", "float32-le"},
                                 {"entries", entries},
                                 {"meta", meta}};
  const std::string hs = header.dump();
  std::vector<char> out(sizeof kCheckpointMagic);
  std::memcpy(out.data(), kCheckpointMagic, sizeof kCheckpointMagic);
  auto put = [&out](const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    out.insert(out.end(), c, c + n);
  };
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t hlen = hs.size();
  put(&version, sizeof version);
  put(&hlen, sizeof hlen);
  put(hs.data(), hs.size());
  for (const auto& [_, t] : params.params()) put(t.ptr(), t.size() * sizeof(float));
  for (const auto& [_, t] : params.buffers()) put(t.ptr(), t.size() * sizeof(float));
  return out;
}

inline Checkpoint deserialize_checkpoint(std::span<const char> bytes) {
  const std::size_t fixed = sizeof kCheckpointMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < fixed || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw FormatError("tensorcore", "not a checkpoint file");
  std::uint32_t version;
  std::uint64_t hlen;
  std::memcpy(&version, bytes.data() + 8, sizeof version);
  std::memcpy(&hlen, bytes.data() + 12, sizeof hlen);
  if (version != kCheckpointVersion)
    throw FormatError("tensorcore", "checkpoint version " + std::to_string(version) + " not supported (expected " +
                                        std::to_string(kCheckpointVersion) + ")");
  if (bytes.size() < fixed + hlen) throw FormatError("tensorcore", "truncated checkpoint header");
  Checkpoint ck;
  ck.header = nlohmann::json::parse(bytes.begin() + fixed, bytes.begin() + static_cast<std::ptrdiff_t>(fixed + hlen));
  std::size_t off = fixed + hlen;
  for (const auto& e : ck.header.at("entries")) {
    const auto shape = e.at("shape").get<Shape>();
    const auto name = e.at("name").get<std::string>();
    auto t = e.at("kind") == "param" ? ck.params.add(name, shape) : ck.params.add_buffer(name, shape);
    const std::size_t nbytes = t.size() * sizeof(float);
    if (off + nbytes > bytes.size()) throw FormatError("tensorcore", "truncated checkpoint payload at '" + name + "'");
    std::memcpy(t.ptr(), bytes.data() + off, nbytes);
    off += nbytes;
  }
  if (off != bytes.size()) throw FormatError("tensorcore", "checkpoint has trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params, const nlohmann::json& meta) {
  const auto bytes = serialize_checkpoint(params, meta);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("tensorcore", "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("tensorcore", "cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
  return deserialize_checkpoint(bytes);
}

}  // namespace deepair::nn

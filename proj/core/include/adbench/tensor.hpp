#pragma once

// Minimal N-D tensor engine with reverse-mode automatic differentiation.
// Tensors are shared-storage value types; a Tape records executed ops and
// replays their backward closures in exact reverse order. Gradients
// accumulate additively, so tensors consumed by several ops receive the
// sum of all incoming gradients.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "adbench/common.hpp"
#include "adbench/kernels.hpp"

namespace adbench {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : shape_(std::move(shape)), st_(std::make_shared<Storage>()) {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] == 0)
        throw ShapeError(msg("tensor dimension ", i, " must be positive"));
    }
    st_->value.assign(shape_numel(shape_), T(0));
    st_->requires_grad = requires_grad;
    if (requires_grad) st_->grad.assign(st_->value.size(), T(0));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.st_->value.begin(), t.st_->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    if (values.size() != t.size())
      throw ShapeError(msg("value count ", values.size(), " does not match shape ",
                           shape_str(t.shape()), " (", t.size(), " elements)"));
    t.st_->value = std::move(values);
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return st_ ? st_->value.size() : 0; }

  // Tensors are handles onto shared storage: const propagates to the handle
  // (shape, identity), not to the underlying buffers.
  T* data() const { return st_->value.data(); }
  std::vector<T>& values() const { return st_->value; }

  bool requires_grad() const { return st_ && st_->requires_grad; }

  T* grad() const { return st_->grad.data(); }
  std::vector<T>& grad_values() const { return st_->grad; }

  void zero_grad() const {
    if (requires_grad()) std::fill(st_->grad.begin(), st_->grad.end(), T(0));
  }

  // A view sharing storage (values and gradient) under a new shape.
  Tensor reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != size())
      throw ShapeError(msg("cannot reshape ", shape_str(shape_), " (", size(),
                           " elements) to ", shape_str(new_shape)));
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.st_ = st_;
    return t;
  }

  T item() const {
    if (size() != 1) throw ShapeError(msg("item() on tensor of size ", size()));
    return st_->value[0];
  }

  bool same_storage(const Tensor& other) const { return st_ == other.st_; }

  bool all_finite() const {
    for (const T& v : st_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  struct Storage {
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  Shape shape_;
  std::shared_ptr<Storage> st_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Running statistics for batch normalization (buffers, not parameters).
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

template <typename T>
class Tape {
 public:
  bool grad_enabled() const { return enabled_; }
  void set_grad_enabled(bool on) { enabled_ = on; }

  std::size_t node_count() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    backward_done_ = false;
  }

  void backward(Tensor<T> out) {
    if (out.size() != 1)
      throw ShapeError(msg("backward() requires a scalar output, got ",
                           shape_str(out.shape())));
    if (!out.requires_grad())
      throw Error("backward() on a tensor that does not require grad");
    if (backward_done_)
      throw Error("backward() called twice on the same tape; call clear() first");
    backward_done_ = true;
    out.grad()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  // ---- elementwise / structural ops ----

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
      throw ShapeError(msg("add: shape mismatch ", shape_str(a.shape()), " vs ",
                           shape_str(b.shape())));
    Tensor<T> out(a.shape(), wants_grad(a, b));
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
    if (out.requires_grad()) {
      record([a, b, out]() mutable {
        const T* g = out.grad();
        if (a.requires_grad()) {
          T* ga = a.grad();
          for (std::size_t i = 0; i < out.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
          T* gb = b.grad();
          for (std::size_t i = 0; i < out.size(); ++i) gb[i] += g[i];
        }
      });
    }
    return out;
  }

  // x [R,C] + v [C], broadcast over rows. Used for bias and positional
  // encoding addition (pass a non-grad tensor for fixed encodings).
  Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    if (x.ndim() < 1 || v.ndim() != 1 || x.shape().back() != v.dim(0))
      throw ShapeError(msg("add_rowvec: last dim of ", shape_str(x.shape()),
                           " must match ", shape_str(v.shape())));
    const std::size_t c = v.dim(0);
    const std::size_t r = x.size() / c;
    Tensor<T> out(x.shape(), wants_grad(x, v));
    const T* px = x.data();
    const T* pv = v.data();
    T* po = out.data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) po[i * c + j] = px[i * c + j] + pv[j];
    if (out.requires_grad()) {
      record([x, v, out, r, c]() mutable {
        const T* g = out.grad();
        if (x.requires_grad()) {
          T* gx = x.grad();
          for (std::size_t i = 0; i < r * c; ++i) gx[i] += g[i];
        }
        if (v.requires_grad()) {
          T* gv = v.grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
        }
      });
    }
    return out;
  }

  Tensor<T> scale(const Tensor<T>& x, T s) {
    Tensor<T> out(x.shape(), wants_grad(x));
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = px[i] * s;
    if (out.requires_grad()) {
      record([x, out, s]() mutable {
        const T* g = out.grad();
        T* gx = x.grad();
        for (std::size_t i = 0; i < out.size(); ++i) gx[i] += g[i] * s;
      });
    }
    return out;
  }

  Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape(), wants_grad(x));
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
    if (out.requires_grad()) {
      record([x, out]() mutable {
        const T* g = out.grad();
        const T* px = x.data();
        T* gx = x.grad();
        // subgradient at 0 is 0
        for (std::size_t i = 0; i < out.size(); ++i)
          if (px[i] > T(0)) gx[i] += g[i];
      });
    }
    return out;
  }

  // Softmax over the last dimension.
  Tensor<T> softmax(const Tensor<T>& x) {
    if (x.ndim() < 1) throw ShapeError("softmax: rank-0 tensor");
    const std::size_t c = x.shape().back();
    const std::size_t r = x.size() / c;
    Tensor<T> out(x.shape(), wants_grad(x));
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < r; ++i) {
      const T* row = px + i * c;
      T* orow = po + i * c;
      T mx = row[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      T sum = T(0);
      for (std::size_t j = 0; j < c; ++j) {
        orow[j] = std::exp(row[j] - mx);
        sum += orow[j];
      }
      for (std::size_t j = 0; j < c; ++j) orow[j] /= sum;
    }
    if (out.requires_grad()) {
      record([x, out, r, c]() mutable {
        const T* g = out.grad();
        const T* y = out.data();
        T* gx = x.grad();
        for (std::size_t i = 0; i < r; ++i) {
          const T* gr = g + i * c;
          const T* yr = y + i * c;
          T dot = T(0);
          for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
          T* gxr = gx + i * c;
          for (std::size_t j = 0; j < c; ++j) gxr[j] += yr[j] * (gr[j] - dot);
        }
      });
    }
    return out;
  }

  Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
      throw ConfigError(msg("dropout rate must be in [0,1), got ", rate));
    if (!training || rate == 0.0) return x;  // eval mode is the identity
    Tensor<T> out(x.shape(), wants_grad(x));
    auto mask = std::make_shared<std::vector<T>>(x.size());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const T inv_keep = T(1.0 / (1.0 - rate));
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      (*mask)[i] = u(rng) < rate ? T(0) : inv_keep;
      po[i] = px[i] * (*mask)[i];
    }
    if (out.requires_grad()) {
      record([x, out, mask]() mutable {
        const T* g = out.grad();
        T* gx = x.grad();
        for (std::size_t i = 0; i < out.size(); ++i) gx[i] += g[i] * (*mask)[i];
      });
    }
    return out;
  }

  // ---- matrix ops ----

  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
      throw ShapeError(msg("matmul: expected rank-2 tensors, got ",
                           shape_str(a.shape()), " and ", shape_str(b.shape())));
    if (a.dim(1) != b.dim(0))
      throw ShapeError(msg("matmul: inner dimensions differ, ", a.dim(1), " vs ",
                           b.dim(0)));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n}, wants_grad(a, b));
    kernels::gemm(a.data(), b.data(), out.data(), m, k, n, false, false, false);
    if (out.requires_grad()) {
      record([a, b, out, m, k, n]() mutable {
        const T* g = out.grad();
        if (a.requires_grad())
          kernels::gemm(g, b.data(), a.grad(), m, n, k, false, true, true);
        if (b.requires_grad())
          kernels::gemm(a.data(), g, b.grad(), k, m, n, true, false, true);
      });
    }
    return out;
  }

  // Batched matmul: a [B,M,K] x b [B,K,N] -> [B,M,N].
  // With trans_b, b is [B,N,K] and multiplied transposed.
  Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
    if (a.ndim() != 3 || b.ndim() != 3)
      throw ShapeError("bmm: expected rank-3 tensors");
    if (a.dim(0) != b.dim(0))
      throw ShapeError(msg("bmm: batch dims differ, ", a.dim(0), " vs ", b.dim(0)));
    const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t n = trans_b ? b.dim(1) : b.dim(2);
    const std::size_t bk = trans_b ? b.dim(2) : b.dim(1);
    if (bk != k)
      throw ShapeError(msg("bmm: inner dimensions differ, ", k, " vs ", bk));
    Tensor<T> out({bs, m, n}, wants_grad(a, b));
    for (std::size_t i = 0; i < bs; ++i)
      kernels::gemm(a.data() + i * m * k, b.data() + i * k * n,
                    out.data() + i * m * n, m, k, n, false, trans_b, false);
    if (out.requires_grad()) {
      record([a, b, out, bs, m, k, n, trans_b]() mutable {
        for (std::size_t i = 0; i < bs; ++i) {
          const T* g = out.grad() + i * m * n;
          const T* pa = a.data() + i * m * k;
          const T* pb = b.data() + i * k * n;
          if (!trans_b) {
            if (a.requires_grad())
              kernels::gemm(g, pb, a.grad() + i * m * k, m, n, k, false, true, true);
            if (b.requires_grad())
              kernels::gemm(pa, g, b.grad() + i * k * n, k, m, n, true, false, true);
          } else {
            // y = a * b^T with b stored [N,K]
            if (a.requires_grad())
              kernels::gemm(g, pb, a.grad() + i * m * k, m, n, k, false, false, true);
            if (b.requires_grad())
              kernels::gemm(g, pa, b.grad() + i * k * n, n, m, k, true, false, true);
          }
        }
      });
    }
    return out;
  }

  // x [R,in] * w [in,out] + b [out]; pass an undefined bias to skip it.
  Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.ndim() != 2 || w.ndim() != 2)
      throw ShapeError("linear: input and weight must be rank-2");
    if (x.dim(1) != w.dim(0))
      throw ShapeError(msg("linear: input feature dim ", x.dim(1),
                           " does not match weight rows ", w.dim(0)));
    Tensor<T> y = matmul(x, w);
    if (!b.defined()) return y;
    if (b.ndim() != 1 || b.dim(0) != w.dim(1))
      throw ShapeError(msg("linear: bias shape ", shape_str(b.shape()),
                           " does not match output dim ", w.dim(1)));
    return add_rowvec(y, b);
  }

  // ---- convolution / pooling ----

  Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                   std::size_t stride, std::size_t pad) {
    if (x.ndim() != 4)
      throw ShapeError(msg("conv2d: input must be [N,C,H,W], got ",
                           shape_str(x.shape())));
    if (w.ndim() != 4)
      throw ShapeError(msg("conv2d: kernel must be [F,C,kh,kw], got ",
                           shape_str(w.shape())));
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t f = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != c)
      throw ShapeError(msg("conv2d: kernel channel dim ", w.dim(1),
                           " does not match input channels ", c));
    if (kh > h + 2 * pad || kw > wd + 2 * pad)
      throw ShapeError(msg("conv2d: kernel ", kh, "x", kw,
                           " larger than padded input ", h + 2 * pad, "x",
                           wd + 2 * pad));
    const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != f))
      throw ShapeError(msg("conv2d: bias must be [", f, "], got ",
                           shape_str(bias.shape())));

    Tensor<T> out({n, f, ho, wo}, wants_grad(x, w) || (bias.defined() && bias.requires_grad()));
    const std::size_t colrows = c * kh * kw;
    const std::size_t colcols = ho * wo;
    std::vector<T> col(colrows * colcols);
    for (std::size_t i = 0; i < n; ++i) {
      kernels::im2col(x.data() + i * c * h * wd, c, h, wd, kh, kw, stride, pad,
                      ho, wo, col.data());
      kernels::gemm(w.data(), col.data(), out.data() + i * f * colcols, f,
                    colrows, colcols, false, false, false);
      if (bias.defined()) {
        T* dst = out.data() + i * f * colcols;
        for (std::size_t ch = 0; ch < f; ++ch)
          for (std::size_t px = 0; px < colcols; ++px) dst[ch * colcols + px] += bias.data()[ch];
      }
    }
    if (out.requires_grad()) {
      record([x, w, bias, out, stride, pad, n, c, h, wd, f, kh, kw, ho, wo]() mutable {
        const std::size_t colrows = c * kh * kw;
        const std::size_t colcols = ho * wo;
        std::vector<T> col(colrows * colcols);
        std::vector<T> dcol(colrows * colcols);
        for (std::size_t i = 0; i < n; ++i) {
          const T* g = out.grad() + i * f * colcols;
          if (w.requires_grad()) {
            kernels::im2col(x.data() + i * c * h * wd, c, h, wd, kh, kw, stride,
                            pad, ho, wo, col.data());
            kernels::gemm(g, col.data(), w.grad(), f, colcols, colrows, false,
                          true, true);
          }
          if (x.requires_grad()) {
            kernels::gemm(w.data(), g, dcol.data(), colrows, f, colcols, true,
                          false, false);
            kernels::col2im_add(dcol.data(), c, h, wd, kh, kw, stride, pad, ho,
                                wo, x.grad() + i * c * h * wd);
          }
          if (bias.defined() && bias.requires_grad()) {
            T* gb = bias.grad();
            for (std::size_t ch = 0; ch < f; ++ch) {
              T acc = T(0);
              for (std::size_t px = 0; px < colcols; ++px) acc += g[ch * colcols + px];
              gb[ch] += acc;
            }
          }
        }
      });
    }
    return out;
  }

  Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t k, std::size_t stride,
                       std::size_t pad = 0) {
    if (x.ndim() != 4) throw ShapeError("max_pool2d: input must be [N,C,H,W]");
    if (pad >= k) throw ConfigError("max_pool2d: padding must be < kernel");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (k > h + 2 * pad || k > w + 2 * pad)
      throw ShapeError(msg("max_pool2d: window ", k, " larger than padded input"));
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (w + 2 * pad - k) / stride + 1;
    Tensor<T> out({n, c, ho, wo}, wants_grad(x));
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const T* px = x.data();
    T* po = out.data();
    std::size_t oi = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* plane = px + (i * c + ch) * h * w;
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox, ++oi) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t besti = 0;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                const std::size_t idx = static_cast<std::size_t>(iy) * w +
                                        static_cast<std::size_t>(ix);
                if (plane[idx] > best) {
                  best = plane[idx];
                  besti = idx;
                }
              }
            }
            po[oi] = best;
            (*argmax)[oi] = (i * c + ch) * h * w + besti;
          }
      }
    if (out.requires_grad()) {
      record([x, out, argmax]() mutable {
        const T* g = out.grad();
        T* gx = x.grad();
        for (std::size_t i = 0; i < out.size(); ++i) gx[(*argmax)[i]] += g[i];
      });
    }
    return out;
  }

  // Average pooling; padded cells count toward the divisor (always k*k).
  Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k, std::size_t stride,
                       std::size_t pad = 0) {
    if (x.ndim() != 4) throw ShapeError("avg_pool2d: input must be [N,C,H,W]");
    if (pad >= k) throw ConfigError("avg_pool2d: padding must be < kernel");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (w + 2 * pad - k) / stride + 1;
    Tensor<T> out({n, c, ho, wo}, wants_grad(x));
    const T inv = T(1) / static_cast<T>(k * k);
    const T* px = x.data();
    T* po = out.data();
    std::size_t oi = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* plane = px + (i * c + ch) * h * w;
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox, ++oi) {
            T acc = T(0);
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                acc += plane[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)];
              }
            }
            po[oi] = acc * inv;
          }
      }
    if (out.requires_grad()) {
      record([x, out, k, stride, pad, n, c, h, w, ho, wo, inv]() mutable {
        const T* g = out.grad();
        T* gx = x.grad();
        std::size_t oi = 0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch) {
            T* plane = gx + (i * c + ch) * h * w;
            for (std::size_t oy = 0; oy < ho; ++oy)
              for (std::size_t ox = 0; ox < wo; ++ox, ++oi) {
                const T gv = g[oi] * inv;
                for (std::size_t ky = 0; ky < k; ++ky) {
                  const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                    if (ix < 0 || ix >= static_cast<long>(w)) continue;
                    plane[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] += gv;
                  }
                }
              }
          }
      });
    }
    return out;
  }

  // [N,C,H,W] -> [N,C]
  Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.ndim() != 4) throw ShapeError("global_avg_pool: input must be [N,C,H,W]");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out({n, c}, wants_grad(x));
    const T inv = T(1) / static_cast<T>(hw);
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < n * c; ++i) {
      T acc = T(0);
      const T* plane = px + i * hw;
      for (std::size_t j = 0; j < hw; ++j) acc += plane[j];
      po[i] = acc * inv;
    }
    if (out.requires_grad()) {
      record([x, out, n, c, hw, inv]() mutable {
        const T* g = out.grad();
        T* gx = x.grad();
        for (std::size_t i = 0; i < n * c; ++i) {
          const T gv = g[i] * inv;
          T* plane = gx + i * hw;
          for (std::size_t j = 0; j < hw; ++j) plane[j] += gv;
        }
      });
    }
    return out;
  }

  // ---- normalization ----

  Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma,
                         const Tensor<T>& beta, BatchNormState<T>& state,
                         bool training, T momentum = T(0.1), T eps = T(1e-5)) {
    if (x.ndim() != 4) throw ShapeError("batch_norm2d: input must be [N,C,H,W]");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.size() != c || beta.size() != c || state.running_mean.size() != c)
      throw ShapeError(msg("batch_norm2d: parameter size does not match ", c,
                           " channels"));
    Tensor<T> out(x.shape(), wants_grad(x, gamma, beta));
    auto mean = std::make_shared<std::vector<T>>(c);
    auto invstd = std::make_shared<std::vector<T>>(c);
    const std::size_t m = n * hw;
    const T* px = x.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      T mu, var;
      if (training) {
        T acc = T(0);
        for (std::size_t i = 0; i < n; ++i) {
          const T* plane = px + (i * c + ch) * hw;
          for (std::size_t j = 0; j < hw; ++j) acc += plane[j];
        }
        mu = acc / static_cast<T>(m);
        T vacc = T(0);
        for (std::size_t i = 0; i < n; ++i) {
          const T* plane = px + (i * c + ch) * hw;
          for (std::size_t j = 0; j < hw; ++j) {
            const T d = plane[j] - mu;
            vacc += d * d;
          }
        }
        var = vacc / static_cast<T>(m);
        state.running_mean[ch] = (T(1) - momentum) * state.running_mean[ch] + momentum * mu;
        state.running_var[ch] = (T(1) - momentum) * state.running_var[ch] + momentum * var;
      } else {
        mu = state.running_mean[ch];
        var = state.running_var[ch];
      }
      (*mean)[ch] = mu;
      (*invstd)[ch] = T(1) / std::sqrt(var + eps);
    }
    T* po = out.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* plane = px + (i * c + ch) * hw;
        T* oplane = po + (i * c + ch) * hw;
        const T g = gamma.data()[ch], b = beta.data()[ch];
        const T mu = (*mean)[ch], is = (*invstd)[ch];
        for (std::size_t j = 0; j < hw; ++j)
          oplane[j] = (plane[j] - mu) * is * g + b;
      }
    if (out.requires_grad()) {
      record([x, gamma, beta, out, mean, invstd, training, n, c, hw]() mutable {
        const std::size_t m = n * hw;
        const T* g = out.grad();
        const T* px = x.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T mu = (*mean)[ch], is = (*invstd)[ch];
          const T gm = gamma.data()[ch];
          // accumulate sums over the channel
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::size_t i = 0; i < n; ++i) {
            const T* gp = g + (i * c + ch) * hw;
            const T* xp = px + (i * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) {
              sum_dy += gp[j];
              sum_dy_xhat += gp[j] * (xp[j] - mu) * is;
            }
          }
          if (gamma.requires_grad()) gamma.grad()[ch] += sum_dy_xhat;
          if (beta.requires_grad()) beta.grad()[ch] += sum_dy;
          if (x.requires_grad()) {
            T* gx = x.grad();
            if (training) {
              const T inv_m = T(1) / static_cast<T>(m);
              for (std::size_t i = 0; i < n; ++i) {
                const T* gp = g + (i * c + ch) * hw;
                const T* xp = px + (i * c + ch) * hw;
                T* gxp = gx + (i * c + ch) * hw;
                for (std::size_t j = 0; j < hw; ++j) {
                  const T xhat = (xp[j] - mu) * is;
                  gxp[j] += gm * is * (gp[j] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
                }
              }
            } else {
              for (std::size_t i = 0; i < n; ++i) {
                const T* gp = g + (i * c + ch) * hw;
                T* gxp = gx + (i * c + ch) * hw;
                for (std::size_t j = 0; j < hw; ++j) gxp[j] += gm * is * gp[j];
              }
            }
          }
        }
      });
    }
    return out;
  }

  // Layer norm over the last dimension; gamma/beta have that dimension.
  Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta, T eps = T(1e-5)) {
    const std::size_t d = x.shape().back();
    if (gamma.size() != d || beta.size() != d)
      throw ShapeError(msg("layer_norm: parameter size must equal last dim ", d));
    const std::size_t r = x.size() / d;
    Tensor<T> out(x.shape(), wants_grad(x, gamma, beta));
    auto invstd = std::make_shared<std::vector<T>>(r);
    auto means = std::make_shared<std::vector<T>>(r);
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < r; ++i) {
      const T* row = px + i * d;
      T mu = T(0);
      for (std::size_t j = 0; j < d; ++j) mu += row[j];
      mu /= static_cast<T>(d);
      T var = T(0);
      for (std::size_t j = 0; j < d; ++j) {
        const T dv = row[j] - mu;
        var += dv * dv;
      }
      var /= static_cast<T>(d);
      const T is = T(1) / std::sqrt(var + eps);
      (*means)[i] = mu;
      (*invstd)[i] = is;
      T* orow = po + i * d;
      for (std::size_t j = 0; j < d; ++j)
        orow[j] = (row[j] - mu) * is * gamma.data()[j] + beta.data()[j];
    }
    if (out.requires_grad()) {
      record([x, gamma, beta, out, means, invstd, r, d]() mutable {
        const T* g = out.grad();
        const T* px = x.data();
        for (std::size_t i = 0; i < r; ++i) {
          const T mu = (*means)[i], is = (*invstd)[i];
          const T* gr = g + i * d;
          const T* row = px + i * d;
          T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            const T xhat = (row[j] - mu) * is;
            const T dxhat = gr[j] * gamma.data()[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            if (gamma.requires_grad()) gamma.grad()[j] += gr[j] * xhat;
            if (beta.requires_grad()) beta.grad()[j] += gr[j];
          }
          if (x.requires_grad()) {
            T* gx = x.grad() + i * d;
            const T inv_d = T(1) / static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T xhat = (row[j] - mu) * is;
              const T dxhat = gr[j] * gamma.data()[j];
              gx[j] += is * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
            }
          }
        }
      });
    }
    return out;
  }

  // ---- structural ops for token sequences ----

  Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError(msg("concat: axis ", axis, " out of range"));
    std::size_t total = 0;
    bool rq = false;
    for (const auto& p : parts) {
      if (p.ndim() != s0.size())
        throw ShapeError("concat: rank mismatch between inputs");
      for (std::size_t i = 0; i < s0.size(); ++i)
        if (i != axis && p.shape()[i] != s0[i])
          throw ShapeError(msg("concat: dimension ", i, " mismatch: ", p.shape()[i],
                               " vs ", s0[i]));
      total += p.shape()[axis];
      rq = rq || p.requires_grad();
    }
    Shape os = s0;
    os[axis] = total;
    Tensor<T> out(os, rq && enabled_);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t pa = p.shape()[axis];
      const T* src = p.data();
      for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + (o * total + off) * inner, src + o * pa * inner,
                    pa * inner * sizeof(T));
      off += pa;
    }
    if (out.requires_grad()) {
      record([parts, out, outer, inner, total, axis]() mutable {
        const T* g = out.grad();
        std::size_t off = 0;
        for (auto& p : parts) {
          const std::size_t pa = p.shape()[axis];
          if (p.requires_grad()) {
            T* gp = p.grad();
            for (std::size_t o = 0; o < outer; ++o) {
              const T* src = g + (o * total + off) * inner;
              T* dst = gp + o * pa * inner;
              for (std::size_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
            }
          }
          off += pa;
        }
      });
    }
    return out;
  }

  // [N,L,D] -> [N,D], mean over tokens.
  Tensor<T> mean_tokens(const Tensor<T>& x) {
    if (x.ndim() != 3) throw ShapeError("mean_tokens: input must be [N,L,D]");
    const std::size_t n = x.dim(0), l = x.dim(1), d = x.dim(2);
    Tensor<T> out({n, d}, wants_grad(x));
    const T inv = T(1) / static_cast<T>(l);
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        T acc = T(0);
        for (std::size_t t = 0; t < l; ++t) acc += px[(i * l + t) * d + j];
        po[i * d + j] = acc * inv;
      }
    if (out.requires_grad()) {
      record([x, out, n, l, d, inv]() mutable {
        const T* g = out.grad();
        T* gx = x.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t t = 0; t < l; ++t)
            for (std::size_t j = 0; j < d; ++j)
              gx[(i * l + t) * d + j] += g[i * d + j] * inv;
      });
    }
    return out;
  }

  // [N,L,H*dh] -> [N*H,L,dh]; pure permutation, backward is the inverse.
  Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
    if (x.ndim() != 3) throw ShapeError("split_heads: input must be [N,L,D]");
    const std::size_t n = x.dim(0), l = x.dim(1), d = x.dim(2);
    if (d % heads != 0)
      throw ConfigError(msg("split_heads: token dim ", d,
                            " not divisible by heads ", heads));
    const std::size_t dh = d / heads;
    Tensor<T> out({n * heads, l, dh}, wants_grad(x));
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t hd = 0; hd < heads; ++hd)
        for (std::size_t t = 0; t < l; ++t)
          std::memcpy(po + (((i * heads + hd) * l) + t) * dh,
                      px + (i * l + t) * d + hd * dh, dh * sizeof(T));
    if (out.requires_grad()) {
      record([x, out, n, l, d, heads, dh]() mutable {
        const T* g = out.grad();
        T* gx = x.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t hd = 0; hd < heads; ++hd)
            for (std::size_t t = 0; t < l; ++t) {
              const T* src = g + (((i * heads + hd) * l) + t) * dh;
              T* dst = gx + (i * l + t) * d + hd * dh;
              for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
            }
      });
    }
    return out;
  }

  // [N*H,L,dh] -> [N,L,H*dh]; inverse of split_heads.
  Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
    if (x.ndim() != 3) throw ShapeError("merge_heads: input must be [N*H,L,dh]");
    if (x.dim(0) % heads != 0)
      throw ShapeError("merge_heads: batch dim not divisible by heads");
    const std::size_t n = x.dim(0) / heads, l = x.dim(1), dh = x.dim(2);
    const std::size_t d = heads * dh;
    Tensor<T> out({n, l, d}, wants_grad(x));
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t hd = 0; hd < heads; ++hd)
        for (std::size_t t = 0; t < l; ++t)
          std::memcpy(po + (i * l + t) * d + hd * dh,
                      px + (((i * heads + hd) * l) + t) * dh, dh * sizeof(T));
    if (out.requires_grad()) {
      record([x, out, n, l, d, heads, dh]() mutable {
        const T* g = out.grad();
        T* gx = x.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t hd = 0; hd < heads; ++hd)
            for (std::size_t t = 0; t < l; ++t) {
              const T* src = g + (i * l + t) * d + hd * dh;
              T* dst = gx + (((i * heads + hd) * l) + t) * dh;
              for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
            }
      });
    }
    return out;
  }

  // ---- reductions / loss ----

  // Scalar dot product with a fixed coefficient vector; the standard way to
  // reduce an op output to a scalar for gradient verification.
  Tensor<T> reduce_weighted_sum(const Tensor<T>& x, const std::vector<T>& coeffs) {
    if (coeffs.size() != x.size())
      throw ShapeError(msg("reduce_weighted_sum: ", coeffs.size(),
                           " coefficients for ", x.size(), " elements"));
    Tensor<T> out({1}, wants_grad(x));
    T acc = T(0);
    const T* px = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) acc += px[i] * coeffs[i];
    out.data()[0] = acc;
    if (out.requires_grad()) {
      record([x, out, coeffs]() mutable {
        const T g = out.grad()[0];
        T* gx = x.grad();
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g * coeffs[i];
      });
    }
    return out;
  }

  // Mean cross-entropy from logits with per-class weights, normalized by the
  // sum of the weights of the realized targets (so uniform weights reduce to
  // the plain mean).
  Tensor<T> weighted_cross_entropy(const Tensor<T>& logits,
                                   const std::vector<int>& targets,
                                   const std::vector<double>& class_weights) {
    if (logits.ndim() != 2)
      throw ShapeError(msg("weighted_cross_entropy: logits must be [N,C], got ",
                           shape_str(logits.shape())));
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    if (targets.size() != n)
      throw ShapeError(msg("weighted_cross_entropy: ", targets.size(),
                           " targets for ", n, " rows"));
    if (class_weights.size() != c)
      throw ConfigError(msg("weighted_cross_entropy: ", class_weights.size(),
                            " class weights for ", c, " classes"));
    for (std::size_t j = 0; j < c; ++j)
      if (!(class_weights[j] > 0.0))
        throw ConfigError(msg("weighted_cross_entropy: class weight ", j,
                              " must be positive, got ", class_weights[j]));
    for (std::size_t i = 0; i < n; ++i)
      if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c)
        throw ShapeError(msg("weighted_cross_entropy: target ", targets[i],
                             " out of range [0,", c, ") at row ", i));
    if (!logits.all_finite())
      throw NumericError("weighted_cross_entropy: non-finite logits");

    auto probs = std::make_shared<std::vector<T>>(n * c);
    const T* pl = logits.data();
    double loss = 0.0, wsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = pl + i * c;
      T mx = row[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < c; ++j)
        sum += std::exp(static_cast<double>(row[j] - mx));
      const double logz = std::log(sum) + static_cast<double>(mx);
      for (std::size_t j = 0; j < c; ++j)
        (*probs)[i * c + j] =
            static_cast<T>(std::exp(static_cast<double>(row[j]) - logz));
      const double w = class_weights[static_cast<std::size_t>(targets[i])];
      loss += w * (logz - static_cast<double>(row[targets[i]]));
      wsum += w;
    }
    Tensor<T> out({1}, wants_grad(logits));
    out.data()[0] = static_cast<T>(loss / wsum);
    if (out.requires_grad()) {
      record([logits, out, probs, targets, class_weights, n, c, wsum]() mutable {
        const T g = out.grad()[0];
        T* gl = logits.grad();
        for (std::size_t i = 0; i < n; ++i) {
          const T wi = static_cast<T>(
              class_weights[static_cast<std::size_t>(targets[i])] / wsum);
          for (std::size_t j = 0; j < c; ++j) {
            T p = (*probs)[i * c + j];
            if (static_cast<int>(j) == targets[i]) p -= T(1);
            gl[i * c + j] += g * wi * p;
          }
        }
      });
    }
    return out;
  }

 private:
  bool wants_grad(const Tensor<T>& a) const {
    return enabled_ && a.requires_grad();
  }
  bool wants_grad(const Tensor<T>& a, const Tensor<T>& b) const {
    return enabled_ && (a.requires_grad() || b.requires_grad());
  }
  bool wants_grad(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) const {
    return enabled_ && (a.requires_grad() || b.requires_grad() || c.requires_grad());
  }

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  std::vector<std::function<void()>> nodes_;
  bool enabled_ = true;
  bool backward_done_ = false;
};

using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace adbench

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dcollab/errors.hpp"
#include "dcollab/tensor.hpp"

// Autodiff primitives. Every op computes its forward result eagerly and, when
// a GradTape is live and an input requires grad, records an adjoint closure.
// Adjoints accumulate (+=) into input grads. Feature maps are NCHW row-major.

namespace dcollab {

namespace detail {

template <typename T>
using MatRM =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapCM = Eigen::Map<const MatRM<T>>;

template <typename T>
inline bool track(const Tensor<T>& t) {
  return GradTape<T>::current() != nullptr && t.requires_grad();
}

template <typename T>
inline void mark_output(Tensor<T>& y, bool tracked) {
  if (tracked) y.set_requires_grad(true);
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + " tensor, got shape " +
                     shape_to_string(s));
}

// Unpacks [C*kh*kw, N*OH*OW] patch columns from an NCHW image with zero
// padding. Column index = n*(OH*OW) + oh*OW + ow.
template <typename T>
void im2col(const T* x, std::int64_t n, std::int64_t c, std::int64_t h,
            std::int64_t w, std::int64_t kh, std::int64_t kw,
            std::int64_t stride, std::int64_t pad, std::int64_t oh,
            std::int64_t ow, T* col) {
  const std::int64_t cols = n * oh * ow;
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((ci * kh + ki) * kw + kj) * cols;
        for (std::int64_t ni = 0; ni < n; ++ni) {
          const T* img = x + (ni * c + ci) * h * w;
          T* dst = row + ni * oh * ow;
          for (std::int64_t oi = 0; oi < oh; ++oi) {
            const std::int64_t ih = oi * stride - pad + ki;
            if (ih < 0 || ih >= h) {
              std::fill(dst, dst + ow, T(0));
              dst += ow;
              continue;
            }
            const T* src = img + ih * w;
            for (std::int64_t oj = 0; oj < ow; ++oj) {
              const std::int64_t iw = oj * stride - pad + kj;
              *dst++ = (iw < 0 || iw >= w) ? T(0) : src[iw];
            }
          }
        }
      }
    }
  }
}

// Transpose of im2col: scatters patch-column gradients back onto the image.
template <typename T>
void col2im_add(const T* col, std::int64_t n, std::int64_t c, std::int64_t h,
                std::int64_t w, std::int64_t kh, std::int64_t kw,
                std::int64_t stride, std::int64_t pad, std::int64_t oh,
                std::int64_t ow, T* gx) {
  const std::int64_t cols = n * oh * ow;
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((ci * kh + ki) * kw + kj) * cols;
        for (std::int64_t ni = 0; ni < n; ++ni) {
          T* img = gx + (ni * c + ci) * h * w;
          const T* src = row + ni * oh * ow;
          for (std::int64_t oi = 0; oi < oh; ++oi, src += ow) {
            const std::int64_t ih = oi * stride - pad + ki;
            if (ih < 0 || ih >= h) continue;
            T* dst = img + ih * w;
            for (std::int64_t oj = 0; oj < ow; ++oj) {
              const std::int64_t iw = oj * stride - pad + kj;
              if (iw >= 0 && iw < w) dst[iw] += src[oj];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* py = y.data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];

  const bool ta = detail::track(a), tb = detail::track(b);
  detail::mark_output(y, ta || tb);
  if (ta || tb) {
    GradTape<T>::current()->record([ai = a.impl(), bi = b.impl(),
                                    yi = y.impl(), ta, tb] {
      const auto& gy = yi->ensure_grad();
      if (ta) {
        auto& ga = ai->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (tb) {
        auto& gb = bi->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
      }
    }, y.impl());
  }
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* py = y.data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];

  const bool ta = detail::track(a), tb = detail::track(b);
  detail::mark_output(y, ta || tb);
  if (ta || tb) {
    GradTape<T>::current()->record([ai = a.impl(), bi = b.impl(),
                                    yi = y.impl(), ta, tb] {
      const auto& gy = yi->ensure_grad();
      if (ta) {
        auto& ga = ai->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i)
          ga[i] += gy[i] * bi->data[i];
      }
      if (tb) {
        auto& gb = bi->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i)
          gb[i] += gy[i] * ai->data[i];
      }
    }, y.impl());
  }
  return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* py = y.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) py[i] = c * px[i];

  const bool tx = detail::track(x);
  detail::mark_output(y, tx);
  if (tx) {
    GradTape<T>::current()->record([xi = x.impl(), yi = y.impl(), c] {
      const auto& gy = yi->ensure_grad();
      auto& gx = xi->ensure_grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += c * gy[i];
    }, y.impl());
  }
  return y;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  const T* px = x.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += px[i];
  Tensor<T> y = Tensor<T>::scalar(acc);

  const bool tx = detail::track(x);
  detail::mark_output(y, tx);
  if (tx) {
    GradTape<T>::current()->record([xi = x.impl(), yi = y.impl()] {
      const T g = yi->ensure_grad()[0];
      auto& gx = xi->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    }, y.impl());
  }
  return y;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* py = y.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) py[i] = px[i] > T(0) ? px[i] : T(0);

  const bool tx = detail::track(x);
  detail::mark_output(y, tx);
  if (tx) {
    // Subgradient at 0 is 0 (strict > below).
    GradTape<T>::current()->record([xi = x.impl(), yi = y.impl()] {
      const auto& gy = yi->ensure_grad();
      auto& gx = xi->ensure_grad();
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (xi->data[i] > T(0)) gx[i] += gy[i];
    }, y.impl());
  }
  return y;
}

// ---------------------------------------------------------------------------
// Channel concatenation / slicing
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_depthwise(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw UsageError("concat_depthwise: no inputs");
  for (const auto& x : xs) detail::require_rank(x.shape(), 4, "concat");
  const Shape& s0 = xs[0].shape();
  std::int64_t c_total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ShapeError("concat_depthwise: spatial/batch mismatch " +
                       shape_to_string(s0) + " vs " + shape_to_string(s));
    c_total += s[1];
  }
  const std::int64_t n = s0[0], hw = s0[2] * s0[3];
  Tensor<T> y = Tensor<T>::zeros({n, c_total, s0[2], s0[3]});
  T* py = y.data();
  std::int64_t off = 0;
  for (const auto& x : xs) {
    const std::int64_t ci = x.shape()[1];
    const T* px = x.data();
    for (std::int64_t ni = 0; ni < n; ++ni)
      std::copy(px + ni * ci * hw, px + (ni + 1) * ci * hw,
                py + (ni * c_total + off) * hw);
    off += ci;
  }

  bool any = false;
  for (const auto& x : xs) any = any || detail::track(x);
  detail::mark_output(y, any);
  if (any) {
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
    impls.reserve(xs.size());
    for (const auto& x : xs) impls.push_back(x.impl());
    GradTape<T>::current()->record([impls, yi = y.impl(), n, hw, c_total] {
      const auto& gy = yi->ensure_grad();
      std::int64_t off = 0;
      for (const auto& xi : impls) {
        const std::int64_t ci = xi->shape[1];
        if (xi->requires_grad) {
          auto& gx = xi->ensure_grad();
          for (std::int64_t ni = 0; ni < n; ++ni) {
            const T* src = gy.data() + (ni * c_total + off) * hw;
            T* dst = gx.data() + ni * ci * hw;
            for (std::int64_t k = 0; k < ci * hw; ++k) dst[k] += src[k];
          }
        }
        off += ci;
      }
    }, y.impl());
  }
  return y;
}

// Channel range [c0, c1) of an NCHW tensor.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t c0, std::int64_t c1) {
  detail::require_rank(x.shape(), 4, "slice_channels");
  const Shape& s = x.shape();
  if (c0 < 0 || c1 > s[1] || c0 >= c1)
    throw UsageError("slice_channels: invalid range [" + std::to_string(c0) +
                     "," + std::to_string(c1) + ") for shape " +
                     shape_to_string(s));
  const std::int64_t n = s[0], c = s[1], hw = s[2] * s[3], cs = c1 - c0;
  Tensor<T> y = Tensor<T>::zeros({n, cs, s[2], s[3]});
  const T* px = x.data();
  T* py = y.data();
  for (std::int64_t ni = 0; ni < n; ++ni)
    std::copy(px + (ni * c + c0) * hw, px + (ni * c + c1) * hw,
              py + ni * cs * hw);

  const bool tx = detail::track(x);
  detail::mark_output(y, tx);
  if (tx) {
    GradTape<T>::current()->record(
        [xi = x.impl(), yi = y.impl(), n, c, hw, c0, cs] {
          const auto& gy = yi->ensure_grad();
          auto& gx = xi->ensure_grad();
          for (std::int64_t ni = 0; ni < n; ++ni) {
            const T* src = gy.data() + ni * cs * hw;
            T* dst = gx.data() + (ni * c + c0) * hw;
            for (std::int64_t k = 0; k < cs * hw; ++k) dst[k] += src[k];
          }
        }, y.impl());
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

// Cross-correlation (no kernel flip), zero padding, no dilation or groups.
// x: [N,Cin,H,W], weight: [Cout,Cin,kh,kw], bias: [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int padding) {
  detail::require_rank(x.shape(), 4, "conv2d input");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs[1] != ws[1])
    throw ShapeError("conv2d: input channels " + shape_to_string(xs) +
                     " do not match weight " + shape_to_string(ws));
  if (stride < 1 || padding < 0)
    throw UsageError("conv2d: stride must be >=1 and padding >=0");
  if (bias.defined() && bias.shape() != Shape{ws[0]})
    throw ShapeError("conv2d: bias shape " + shape_to_string(bias.shape()) +
                     " does not match weight " + shape_to_string(ws));
  const std::int64_t n = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const std::int64_t cout = ws[0], kh = ws[2], kw = ws[3];
  const std::int64_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::int64_t ow = (w + 2 * padding - kw) / stride + 1;
  if (h + 2 * padding < kh || w + 2 * padding < kw || oh < 1 || ow < 1)
    throw ShapeError("conv2d: kernel " + shape_to_string(ws) +
                     " too large for input " + shape_to_string(xs) +
                     " with padding " + std::to_string(padding));

  const std::int64_t kdim = cin * kh * kw;
  const std::int64_t cols = n * oh * ow;
  std::vector<T> col(static_cast<std::size_t>(kdim * cols));
  detail::im2col(x.data(), n, cin, h, w, kh, kw, stride, padding, oh, ow,
                 col.data());

  // ymat[cout, n*oh*ow] = weight[cout, kdim] * col
  std::vector<T> ymat(static_cast<std::size_t>(cout * cols));
  {
    detail::MapCM<T> wm(weight.data(), cout, kdim);
    detail::MapCM<T> cm(col.data(), kdim, cols);
    detail::MapM<T> ym(ymat.data(), cout, cols);
    ym.noalias() = wm * cm;
  }

  Tensor<T> y = Tensor<T>::zeros({n, cout, oh, ow});
  T* py = y.data();
  const std::int64_t ohw = oh * ow;
  for (std::int64_t ni = 0; ni < n; ++ni)
    for (std::int64_t co = 0; co < cout; ++co) {
      const T* src = ymat.data() + co * cols + ni * ohw;
      T* dst = py + (ni * cout + co) * ohw;
      if (bias.defined()) {
        const T b = bias.data()[co];
        for (std::int64_t k = 0; k < ohw; ++k) dst[k] = src[k] + b;
      } else {
        std::copy(src, src + ohw, dst);
      }
    }

  const bool tx = detail::track(x), tw = detail::track(weight);
  const bool tb = bias.defined() && detail::track(bias);
  detail::mark_output(y, tx || tw || tb);
  if (tx || tw || tb) {
    auto bi = bias.defined() ? bias.impl() : nullptr;
    GradTape<T>::current()->record([xi = x.impl(), wi = weight.impl(), bi,
                                    yi = y.impl(), n, cin, h, w, cout, kh, kw,
                                    stride, padding, oh, ow, tx, tw, tb] {
      const std::int64_t kdim = cin * kh * kw;
      const std::int64_t cols = n * oh * ow;
      const std::int64_t ohw = oh * ow;
      const auto& gy = yi->ensure_grad();

      // Gather dY into [cout, n*oh*ow] to match the forward layout.
      std::vector<T> gymat(static_cast<std::size_t>(cout * cols));
      for (std::int64_t ni = 0; ni < n; ++ni)
        for (std::int64_t co = 0; co < cout; ++co)
          std::copy(gy.data() + (ni * cout + co) * ohw,
                    gy.data() + (ni * cout + co + 1) * ohw,
                    gymat.data() + co * cols + ni * ohw);

      if (tb) {
        auto& gb = bi->ensure_grad();
        for (std::int64_t co = 0; co < cout; ++co) {
          T acc = T(0);
          const T* row = gymat.data() + co * cols;
          for (std::int64_t k = 0; k < cols; ++k) acc += row[k];
          gb[co] += acc;
        }
      }
      if (tw) {
        std::vector<T> col(static_cast<std::size_t>(kdim * cols));
        detail::im2col(xi->data.data(), n, cin, h, w, kh, kw, stride, padding,
                       oh, ow, col.data());
        auto& gw = wi->ensure_grad();
        detail::MapCM<T> gym(gymat.data(), cout, cols);
        detail::MapCM<T> cm(col.data(), kdim, cols);
        detail::MapM<T> gwm(gw.data(), cout, kdim);
        gwm.noalias() += gym * cm.transpose();
      }
      if (tx) {
        std::vector<T> gcol(static_cast<std::size_t>(kdim * cols));
        detail::MapCM<T> wm(wi->data.data(), cout, kdim);
        detail::MapCM<T> gym(gymat.data(), cout, cols);
        detail::MapM<T> gcm(gcol.data(), kdim, cols);
        gcm.noalias() = wm.transpose() * gym;
        auto& gx = xi->ensure_grad();
        detail::col2im_add(gcol.data(), n, cin, h, w, kh, kw, stride, padding,
                           oh, ow, gx.data());
      }
    }, y.impl());
  }
  return y;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Per-channel normalization over N,H,W. Train mode uses batch statistics
// (biased variance) and updates running stats in place with an exponential
// moving average (unbiased variance, torch convention); eval mode uses the
// running stats. running_mean/var are buffers, never differentiated.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, Mode mode, T epsilon, T momentum) {
  detail::require_rank(x.shape(), 4, "batch_norm input");
  const Shape& xs = x.shape();
  const std::int64_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw ShapeError("batch_norm: gamma " + shape_to_string(gamma.shape()) +
                     " / beta " + shape_to_string(beta.shape()) +
                     " do not match channels of " + shape_to_string(xs));
  if (running_mean.shape() != Shape{c} || running_var.shape() != Shape{c})
    throw ShapeError("batch_norm: running stats do not match channels of " +
                     shape_to_string(xs));
  const std::int64_t m = n * hw;
  if (mode == Mode::kTrain && m < 2)
    throw UsageError("batch_norm: train mode needs N*H*W >= 2, got " +
                     std::to_string(m));

  Tensor<T> y = Tensor<T>::zeros(xs);
  std::vector<T> mean(static_cast<std::size_t>(c)),
      invstd(static_cast<std::size_t>(c));

  if (mode == Mode::kTrain) {
    for (std::int64_t ci = 0; ci < c; ++ci) {
      T acc = T(0);
      for (std::int64_t ni = 0; ni < n; ++ni) {
        const T* p = x.data() + (ni * c + ci) * hw;
        for (std::int64_t k = 0; k < hw; ++k) acc += p[k];
      }
      const T mu = acc / static_cast<T>(m);
      T vacc = T(0);
      for (std::int64_t ni = 0; ni < n; ++ni) {
        const T* p = x.data() + (ni * c + ci) * hw;
        for (std::int64_t k = 0; k < hw; ++k) {
          const T d = p[k] - mu;
          vacc += d * d;
        }
      }
      const T var = vacc / static_cast<T>(m);
      mean[ci] = mu;
      invstd[ci] = T(1) / std::sqrt(var + epsilon);
      running_mean.data()[ci] =
          (T(1) - momentum) * running_mean.data()[ci] + momentum * mu;
      running_var.data()[ci] =
          (T(1) - momentum) * running_var.data()[ci] +
          momentum * var * static_cast<T>(m) / static_cast<T>(m - 1);
    }
  } else {
    for (std::int64_t ci = 0; ci < c; ++ci) {
      mean[ci] = running_mean.data()[ci];
      invstd[ci] = T(1) / std::sqrt(running_var.data()[ci] + epsilon);
    }
  }

  for (std::int64_t ni = 0; ni < n; ++ni)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const T* p = x.data() + (ni * c + ci) * hw;
      T* q = y.data() + (ni * c + ci) * hw;
      const T mu = mean[ci], is = invstd[ci];
      const T g = gamma.data()[ci], b = beta.data()[ci];
      for (std::int64_t k = 0; k < hw; ++k) q[k] = g * (p[k] - mu) * is + b;
    }

  const bool tx = detail::track(x), tg = detail::track(gamma),
             tb = detail::track(beta);
  detail::mark_output(y, tx || tg || tb);
  if (tx || tg || tb) {
    const bool train = mode == Mode::kTrain;
    GradTape<T>::current()->record([xi = x.impl(), gi = gamma.impl(),
                                    bi = beta.impl(), yi = y.impl(),
                                    mean = std::move(mean),
                                    invstd = std::move(invstd), n, c, hw, tx,
                                    tg, tb, train] {
      const auto& gy = yi->ensure_grad();
      const std::int64_t m = n * hw;
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const T mu = mean[static_cast<std::size_t>(ci)];
        const T is = invstd[static_cast<std::size_t>(ci)];
        const T g = gi->data[static_cast<std::size_t>(ci)];

        T sum_gy = T(0), sum_gy_xhat = T(0);
        for (std::int64_t ni = 0; ni < n; ++ni) {
          const T* px = xi->data.data() + (ni * c + ci) * hw;
          const T* pg = gy.data() + (ni * c + ci) * hw;
          for (std::int64_t k = 0; k < hw; ++k) {
            sum_gy += pg[k];
            sum_gy_xhat += pg[k] * (px[k] - mu) * is;
          }
        }
        if (tb) bi->ensure_grad()[static_cast<std::size_t>(ci)] += sum_gy;
        if (tg) gi->ensure_grad()[static_cast<std::size_t>(ci)] += sum_gy_xhat;
        if (tx) {
          auto& gx = xi->ensure_grad();
          if (train) {
            // dL/dx = g*is/m * (m*gy - sum(gy) - xhat*sum(gy*xhat))
            const T k1 = g * is / static_cast<T>(m);
            for (std::int64_t ni = 0; ni < n; ++ni) {
              const T* px = xi->data.data() + (ni * c + ci) * hw;
              const T* pg = gy.data() + (ni * c + ci) * hw;
              T* pgx = gx.data() + (ni * c + ci) * hw;
              for (std::int64_t k = 0; k < hw; ++k) {
                const T xhat = (px[k] - mu) * is;
                pgx[k] += k1 * (static_cast<T>(m) * pg[k] - sum_gy -
                                xhat * sum_gy_xhat);
              }
            }
          } else {
            const T k1 = g * is;  // running stats are constants
            for (std::int64_t ni = 0; ni < n; ++ni) {
              const T* pg = gy.data() + (ni * c + ci) * hw;
              T* pgx = gx.data() + (ni * c + ci) * hw;
              for (std::int64_t k = 0; k < hw; ++k) pgx[k] += k1 * pg[k];
            }
          }
        }
      }
    }, y.impl());
  }
  return y;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int k, int stride) {
  detail::require_rank(x.shape(), 4, "max_pool2d");
  if (k < 1 || stride < 1)
    throw UsageError("max_pool2d: kernel and stride must be >= 1");
  const Shape& xs = x.shape();
  const std::int64_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const std::int64_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  if (h < k || w < k)
    throw ShapeError("max_pool2d: window " + std::to_string(k) +
                     " larger than input " + shape_to_string(xs));

  Tensor<T> y = Tensor<T>::zeros({n, c, oh, ow});
  // Flat argmax per output element; ties resolved to the first scan position.
  std::vector<std::int64_t> arg(static_cast<std::size_t>(n * c * oh * ow));
  T* py = y.data();
  std::int64_t out = 0;
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    const T* img = x.data() + nc * h * w;
    for (std::int64_t oi = 0; oi < oh; ++oi)
      for (std::int64_t oj = 0; oj < ow; ++oj) {
        T best = img[(oi * stride) * w + oj * stride];
        std::int64_t besti = (oi * stride) * w + oj * stride;
        for (std::int64_t ki = 0; ki < k; ++ki)
          for (std::int64_t kj = 0; kj < k; ++kj) {
            const std::int64_t idx = (oi * stride + ki) * w + oj * stride + kj;
            if (img[idx] > best) {
              best = img[idx];
              besti = idx;
            }
          }
        py[out] = best;
        arg[static_cast<std::size_t>(out)] = nc * h * w + besti;
        ++out;
      }
  }

  const bool tx = detail::track(x);
  detail::mark_output(y, tx);
  if (tx) {
    GradTape<T>::current()->record(
        [xi = x.impl(), yi = y.impl(), arg = std::move(arg)] {
          const auto& gy = yi->ensure_grad();
          auto& gx = xi->ensure_grad();
          for (std::size_t i = 0; i < gy.size(); ++i)
            gx[static_cast<std::size_t>(arg[i])] += gy[i];
        }, y.impl());
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool");
  const Shape& xs = x.shape();
  const std::int64_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  Tensor<T> y = Tensor<T>::zeros({n, c});
  T* py = y.data();
  for (std::int64_t i = 0; i < n * c; ++i) {
    const T* p = x.data() + i * hw;
    T acc = T(0);
    for (std::int64_t k = 0; k < hw; ++k) acc += p[k];
    py[i] = acc / static_cast<T>(hw);
  }

  const bool tx = detail::track(x);
  detail::mark_output(y, tx);
  if (tx) {
    GradTape<T>::current()->record([xi = x.impl(), yi = y.impl(), hw] {
      const auto& gy = yi->ensure_grad();
      auto& gx = xi->ensure_grad();
      const T inv = T(1) / static_cast<T>(hw);
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const T g = gy[i] * inv;
        T* p = gx.data() + static_cast<std::int64_t>(i) * hw;
        for (std::int64_t k = 0; k < hw; ++k) p[k] += g;
      }
    }, y.impl());
  }
  return y;
}

// ---------------------------------------------------------------------------
// Affine
// ---------------------------------------------------------------------------

// y[N,Dout] = x[N,Din] * weight[Dout,Din]^T + bias
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  detail::require_rank(x.shape(), 2, "linear input");
  detail::require_rank(weight.shape(), 2, "linear weight");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs[1] != ws[1])
    throw ShapeError("linear: input " + shape_to_string(xs) +
                     " does not match weight " + shape_to_string(ws));
  if (bias.defined() && bias.shape() != Shape{ws[0]})
    throw ShapeError("linear: bias shape " + shape_to_string(bias.shape()) +
                     " does not match weight " + shape_to_string(ws));
  const std::int64_t n = xs[0], din = xs[1], dout = ws[0];

  Tensor<T> y = Tensor<T>::zeros({n, dout});
  {
    detail::MapCM<T> xm(x.data(), n, din);
    detail::MapCM<T> wm(weight.data(), dout, din);
    detail::MapM<T> ym(y.data(), n, dout);
    ym.noalias() = xm * wm.transpose();
  }
  if (bias.defined()) {
    T* py = y.data();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < dout; ++j) py[i * dout + j] += bias.data()[j];
  }

  const bool tx = detail::track(x), tw = detail::track(weight);
  const bool tb = bias.defined() && detail::track(bias);
  detail::mark_output(y, tx || tw || tb);
  if (tx || tw || tb) {
    auto bi = bias.defined() ? bias.impl() : nullptr;
    GradTape<T>::current()->record([xi = x.impl(), wi = weight.impl(), bi,
                                    yi = y.impl(), n, din, dout, tx, tw, tb] {
      const auto& gy = yi->ensure_grad();
      detail::MapCM<T> gym(gy.data(), n, dout);
      if (tx) {
        auto& gx = xi->ensure_grad();
        detail::MapCM<T> wm(wi->data.data(), dout, din);
        detail::MapM<T> gxm(gx.data(), n, din);
        gxm.noalias() += gym * wm;
      }
      if (tw) {
        auto& gw = wi->ensure_grad();
        detail::MapCM<T> xm(xi->data.data(), n, din);
        detail::MapM<T> gwm(gw.data(), dout, din);
        gwm.noalias() += gym.transpose() * xm;
      }
      if (tb) {
        auto& gb = bi->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < dout; ++j) gb[j] += gy[i * dout + j];
      }
    }, y.impl());
  }
  return y;
}

// ---------------------------------------------------------------------------
// Classification loss
// ---------------------------------------------------------------------------

// Mean over the batch of -log softmax(logits)[target], max-stabilized.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits,
                                const std::vector<std::int64_t>& targets) {
  detail::require_rank(logits.shape(), 2, "softmax_cross_entropy");
  const std::int64_t n = logits.shape()[0], k = logits.shape()[1];
  if (k < 2)
    throw UsageError("softmax_cross_entropy: needs K >= 2 classes, got " +
                     std::to_string(k));
  if (static_cast<std::int64_t>(targets.size()) != n)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for batch of " + std::to_string(n));
  for (std::int64_t i = 0; i < n; ++i)
    if (targets[static_cast<std::size_t>(i)] < 0 ||
        targets[static_cast<std::size_t>(i)] >= k)
      throw IndexError("softmax_cross_entropy: target " +
                       std::to_string(targets[static_cast<std::size_t>(i)]) +
                       " out of range [0," + std::to_string(k) + ") at row " +
                       std::to_string(i));

  std::vector<T> probs(static_cast<std::size_t>(n * k));
  T loss = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * k;
    T mx = row[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T z = T(0);
    for (std::int64_t j = 0; j < k; ++j) {
      const T e = std::exp(row[j] - mx);
      probs[static_cast<std::size_t>(i * k + j)] = e;
      z += e;
    }
    const std::int64_t t = targets[static_cast<std::size_t>(i)];
    loss += std::log(z) - (row[t] - mx);
    const T invz = T(1) / z;
    for (std::int64_t j = 0; j < k; ++j)
      probs[static_cast<std::size_t>(i * k + j)] *= invz;
  }
  Tensor<T> y = Tensor<T>::scalar(loss / static_cast<T>(n));

  const bool tx = detail::track(logits);
  detail::mark_output(y, tx);
  if (tx) {
    GradTape<T>::current()->record([xi = logits.impl(), yi = y.impl(),
                                    probs = std::move(probs), targets, n, k] {
      const T g = yi->ensure_grad()[0] / static_cast<T>(n);
      auto& gx = xi->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t t = targets[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < k; ++j) {
          T p = probs[static_cast<std::size_t>(i * k + j)];
          if (j == t) p -= T(1);
          gx[static_cast<std::size_t>(i * k + j)] += g * p;
        }
      }
    }, y.impl());
  }
  return y;
}

// ---------------------------------------------------------------------------
// Cross-stitch combination
// ---------------------------------------------------------------------------

// y_t = sum_s alpha[t,s] * x_s, applied per feature map. alpha is [T,T].
template <typename T>
std::vector<Tensor<T>> cross_stitch_combine(const std::vector<Tensor<T>>& xs,
                                            const Tensor<T>& alpha) {
  const std::int64_t t_count = static_cast<std::int64_t>(xs.size());
  if (t_count == 0) throw UsageError("cross_stitch_combine: no inputs");
  if (alpha.shape() != Shape{t_count, t_count})
    throw ShapeError("cross_stitch_combine: alpha " +
                     shape_to_string(alpha.shape()) + " does not match " +
                     std::to_string(t_count) + " inputs");
  for (const auto& x : xs)
    if (x.shape() != xs[0].shape())
      throw ShapeError("cross_stitch_combine: input shape mismatch " +
                       shape_to_string(xs[0].shape()) + " vs " +
                       shape_to_string(x.shape()));

  const std::int64_t numel = xs[0].numel();
  std::vector<Tensor<T>> ys;
  ys.reserve(static_cast<std::size_t>(t_count));
  for (std::int64_t t = 0; t < t_count; ++t) {
    Tensor<T> y = Tensor<T>::zeros(xs[0].shape());
    T* py = y.data();
    for (std::int64_t s = 0; s < t_count; ++s) {
      const T a = alpha.data()[t * t_count + s];
      const T* px = xs[static_cast<std::size_t>(s)].data();
      for (std::int64_t i = 0; i < numel; ++i) py[i] += a * px[i];
    }
    ys.push_back(std::move(y));
  }

  bool any = detail::track(alpha);
  for (const auto& x : xs) any = any || detail::track(x);
  if (any) {
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> xim, yim;
    for (const auto& x : xs) xim.push_back(x.impl());
    for (auto& y : ys) {
      y.set_requires_grad(true);
      yim.push_back(y.impl());
    }
    GradTape<T>::current()->record([xim, yim, ai = alpha.impl(), t_count,
                                    numel] {
      for (std::int64_t t = 0; t < t_count; ++t) {
        const auto& gy = yim[static_cast<std::size_t>(t)]->ensure_grad();
        for (std::int64_t s = 0; s < t_count; ++s) {
          const auto& xs_ = xim[static_cast<std::size_t>(s)];
          if (ai->requires_grad) {
            T acc = T(0);
            for (std::int64_t i = 0; i < numel; ++i)
              acc += gy[static_cast<std::size_t>(i)] *
                     xs_->data[static_cast<std::size_t>(i)];
            ai->ensure_grad()[static_cast<std::size_t>(t * t_count + s)] += acc;
          }
          if (xs_->requires_grad) {
            const T a = ai->data[static_cast<std::size_t>(t * t_count + s)];
            auto& gx = xs_->ensure_grad();
            for (std::int64_t i = 0; i < numel; ++i)
              gx[static_cast<std::size_t>(i)] +=
                  a * gy[static_cast<std::size_t>(i)];
          }
        }
      }
    }, yim);
  }
  return ys;
}

}  // namespace dcollab

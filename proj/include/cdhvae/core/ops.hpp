#pragma once

// Differentiable tensor operations used by the network and the objective.

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

#include "cdhvae/core/autodiff.hpp"

namespace cdhvae::ad {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

inline void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw InputError(std::string(op) + ": " + detail);
}

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.shape() == b.shape(), op, "shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().emit(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) a.accumulate(self.grad);
    if (b.requires_grad()) b.accumulate(self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().emit(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) a.accumulate(self.grad);
    if (b.requires_grad()) {
      auto& g = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().emit(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) {
      auto& g = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.value()[i];
    }
    if (b.requires_grad()) {
      auto& g = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.value()[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return a.tape().emit(std::move(out), {a}, [a, s](Node<T>& self) {
    auto& g = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

/// x * sigmoid(x)
template <typename T>
Var<T> swish(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v / (T(1) + std::exp(-v));
  return a.tape().emit(std::move(out), {a}, [a](Node<T>& self) {
    auto& g = a.grad();
    const auto& x = a.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-x[i]));
      g[i] += self.grad[i] * (s * (T(1) + x[i] * (T(1) - s)));
    }
  });
}

/// Hard clamp; the gradient is passed through only strictly inside the range.
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::clamp(v, lo, hi);
  return a.tape().emit(std::move(out), {a}, [a, lo, hi](Node<T>& self) {
    auto& g = a.grad();
    const auto& x = a.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > lo && x[i] < hi) g[i] += self.grad[i];
    }
  });
}

/// Repeat a (1, C, H, W) tensor n times along the batch axis.
template <typename T>
Var<T> broadcast_batch(const Var<T>& a, int n) {
  detail::require(a.shape().n == 1, "broadcast_batch", "input batch must be 1");
  Shape s = a.shape();
  s.n = n;
  Tensor<T> out(s);
  for (int i = 0; i < n; ++i) std::copy(a.value().data(), a.value().data() + a.value().size(), out.sample(i));
  return a.tape().emit(std::move(out), {a}, [a, n](Node<T>& self) {
    auto& g = a.grad();
    for (int i = 0; i < n; ++i) {
      const T* src = self.grad.sample(i);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += src[k];
    }
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& a, int begin, int end) {
  const Shape in = a.shape();
  detail::require(0 <= begin && begin < end && end <= in.c, "slice_channels", "bad range");
  Shape s = in;
  s.c = end - begin;
  Tensor<T> out(s);
  const std::size_t hw = in.spatial();
  for (int n = 0; n < in.n; ++n) {
    std::copy(a.value().sample(n) + begin * hw, a.value().sample(n) + end * hw, out.sample(n));
  }
  return a.tape().emit(std::move(out), {a}, [a, begin, hw](Node<T>& self) {
    auto& g = a.grad();
    const Shape os = self.value.shape();
    for (int n = 0; n < os.n; ++n) {
      T* dst = g.sample(n) + begin * hw;
      const T* src = self.grad.sample(n);
      for (std::size_t k = 0; k < os.per_sample(); ++k) dst[k] += src[k];
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  detail::require(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w, "concat_channels", "shape mismatch");
  Shape s = sa;
  s.c = sa.c + sb.c;
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    std::copy(a.value().sample(n), a.value().sample(n) + sa.per_sample(), out.sample(n));
    std::copy(b.value().sample(n), b.value().sample(n) + sb.per_sample(), out.sample(n) + sa.per_sample());
  }
  return a.tape().emit(std::move(out), {a, b}, [a, b](Node<T>& self) {
    const Shape sa = a.shape();
    const Shape sb = b.shape();
    for (int n = 0; n < sa.n; ++n) {
      const T* src = self.grad.sample(n);
      if (a.requires_grad()) {
        T* dst = a.grad().sample(n);
        for (std::size_t k = 0; k < sa.per_sample(); ++k) dst[k] += src[k];
      }
      if (b.requires_grad()) {
        T* dst = b.grad().sample(n);
        for (std::size_t k = 0; k < sb.per_sample(); ++k) dst[k] += src[sa.per_sample() + k];
      }
    }
  });
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Var<T> upsample2(const Var<T>& a) {
  const Shape in = a.shape();
  Shape s{in.n, in.c, in.h * 2, in.w * 2};
  Tensor<T> out(s);
  for (int n = 0; n < in.n; ++n)
    for (int c = 0; c < in.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) out.at(n, c, y, x) = a.value().at(n, c, y / 2, x / 2);
  return a.tape().emit(std::move(out), {a}, [a](Node<T>& self) {
    auto& g = a.grad();
    const Shape s = self.value.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < s.h; ++y)
          for (int x = 0; x < s.w; ++x) g.at(n, c, y / 2, x / 2) += self.grad.at(n, c, y, x);
  });
}

/// x (N, D, 1, 1) times weight (1, 1, M, D) transposed, plus bias (1, M, 1, 1).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = Var<T>()) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  detail::require(xs.h == 1 && xs.w == 1 && ws.n == 1 && ws.c == 1 && ws.w == xs.c, "linear",
                  "expected x (N,D,1,1) and W (1,1,M,D); got " + xs.str() + " and " + ws.str());
  const int m = ws.h;
  if (bias) detail::require(bias.shape() == Shape{1, m, 1, 1}, "linear", "bias shape");
  Tensor<T> out(Shape{xs.n, m, 1, 1});
  {
    detail::ConstMatMap<T> X(x.value().data(), xs.n, xs.c);
    detail::ConstMatMap<T> W(weight.value().data(), m, xs.c);
    detail::MatMap<T> Y(out.data(), xs.n, m);
    Y.noalias() = X * W.transpose();
    if (bias) {
      for (int n = 0; n < xs.n; ++n)
        for (int j = 0; j < m; ++j) Y(n, j) += bias.value()[j];
    }
  }
  const Var<T> b = bias;
  return x.tape().emit(std::move(out), {x, weight, b}, [x, weight, b, m](Node<T>& self) {
    const Shape xs = x.shape();
    detail::ConstMatMap<T> G(self.grad.data(), xs.n, m);
    if (x.requires_grad()) {
      detail::ConstMatMap<T> W(weight.value().data(), m, xs.c);
      detail::MatMap<T> GX(x.grad().data(), xs.n, xs.c);
      GX.noalias() += G * W;
    }
    if (weight.requires_grad()) {
      detail::ConstMatMap<T> X(x.value().data(), xs.n, xs.c);
      detail::MatMap<T> GW(weight.grad().data(), m, xs.c);
      GW.noalias() += G.transpose() * X;
    }
    if (b && b.requires_grad()) {
      auto& gb = b.grad();
      for (int n = 0; n < xs.n; ++n)
        for (int j = 0; j < m; ++j) gb[j] += G(n, j);
    }
  });
}

struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  bool depthwise = false;
};

namespace detail {

inline int conv_out(int in, const ConvSpec& s) { return (in + 2 * s.padding - s.kernel) / s.stride + 1; }

template <typename T>
void im2col(const T* x, int cin, int h, int w, const ConvSpec& s, int ho, int wo, T* col) {
  const int k = s.kernel;
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s.stride - s.padding + ky;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s.stride - s.padding + kx;
            row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x[(c * h + iy) * w + ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, int cin, int h, int w, const ConvSpec& s, int ho, int wo, T* x) {
  const int k = s.kernel;
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s.stride - s.padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s.stride - s.padding + kx;
            if (ix >= 0 && ix < w) x[(c * h + iy) * w + ix] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution. Dense weights are (Cout, Cin, k, k); depthwise weights
/// are (C, 1, k, k). Bias, when given, is (1, Cout, 1, 1).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvSpec spec) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  const int k = spec.kernel;
  detail::require(ws.h == k && ws.w == k, "conv2d", "kernel size mismatch " + ws.str());
  const int cout = ws.n;
  if (spec.depthwise) {
    detail::require(ws.c == 1 && cout == xs.c, "conv2d", "depthwise weight must be (C,1,k,k)");
  } else {
    detail::require(ws.c == xs.c, "conv2d", "input channels " + std::to_string(xs.c) + " vs weight " + ws.str());
  }
  if (bias) detail::require(bias.shape() == Shape{1, cout, 1, 1}, "conv2d", "bias shape");
  const int ho = detail::conv_out(xs.h, spec);
  const int wo = detail::conv_out(xs.w, spec);
  detail::require(ho > 0 && wo > 0, "conv2d", "empty output");
  const Shape os{xs.n, cout, ho, wo};
  Tensor<T> out(os);
  const bool pointwise = !spec.depthwise && k == 1 && spec.stride == 1 && spec.padding == 0;

  if (spec.depthwise) {
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < cout; ++c) {
        const T* src = x.value().sample(n) + static_cast<std::size_t>(c) * xs.spatial();
        const T* wk = weight.value().data() + static_cast<std::size_t>(c) * k * k;
        T* dst = out.sample(n) + static_cast<std::size_t>(c) * ho * wo;
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            T acc = 0;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * spec.stride - spec.padding + ky;
              if (iy < 0 || iy >= xs.h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * spec.stride - spec.padding + kx;
                if (ix >= 0 && ix < xs.w) acc += wk[ky * k + kx] * src[iy * xs.w + ix];
              }
            }
            dst[oy * wo + ox] = acc;
          }
      }
  } else {
    const int kk = xs.c * k * k;
    detail::ConstMatMap<T> W(weight.value().data(), cout, kk);
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kk) * ho * wo);
    for (int n = 0; n < xs.n; ++n) {
      const T* src = x.value().sample(n);
      if (!pointwise) {
        detail::im2col(src, xs.c, xs.h, xs.w, spec, ho, wo, col.data());
        src = col.data();
      }
      detail::ConstMatMap<T> C(src, kk, ho * wo);
      detail::MatMap<T> Y(out.sample(n), cout, ho * wo);
      Y.noalias() = W * C;
    }
  }
  if (bias) {
    const auto& b = bias.value();
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < cout; ++c) {
        T* dst = out.sample(n) + static_cast<std::size_t>(c) * ho * wo;
        for (int i = 0; i < ho * wo; ++i) dst[i] += b[c];
      }
  }

  const Var<T> b = bias;
  return x.tape().emit(std::move(out), {x, weight, b}, [x, weight, b, spec, pointwise](Node<T>& self) {
    const Shape xs = x.shape();
    const Shape os = self.value.shape();
    const int k = spec.kernel;
    const int cout = os.c;
    const int ho = os.h;
    const int wo = os.w;
    if (b && b.requires_grad()) {
      auto& gb = b.grad();
      for (int n = 0; n < os.n; ++n)
        for (int c = 0; c < cout; ++c) {
          const T* g = self.grad.sample(n) + static_cast<std::size_t>(c) * ho * wo;
          T acc = 0;
          for (int i = 0; i < ho * wo; ++i) acc += g[i];
          gb[c] += acc;
        }
    }
    if (spec.depthwise) {
      T* gw = weight.requires_grad() ? weight.grad().data() : nullptr;
      T* gx_all = x.requires_grad() ? x.grad().data() : nullptr;
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < cout; ++c) {
          const std::size_t in_off = (static_cast<std::size_t>(n) * xs.c + c) * xs.spatial();
          const T* src = x.value().data() + in_off;
          const T* wk = weight.value().data() + static_cast<std::size_t>(c) * k * k;
          const T* g = self.grad.sample(n) + static_cast<std::size_t>(c) * ho * wo;
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              const T go = g[oy * wo + ox];
              if (go == T(0)) continue;
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * spec.stride - spec.padding + ky;
                if (iy < 0 || iy >= xs.h) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ox * spec.stride - spec.padding + kx;
                  if (ix < 0 || ix >= xs.w) continue;
                  if (gw) gw[static_cast<std::size_t>(c) * k * k + ky * k + kx] += go * src[iy * xs.w + ix];
                  if (gx_all) gx_all[in_off + iy * xs.w + ix] += go * wk[ky * k + kx];
                }
              }
            }
        }
      return;
    }
    const int kk = xs.c * k * k;
    detail::ConstMatMap<T> W(weight.value().data(), cout, kk);
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kk) * ho * wo);
    std::vector<T> dcol(pointwise ? 0 : static_cast<std::size_t>(kk) * ho * wo);
    for (int n = 0; n < xs.n; ++n) {
      detail::ConstMatMap<T> G(self.grad.sample(n), cout, ho * wo);
      if (weight.requires_grad()) {
        const T* src = x.value().sample(n);
        if (!pointwise) {
          detail::im2col(src, xs.c, xs.h, xs.w, spec, ho, wo, col.data());
          src = col.data();
        }
        detail::ConstMatMap<T> C(src, kk, ho * wo);
        detail::MatMap<T> GW(weight.grad().data(), cout, kk);
        GW.noalias() += G * C.transpose();
      }
      if (x.requires_grad()) {
        if (pointwise) {
          detail::MatMap<T> GX(x.grad().sample(n), kk, ho * wo);
          GX.noalias() += W.transpose() * G;
        } else {
          detail::MatMap<T> DC(dcol.data(), kk, ho * wo);
          DC.noalias() = W.transpose() * G;
          detail::col2im_add(dcol.data(), xs.c, xs.h, xs.w, spec, ho, wo, x.grad().sample(n));
        }
      }
    }
  });
}

/// Per-sample, per-channel normalization over spatial positions followed by
/// an affine map whose scale and shift are given per sample: gamma and beta
/// are (N, C, 1, 1) or (1, C, 1, 1) broadcast across the batch.
template <typename T>
Var<T> instance_norm_affine(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const Shape xs = x.shape();
  const Shape gs = gamma.shape();
  detail::require(gs == beta.shape(), "instance_norm_affine", "gamma/beta shape mismatch");
  detail::require(gs.c == xs.c && gs.h == 1 && gs.w == 1 && (gs.n == xs.n || gs.n == 1),
                  "instance_norm_affine",
                  "affine parameters " + gs.str() + " do not match features " + xs.str());
  const int hw = static_cast<int>(xs.spatial());
  Tensor<T> out(xs);
  Tensor<T> xhat(xs);
  std::vector<T> inv_std(static_cast<std::size_t>(xs.n) * xs.c);
  for (int n = 0; n < xs.n; ++n) {
    const int gn = gs.n == 1 ? 0 : n;
    for (int c = 0; c < xs.c; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * xs.c + c) * hw;
      const T* src = x.value().data() + off;
      T mean = 0;
      for (int i = 0; i < hw; ++i) mean += src[i];
      mean /= static_cast<T>(hw);
      T var = 0;
      for (int i = 0; i < hw; ++i) var += (src[i] - mean) * (src[i] - mean);
      var /= static_cast<T>(hw);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(n) * xs.c + c] = is;
      const T g = gamma.value()[static_cast<std::size_t>(gn) * xs.c + c];
      const T b = beta.value()[static_cast<std::size_t>(gn) * xs.c + c];
      for (int i = 0; i < hw; ++i) {
        const T xh = (src[i] - mean) * is;
        xhat[off + i] = xh;
        out[off + i] = g * xh + b;
      }
    }
  }
  return x.tape().emit(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const Shape xs = x.shape();
        const Shape gs = gamma.shape();
        const int hw = static_cast<int>(xs.spatial());
        for (int n = 0; n < xs.n; ++n) {
          const int gn = gs.n == 1 ? 0 : n;
          for (int c = 0; c < xs.c; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * xs.c + c) * hw;
            const std::size_t pidx = static_cast<std::size_t>(gn) * xs.c + c;
            const T* g = self.grad.data() + off;
            T sum_g = 0;
            T sum_gx = 0;
            for (int i = 0; i < hw; ++i) {
              sum_g += g[i];
              sum_gx += g[i] * xhat[off + i];
            }
            if (beta.requires_grad()) beta.grad()[pidx] += sum_g;
            if (gamma.requires_grad()) gamma.grad()[pidx] += sum_gx;
            if (x.requires_grad()) {
              const T gm = gamma.value()[pidx];
              const T is = inv_std[static_cast<std::size_t>(n) * xs.c + c];
              const T mean_d = gm * sum_g / static_cast<T>(hw);
              const T mean_dx = gm * sum_gx / static_cast<T>(hw);
              T* gx = x.grad().data() + off;
              for (int i = 0; i < hw; ++i) {
                gx[i] += is * (gm * g[i] - mean_d - xhat[off + i] * mean_dx);
              }
            }
          }
        }
      });
}

/// mean + exp(log_variance / 2) * noise, with noise held constant.
template <typename T>
Var<T> reparameterize(const Var<T>& mean, const Var<T>& log_variance, const Tensor<T>& noise) {
  detail::require_same(mean, log_variance, "reparameterize");
  detail::require(noise.shape() == mean.shape(), "reparameterize", "noise shape");
  Tensor<T> out = mean.value();
  Tensor<T> sd(mean.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    sd[i] = std::exp(log_variance.value()[i] * T(0.5));
    out[i] += sd[i] * noise[i];
  }
  return mean.tape().emit(std::move(out), {mean, log_variance},
                          [mean, log_variance, noise, sd = std::move(sd)](Node<T>& self) {
                            if (mean.requires_grad()) mean.accumulate(self.grad);
                            if (log_variance.requires_grad()) {
                              auto& g = log_variance.grad();
                              for (std::size_t i = 0; i < g.size(); ++i)
                                g[i] += self.grad[i] * T(0.5) * sd[i] * noise[i];
                            }
                          });
}

/// Closed-form KL(q || p) between diagonal Gaussians given by mean and
/// log-variance, summed over all non-batch elements. Output is (N, 1, 1, 1).
template <typename T>
Var<T> gaussian_kl(const Var<T>& q_mean, const Var<T>& q_logvar, const Var<T>& p_mean, const Var<T>& p_logvar) {
  detail::require_same(q_mean, q_logvar, "gaussian_kl");
  detail::require_same(q_mean, p_mean, "gaussian_kl");
  detail::require_same(q_mean, p_logvar, "gaussian_kl");
  const Shape s = q_mean.shape();
  Tensor<T> out(Shape{s.n, 1, 1, 1});
  const std::size_t per = s.per_sample();
  for (int n = 0; n < s.n; ++n) {
    T acc = 0;
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t i = n * per + k;
      const T d = q_mean.value()[i] - p_mean.value()[i];
      const T lvq = q_logvar.value()[i];
      const T lvp = p_logvar.value()[i];
      // exp(lvq - lvp) keeps KL(p || p) exactly zero.
      acc += T(0.5) * (lvp - lvq + std::exp(lvq - lvp) + d * d * std::exp(-lvp) - T(1));
    }
    out[n] = acc;
  }
  return q_mean.tape().emit(std::move(out), {q_mean, q_logvar, p_mean, p_logvar},
                            [q_mean, q_logvar, p_mean, p_logvar, per](Node<T>& self) {
                              const int batch = self.value.shape().n;
                              for (int n = 0; n < batch; ++n) {
                                const T g = self.grad[n];
                                for (std::size_t k = 0; k < per; ++k) {
                                  const std::size_t i = n * per + k;
                                  const T d = q_mean.value()[i] - p_mean.value()[i];
                                  const T inv_vp = std::exp(-p_logvar.value()[i]);
                                  const T ratio = std::exp(q_logvar.value()[i] - p_logvar.value()[i]);
                                  if (q_mean.requires_grad()) q_mean.grad()[i] += g * d * inv_vp;
                                  if (p_mean.requires_grad()) p_mean.grad()[i] -= g * d * inv_vp;
                                  if (q_logvar.requires_grad()) q_logvar.grad()[i] += g * T(0.5) * (ratio - T(1));
                                  if (p_logvar.requires_grad())
                                    p_logvar.grad()[i] += g * T(0.5) * (T(1) - ratio - d * d * inv_vp);
                                }
                              }
                            });
}

/// Negative log-likelihood of `target` under a unit-variance Gaussian with the
/// given mean, summed per sample (including the normalizer). Output (N,1,1,1).
template <typename T>
Var<T> gaussian_nll_unit(const Tensor<T>& target, const Var<T>& mean) {
  detail::require(target.shape() == mean.shape(), "gaussian_nll_unit",
                  "target " + target.shape().str() + " vs mean " + mean.shape().str());
  const Shape s = mean.shape();
  const std::size_t per = s.per_sample();
  const T log_norm = T(0.5) * static_cast<T>(per) * std::log(T(2) * std::numbers::pi_v<T>);
  Tensor<T> out(Shape{s.n, 1, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    T acc = 0;
    for (std::size_t k = 0; k < per; ++k) {
      const T d = target[n * per + k] - mean.value()[n * per + k];
      acc += d * d;
    }
    out[n] = T(0.5) * acc + log_norm;
  }
  return mean.tape().emit(std::move(out), {mean}, [mean, target, per](Node<T>& self) {
    auto& g = mean.grad();
    const int batch = self.value.shape().n;
    for (int n = 0; n < batch; ++n)
      for (std::size_t k = 0; k < per; ++k) {
        const std::size_t i = n * per + k;
        g[i] += self.grad[n] * (mean.value()[i] - target[i]);
      }
  });
}

/// Sum of all elements, as a (1,1,1,1) scalar.
template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().values()) acc += v;
  return a.tape().emit(Tensor<T>(Shape{}, acc), {a}, [a](Node<T>& self) {
    auto& g = a.grad();
    const T s = self.grad[0];
    for (auto& v : g.values()) v += s;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

}  // namespace cdhvae::ad

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ccvc/rng.hpp"
#include "ccvc/tensor.hpp"

// Layer primitives with explicit forward/backward passes. Forward passes are
// const and write whatever backward needs into a per-call cache object, so a
// layer can be used reentrantly on several streams (labelled/unlabelled,
// branch 1/branch 2) within one step.

namespace ccvc {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Conv2d {
  int in_ch = 0, out_ch = 0, ksize = 3, stride = 1, pad = 1;
  Tensor<T> weight;  // (out_ch, in_ch, k, k)
  Tensor<T> bias;    // (1, out_ch, 1, 1); empty when the conv feeds a norm layer

  Conv2d() = default;
  Conv2d(int in, int out, int k, int s, int p, bool with_bias)
      : in_ch(in), out_ch(out), ksize(k), stride(s), pad(p),
        weight(out, in, k, k), bias() {
    if (with_bias) bias = Tensor<T>(1, out, 1, 1);
  }

  bool has_bias() const { return !bias.empty(); }

  void init_he(Rng& rng) {
    const double std_dev = std::sqrt(2.0 / (static_cast<double>(in_ch) * ksize * ksize));
    for (std::size_t i = 0; i < weight.size(); ++i) {
      weight[i] = static_cast<T>(rng.gaussian() * std_dev);
    }
    if (has_bias()) bias.fill(T(0));
  }

  int out_dim(int in) const { return (in + 2 * pad - ksize) / stride + 1; }

  struct Cache {
    Tensor<T> cols;  // (N, 1, in_ch*k*k, out_h*out_w)
    int in_h = 0, in_w = 0;
  };

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    if (x.c() != in_ch) {
      throw std::invalid_argument("Conv2d: input has " + std::to_string(x.c()) +
                                  " channels, expected " + std::to_string(in_ch));
    }
    const int oh = out_dim(x.h());
    const int ow = out_dim(x.w());
    const int K = in_ch * ksize * ksize;
    const int L = oh * ow;
    Tensor<T> y(x.n(), out_ch, oh, ow);
    Tensor<T> local_cols;
    Tensor<T>& cols = cache ? cache->cols : local_cols;
    cols = Tensor<T>(x.n(), 1, K, L);
    if (cache) {
      cache->in_h = x.h();
      cache->in_w = x.w();
    }

    Eigen::Map<const MatRM<T>> wm(weight.data(), out_ch, K);
    for (int n = 0; n < x.n(); ++n) {
      T* col = cols.image(n);
      im2col(x.image(n), x.h(), x.w(), col, oh, ow);
      Eigen::Map<const MatRM<T>> cm(col, K, L);
      Eigen::Map<MatRM<T>> ym(y.image(n), out_ch, L);
      ym.noalias() = wm * cm;
      if (has_bias()) {
        for (int oc = 0; oc < out_ch; ++oc) ym.row(oc).array() += bias[oc];
      }
    }
    return y;
  }

  // Accumulates into dweight/dbias; returns dx.
  Tensor<T> backward(const Cache& cache, const Tensor<T>& dy, Tensor<T>& dweight,
                     Tensor<T>* dbias) const {
    const int oh = dy.h();
    const int ow = dy.w();
    const int K = in_ch * ksize * ksize;
    const int L = oh * ow;
    Tensor<T> dx(dy.n(), in_ch, cache.in_h, cache.in_w);
    Eigen::Map<const MatRM<T>> wm(weight.data(), out_ch, K);
    Eigen::Map<MatRM<T>> dwm(dweight.data(), out_ch, K);
    MatRM<T> dcol(K, L);
    for (int n = 0; n < dy.n(); ++n) {
      Eigen::Map<const MatRM<T>> dym(dy.image(n), out_ch, L);
      Eigen::Map<const MatRM<T>> cm(cache.cols.image(n), K, L);
      dwm.noalias() += dym * cm.transpose();
      if (dbias) {
        for (int oc = 0; oc < out_ch; ++oc) (*dbias)[oc] += dym.row(oc).sum();
      }
      dcol.noalias() = wm.transpose() * dym;
      col2im(dcol.data(), cache.in_h, cache.in_w, dx.image(n), oh, ow);
    }
    return dx;
  }

 private:
  void im2col(const T* img, int ih, int iw, T* col, int oh, int ow) const {
    const int L = oh * ow;
    for (int ic = 0; ic < in_ch; ++ic) {
      const T* src = img + static_cast<std::size_t>(ic) * ih * iw;
      for (int ky = 0; ky < ksize; ++ky) {
        for (int kx = 0; kx < ksize; ++kx) {
          T* dst = col + (static_cast<std::size_t>(ic) * ksize * ksize + ky * ksize + kx) * L;
          for (int oy = 0; oy < oh; ++oy) {
            const int sy = oy * stride - pad + ky;
            if (sy < 0 || sy >= ih) {
              std::fill(dst + oy * ow, dst + (oy + 1) * ow, T(0));
              continue;
            }
            const T* row = src + static_cast<std::size_t>(sy) * iw;
            for (int ox = 0; ox < ow; ++ox) {
              const int sx = ox * stride - pad + kx;
              dst[oy * ow + ox] = (sx >= 0 && sx < iw) ? row[sx] : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const T* col, int ih, int iw, T* img, int oh, int ow) const {
    const int L = oh * ow;
    for (int ic = 0; ic < in_ch; ++ic) {
      T* dst = img + static_cast<std::size_t>(ic) * ih * iw;
      for (int ky = 0; ky < ksize; ++ky) {
        for (int kx = 0; kx < ksize; ++kx) {
          const T* src = col + (static_cast<std::size_t>(ic) * ksize * ksize + ky * ksize + kx) * L;
          for (int oy = 0; oy < oh; ++oy) {
            const int sy = oy * stride - pad + ky;
            if (sy < 0 || sy >= ih) continue;
            T* row = dst + static_cast<std::size_t>(sy) * iw;
            for (int ox = 0; ox < ow; ++ox) {
              const int sx = ox * stride - pad + kx;
              if (sx >= 0 && sx < iw) row[sx] += src[oy * ow + ox];
            }
          }
        }
      }
    }
  }
};

template <typename T>
struct BatchNorm2d {
  int channels = 0;
  T eps = T(1e-5);
  T momentum = T(0.1);
  Tensor<T> gamma, beta;                   // learned
  Tensor<T> running_mean, running_var;     // buffers, used in eval mode

  BatchNorm2d() = default;
  explicit BatchNorm2d(int c)
      : channels(c), gamma(1, c, 1, 1, T(1)), beta(1, c, 1, 1, T(0)),
        running_mean(1, c, 1, 1, T(0)), running_var(1, c, 1, 1, T(1)) {}

  struct Cache {
    Tensor<T> xhat;
    std::vector<T> invstd;
  };

  // Train mode normalizes with batch statistics and updates running stats
  // (biased variance throughout). Eval mode uses the running stats.
  Tensor<T> forward(const Tensor<T>& x, bool train, Cache* cache) {
    if (x.c() != channels) throw std::invalid_argument("BatchNorm2d: channel mismatch");
    Tensor<T> y(x.n(), x.c(), x.h(), x.w());
    const std::size_t plane = static_cast<std::size_t>(x.h()) * x.w();
    const std::size_t m = static_cast<std::size_t>(x.n()) * plane;
    if (train) {
      if (cache) {
        cache->xhat = Tensor<T>(x.n(), x.c(), x.h(), x.w());
        cache->invstd.assign(channels, T(0));
      }
      for (int c = 0; c < channels; ++c) {
        double sum = 0.0, sumsq = 0.0;
        for (int n = 0; n < x.n(); ++n) {
          const T* p = x.image(n) + c * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum += p[i];
            sumsq += static_cast<double>(p[i]) * p[i];
          }
        }
        const double mean = sum / static_cast<double>(m);
        const double var = std::max(0.0, sumsq / static_cast<double>(m) - mean * mean);
        const T invstd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * static_cast<T>(mean);
        running_var[c] = (T(1) - momentum) * running_var[c] + momentum * static_cast<T>(var);
        if (cache) cache->invstd[c] = invstd;
        const T g = gamma[c], b = beta[c], mu = static_cast<T>(mean);
        for (int n = 0; n < x.n(); ++n) {
          const T* p = x.image(n) + c * plane;
          T* q = y.image(n) + c * plane;
          T* xh = cache ? cache->xhat.image(n) + c * plane : nullptr;
          for (std::size_t i = 0; i < plane; ++i) {
            const T xhat = (p[i] - mu) * invstd;
            if (xh) xh[i] = xhat;
            q[i] = g * xhat + b;
          }
        }
      }
    } else {
      for (int c = 0; c < channels; ++c) {
        const T invstd = T(1) / std::sqrt(running_var[c] + eps);
        const T g = gamma[c], b = beta[c], mu = running_mean[c];
        for (int n = 0; n < x.n(); ++n) {
          const T* p = x.image(n) + c * plane;
          T* q = y.image(n) + c * plane;
          for (std::size_t i = 0; i < plane; ++i) q[i] = g * (p[i] - mu) * invstd + b;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Cache& cache, const Tensor<T>& dy, Tensor<T>& dgamma,
                     Tensor<T>& dbeta) const {
    Tensor<T> dx(dy.n(), dy.c(), dy.h(), dy.w());
    const std::size_t plane = static_cast<std::size_t>(dy.h()) * dy.w();
    const double m = static_cast<double>(dy.n()) * plane;
    for (int c = 0; c < channels; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int n = 0; n < dy.n(); ++n) {
        const T* d = dy.image(n) + c * plane;
        const T* xh = cache.xhat.image(n) + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_dy += d[i];
          sum_dy_xhat += static_cast<double>(d[i]) * xh[i];
        }
      }
      dgamma[c] += static_cast<T>(sum_dy_xhat);
      dbeta[c] += static_cast<T>(sum_dy);
      const T k = gamma[c] * cache.invstd[c];
      const T mean_dy = static_cast<T>(sum_dy / m);
      const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / m);
      for (int n = 0; n < dy.n(); ++n) {
        const T* d = dy.image(n) + c * plane;
        const T* xh = cache.xhat.image(n) + c * plane;
        T* o = dx.image(n) + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          o[i] = k * (d[i] - mean_dy - xh[i] * mean_dy_xhat);
        }
      }
    }
    return dx;
  }
};

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.n(), x.c(), x.h(), x.w());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

// Uses the forward output to mask, so no separate cache is needed.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  Tensor<T> dx(dy.n(), dy.c(), dy.h(), dy.w());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = y[i] > T(0) ? dy[i] : T(0);
  return dx;
}

namespace detail {
struct LerpWeights {
  int i0, i1;
  double w1;  // weight of i1; i0 gets (1 - w1)
};
inline LerpWeights lerp_coords(int out_idx, int in_dim, int out_dim) {
  // align_corners = false convention
  const double scale = static_cast<double>(in_dim) / out_dim;
  double src = (out_idx + 0.5) * scale - 0.5;
  if (src < 0) src = 0;
  if (src > in_dim - 1) src = in_dim - 1;
  const int i0 = static_cast<int>(src);
  const int i1 = std::min(i0 + 1, in_dim - 1);
  return {i0, i1, src - i0};
}
}  // namespace detail

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int oh, int ow) {
  Tensor<T> y(x.n(), x.c(), oh, ow);
  std::vector<detail::LerpWeights> ys(oh), xs(ow);
  for (int i = 0; i < oh; ++i) ys[i] = detail::lerp_coords(i, x.h(), oh);
  for (int i = 0; i < ow; ++i) xs[i] = detail::lerp_coords(i, x.w(), ow);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T* src = x.image(n) + static_cast<std::size_t>(c) * x.h() * x.w();
      T* dst = y.image(n) + static_cast<std::size_t>(c) * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        const auto& wy = ys[oy];
        for (int ox = 0; ox < ow; ++ox) {
          const auto& wx = xs[ox];
          const double v00 = src[wy.i0 * x.w() + wx.i0];
          const double v01 = src[wy.i0 * x.w() + wx.i1];
          const double v10 = src[wy.i1 * x.w() + wx.i0];
          const double v11 = src[wy.i1 * x.w() + wx.i1];
          const double top = v00 + (v01 - v00) * wx.w1;
          const double bot = v10 + (v11 - v10) * wx.w1;
          dst[oy * ow + ox] = static_cast<T>(top + (bot - top) * wy.w1);
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> resize_bilinear_backward(const Tensor<T>& dy, int ih, int iw) {
  Tensor<T> dx(dy.n(), dy.c(), ih, iw);
  std::vector<detail::LerpWeights> ys(dy.h()), xs(dy.w());
  for (int i = 0; i < dy.h(); ++i) ys[i] = detail::lerp_coords(i, ih, dy.h());
  for (int i = 0; i < dy.w(); ++i) xs[i] = detail::lerp_coords(i, iw, dy.w());
  for (int n = 0; n < dy.n(); ++n) {
    for (int c = 0; c < dy.c(); ++c) {
      const T* src = dy.image(n) + static_cast<std::size_t>(c) * dy.h() * dy.w();
      T* dst = dx.image(n) + static_cast<std::size_t>(c) * ih * iw;
      for (int oy = 0; oy < dy.h(); ++oy) {
        const auto& wy = ys[oy];
        for (int ox = 0; ox < dy.w(); ++ox) {
          const auto& wx = xs[ox];
          const T g = src[oy * dy.w() + ox];
          dst[wy.i0 * iw + wx.i0] += static_cast<T>(g * (1 - wy.w1) * (1 - wx.w1));
          dst[wy.i0 * iw + wx.i1] += static_cast<T>(g * (1 - wy.w1) * wx.w1);
          dst[wy.i1 * iw + wx.i0] += static_cast<T>(g * wy.w1 * (1 - wx.w1));
          dst[wy.i1 * iw + wx.i1] += static_cast<T>(g * wy.w1 * wx.w1);
        }
      }
    }
  }
  return dx;
}

// Zeroes whole (image, channel) planes with probability p and rescales the
// survivors by 1/(1-p). keep holds one byte per (n, c).
template <typename T>
Tensor<T> channel_dropout(const Tensor<T>& x, double p, Rng& rng,
                          std::vector<std::uint8_t>& keep) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("channel_dropout: p must be in [0,1)");
  keep.assign(static_cast<std::size_t>(x.n()) * x.c(), 1);
  Tensor<T> y(x.n(), x.c(), x.h(), x.w());
  const std::size_t plane = static_cast<std::size_t>(x.h()) * x.w();
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const bool k = !rng.bernoulli(p);
      keep[static_cast<std::size_t>(n) * x.c() + c] = k ? 1 : 0;
      const T* src = x.image(n) + c * plane;
      T* dst = y.image(n) + c * plane;
      if (k) {
        for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * scale;
      } else {
        std::fill(dst, dst + plane, T(0));
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> channel_dropout_backward(const Tensor<T>& dy, double p,
                                   const std::vector<std::uint8_t>& keep) {
  Tensor<T> dx(dy.n(), dy.c(), dy.h(), dy.w());
  const std::size_t plane = static_cast<std::size_t>(dy.h()) * dy.w();
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  for (int n = 0; n < dy.n(); ++n) {
    for (int c = 0; c < dy.c(); ++c) {
      if (!keep[static_cast<std::size_t>(n) * dy.c() + c]) continue;
      const T* src = dy.image(n) + c * plane;
      T* dst = dx.image(n) + c * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * scale;
    }
  }
  return dx;
}

// Chains a gradient w.r.t. probabilities back to logits:
//   dz_c = p_c * (g_c - sum_k g_k p_k).
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& dprobs) {
  Tensor<T> dz(probs.n(), probs.c(), probs.h(), probs.w());
  const std::size_t plane = static_cast<std::size_t>(probs.h()) * probs.w();
  for (int n = 0; n < probs.n(); ++n) {
    const T* p = probs.image(n);
    const T* g = dprobs.image(n);
    T* o = dz.image(n);
    for (std::size_t i = 0; i < plane; ++i) {
      T gp = T(0);
      for (int c = 0; c < probs.c(); ++c) gp += g[c * plane + i] * p[c * plane + i];
      for (int c = 0; c < probs.c(); ++c) {
        o[c * plane + i] = p[c * plane + i] * (g[c * plane + i] - gp);
      }
    }
  }
  return dz;
}

// Per-pixel softmax over the channel axis, max-subtracted for stability.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tensor<T> probs(logits.n(), logits.c(), logits.h(), logits.w());
  const std::size_t plane = static_cast<std::size_t>(logits.h()) * logits.w();
  for (int n = 0; n < logits.n(); ++n) {
    const T* in = logits.image(n);
    T* out = probs.image(n);
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = in[i];
      for (int c = 1; c < logits.c(); ++c) mx = std::max(mx, in[c * plane + i]);
      T sum = T(0);
      for (int c = 0; c < logits.c(); ++c) {
        const T e = std::exp(in[c * plane + i] - mx);
        out[c * plane + i] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int c = 0; c < logits.c(); ++c) out[c * plane + i] *= inv;
    }
  }
  return probs;
}

}  // namespace ccvc

#pragma once

// Fixed vocabulary of differentiable operators with hand-written backward
// passes. Activations are NCHW; dense inputs are NF. Backward functions
// accumulate (+=) into parameter gradients and assign input gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "lesionforge/tensor.hpp"

namespace lesionforge::nn {

enum class Padding { valid, same };

inline std::size_t pad_amount(std::size_t k, Padding pad) { return pad == Padding::same ? k / 2 : 0; }

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, Padding pad) {
  const std::size_t p = pad_amount(k, pad);
  if (in + 2 * p < k) throw std::invalid_argument("convolution window larger than padded input");
  return (in + 2 * p - k) / stride + 1;
}

namespace detail {

// Output columns ox for which ix = ox*stride + kx - p lies inside [0, in).
inline void valid_range(std::size_t in, std::size_t out, std::size_t kpos, std::size_t p, std::size_t stride,
                        std::size_t& lo, std::size_t& hi) {
  const long num_lo = static_cast<long>(p) - static_cast<long>(kpos);
  lo = num_lo <= 0 ? 0 : static_cast<std::size_t>((num_lo + static_cast<long>(stride) - 1) / static_cast<long>(stride));
  const long num_hi = static_cast<long>(in) - 1 - static_cast<long>(kpos) + static_cast<long>(p);
  hi = num_hi < 0 ? 0 : std::min(out, static_cast<std::size_t>(num_hi) / stride + 1);
  if (lo > hi) lo = hi;
}

// Correlates one input plane with one k x k filter and accumulates into y.
template <typename T, typename A>
void correlate_plane(const T* x, std::size_t H, std::size_t W, const T* w, std::size_t k, std::size_t stride,
                     std::size_t p, A* y, std::size_t Ho, std::size_t Wo) {
  for (std::size_t ky = 0; ky < k; ++ky) {
    std::size_t oy_lo, oy_hi;
    valid_range(H, Ho, ky, p, stride, oy_lo, oy_hi);
    for (std::size_t kx = 0; kx < k; ++kx) {
      const A wv = w[ky * k + kx];
      std::size_t ox_lo, ox_hi;
      valid_range(W, Wo, kx, p, stride, ox_lo, ox_hi);
      const std::size_t len = ox_hi - ox_lo;
      if (len == 0) continue;
      for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
        const T* xrow = x + (oy * stride + ky - p) * W + (ox_lo * stride + kx - p);
        A* yrow = y + oy * Wo + ox_lo;
        if (stride == 1) {
          for (std::size_t i = 0; i < len; ++i) yrow[i] += wv * static_cast<A>(xrow[i]);
        } else {
          for (std::size_t i = 0; i < len; ++i) yrow[i] += wv * static_cast<A>(xrow[i * stride]);
        }
      }
    }
  }
}

// Gradient of correlate_plane with respect to filter (gw) and input (gx).
template <typename T>
void correlate_plane_backward(const T* x, std::size_t H, std::size_t W, const T* w, std::size_t k,
                              std::size_t stride, std::size_t p, const T* gy, std::size_t Ho, std::size_t Wo,
                              T* gw, T* gx) {
  for (std::size_t ky = 0; ky < k; ++ky) {
    std::size_t oy_lo, oy_hi;
    valid_range(H, Ho, ky, p, stride, oy_lo, oy_hi);
    for (std::size_t kx = 0; kx < k; ++kx) {
      const T wv = w[ky * k + kx];
      std::size_t ox_lo, ox_hi;
      valid_range(W, Wo, kx, p, stride, ox_lo, ox_hi);
      const std::size_t len = ox_hi - ox_lo;
      if (len == 0) continue;
      T acc = 0;
      for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
        const std::size_t off = (oy * stride + ky - p) * W + (ox_lo * stride + kx - p);
        const T* xrow = x + off;
        const T* grow = gy + oy * Wo + ox_lo;
        if (gx) {
          T* gxrow = gx + off;
          for (std::size_t i = 0; i < len; ++i) {
            acc += grow[i] * xrow[i * stride];
            gxrow[i * stride] += wv * grow[i];
          }
        } else {
          for (std::size_t i = 0; i < len; ++i) acc += grow[i] * xrow[i * stride];
        }
      }
      gw[ky * k + kx] += acc;
    }
  }
}

inline void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

}  // namespace detail

/// Cross-correlation. x: N x C x H x W, w: O x C x k x k, b: O (or empty).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride, Padding pad) {
  detail::require(x.rank() == 4 && w.rank() == 4, "conv2d: expected 4-d input and weight");
  detail::require(w.dim(1) == x.dim(1), "conv2d: input channels do not match weight");
  detail::require(w.dim(2) == w.dim(3), "conv2d: kernel must be square");
  detail::require(b.empty() || b.size() == w.dim(0), "conv2d: bias length does not match output channels");
  detail::require(stride >= 1, "conv2d: stride must be positive");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), k = w.dim(2), p = pad_amount(k, pad);
  const std::size_t Ho = conv_out_size(H, k, stride, pad), Wo = conv_out_size(W, k, stride, pad);
  Tensor<T> y({N, O, Ho, Wo});
  // Each output plane is summed in double and rounded once.
  std::vector<double> acc(Ho * Wo);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      std::fill(acc.begin(), acc.end(), b.empty() ? 0.0 : static_cast<double>(b[o]));
      for (std::size_t c = 0; c < C; ++c)
        detail::correlate_plane(&x.at(n, c, 0, 0), H, W, &w.data[(o * C + c) * k * k], k, stride, p, acc.data(), Ho, Wo);
      std::transform(acc.begin(), acc.end(), &y.at(n, o, 0, 0), [](double v) { return static_cast<T>(v); });
    }
  return y;
}

/// gx may be null when the input gradient is not needed; gb may be null for bias-free layers.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, Padding pad, const Tensor<T>& gy,
                     Tensor<T>* gx, Tensor<T>& gw, Tensor<T>* gb) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), k = w.dim(2), p = pad_amount(k, pad);
  const std::size_t Ho = gy.dim(2), Wo = gy.dim(3);
  if (gx) *gx = Tensor<T>(x.shape);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      const T* gp = &gy.at(n, o, 0, 0);
      if (gb) {
        T s = 0;
        for (std::size_t i = 0; i < Ho * Wo; ++i) s += gp[i];
        (*gb)[o] += s;
      }
      for (std::size_t c = 0; c < C; ++c)
        detail::correlate_plane_backward(&x.at(n, c, 0, 0), H, W, &w.data[(o * C + c) * k * k], k, stride, p, gp,
                                         Ho, Wo, &gw.data[(o * C + c) * k * k],
                                         gx ? &gx->at(n, c, 0, 0) : static_cast<T*>(nullptr));
    }
}

/// One k x k filter per channel, no cross-channel mixing. w: C x 1 x k x k, b: C (or empty).
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                           Padding pad) {
  detail::require(x.rank() == 4 && w.rank() == 4, "depthwise_conv2d: expected 4-d input and weight");
  detail::require(w.dim(0) == x.dim(1) && w.dim(1) == 1, "depthwise_conv2d: weight must be C x 1 x k x k");
  detail::require(w.dim(2) == w.dim(3), "depthwise_conv2d: kernel must be square");
  detail::require(b.empty() || b.size() == w.dim(0), "depthwise_conv2d: bias length does not match channels");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t k = w.dim(2), p = pad_amount(k, pad);
  const std::size_t Ho = conv_out_size(H, k, stride, pad), Wo = conv_out_size(W, k, stride, pad);
  Tensor<T> y({N, C, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      T* yp = &y.at(n, c, 0, 0);
      std::fill(yp, yp + Ho * Wo, b.empty() ? T(0) : b[c]);
      detail::correlate_plane(&x.at(n, c, 0, 0), H, W, &w.data[c * k * k], k, stride, p, yp, Ho, Wo);
    }
  return y;
}

template <typename T>
void depthwise_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, Padding pad,
                               const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>& gw, Tensor<T>* gb) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t k = w.dim(2), p = pad_amount(k, pad);
  const std::size_t Ho = gy.dim(2), Wo = gy.dim(3);
  if (gx) *gx = Tensor<T>(x.shape);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* gp = &gy.at(n, c, 0, 0);
      if (gb) {
        T s = 0;
        for (std::size_t i = 0; i < Ho * Wo; ++i) s += gp[i];
        (*gb)[c] += s;
      }
      detail::correlate_plane_backward(&x.at(n, c, 0, 0), H, W, &w.data[c * k * k], k, stride, p, gp, Ho, Wo,
                                       &gw.data[c * k * k], gx ? &gx->at(n, c, 0, 0) : static_cast<T*>(nullptr));
    }
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

// Takes the forward input; gradient passes where x > 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& gy) {
  Tensor<T> gx(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] > T(0) ? gy[i] : T(0);
  return gx;
}

template <typename T>
struct PoolResult {
  Tensor<T> out;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

template <typename T>
PoolResult<T> max_pool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  detail::require(x.rank() == 4, "max_pool2d: expected NCHW input");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k == 0 || k > H || k > W) throw std::invalid_argument("max_pool2d: window larger than input");
  const std::size_t Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  PoolResult<T> r{Tensor<T>({N, C, Ho, Wo}), std::vector<std::size_t>(N * C * Ho * Wo)};
  std::size_t o = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * H * W;
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox, ++o) {
          std::size_t best = base + oy * stride * W + ox * stride;
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) {
              const std::size_t idx = base + (oy * stride + dy) * W + ox * stride + dx;
              if (x[idx] > x[best]) best = idx;
            }
          r.out[o] = x[best];
          r.argmax[o] = best;
        }
    }
  return r;
}

template <typename T>
Tensor<T> max_pool2d_backward(const Shape& in_shape, const std::vector<std::size_t>& argmax, const Tensor<T>& gy) {
  Tensor<T> gx(in_shape);
  for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax[i]] += gy[i];
  return gx;
}

/// N x C x H x W -> N x C spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "global_avg_pool: expected NCHW input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  detail::require(HW >= 1, "global_avg_pool: empty spatial extent");
  Tensor<T> y({N, C});
  for (std::size_t i = 0; i < N * C; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < HW; ++j) s += x[i * HW + j];
    y[i] = s / static_cast<T>(HW);
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& in_shape, const Tensor<T>& gy) {
  Tensor<T> gx(in_shape);
  const std::size_t HW = in_shape[2] * in_shape[3];
  for (std::size_t i = 0; i < gy.size(); ++i) {
    const T g = gy[i] / static_cast<T>(HW);
    for (std::size_t j = 0; j < HW; ++j) gx[i * HW + j] = g;
  }
  return gx;
}

/// x: N x F, w: F x K, b: K.
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require(x.rank() == 2 && w.rank() == 2, "dense: expected 2-d input and weight");
  detail::require(x.dim(1) == w.dim(0), "dense: inner dimensions do not match");
  detail::require(b.size() == w.dim(1), "dense: bias length does not match output width");
  const std::size_t N = x.dim(0), F = x.dim(1), K = w.dim(1);
  Tensor<T> y({N, K});
  for (std::size_t n = 0; n < N; ++n) {
    T* yr = &y.data[n * K];
    for (std::size_t k = 0; k < K; ++k) yr[k] = b[k];
    for (std::size_t f = 0; f < F; ++f) {
      const T xv = x[n * F + f];
      const T* wr = &w.data[f * K];
      for (std::size_t k = 0; k < K; ++k) yr[k] += xv * wr[k];
    }
  }
  return y;
}

template <typename T>
void dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>& gw,
                    Tensor<T>& gb) {
  const std::size_t N = x.dim(0), F = x.dim(1), K = w.dim(1);
  if (gx) *gx = Tensor<T>(x.shape);
  for (std::size_t n = 0; n < N; ++n) {
    const T* gr = &gy.data[n * K];
    for (std::size_t k = 0; k < K; ++k) gb[k] += gr[k];
    for (std::size_t f = 0; f < F; ++f) {
      const T xv = x[n * F + f];
      T* gwr = &gw.data[f * K];
      const T* wr = &w.data[f * K];
      T acc = 0;
      for (std::size_t k = 0; k < K; ++k) {
        gwr[k] += xv * gr[k];
        acc += wr[k] * gr[k];
      }
      if (gx) (*gx)[n * F + f] = acc;
    }
  }
}

/// Row-wise softmax with the row maximum subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  detail::require(logits.rank() == 2 && logits.dim(1) >= 2, "softmax: expected N x K logits with K >= 2");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  Tensor<T> p(logits.shape);
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = &logits.data[n * K];
    T* pr = &p.data[n * K];
    const T mx = *std::max_element(z, z + K);
    T s = 0;
    for (std::size_t k = 0; k < K; ++k) s += (pr[k] = std::exp(z[k] - mx));
    for (std::size_t k = 0; k < K; ++k) pr[k] /= s;
  }
  return p;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& p, const Tensor<T>& gp) {
  const std::size_t N = p.dim(0), K = p.dim(1);
  Tensor<T> gz(p.shape);
  for (std::size_t n = 0; n < N; ++n) {
    T dot = 0;
    for (std::size_t k = 0; k < K; ++k) dot += p[n * K + k] * gp[n * K + k];
    for (std::size_t k = 0; k < K; ++k) gz[n * K + k] = p[n * K + k] * (gp[n * K + k] - dot);
  }
  return gz;
}

inline constexpr double kLogClamp = 1e-12;

namespace detail {
template <typename T>
void check_labels(std::span<const int> labels, std::size_t N, std::size_t K, std::span<const T> weights) {
  if (labels.size() != N) throw std::invalid_argument("cross-entropy: label count does not match batch");
  if (!weights.empty() && weights.size() != K) throw std::invalid_argument("cross-entropy: class weight count != K");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= K) throw std::invalid_argument("cross-entropy: invalid label");
}
}  // namespace detail

/// L = (1/N) sum_i w[y_i] * -log(max(p_i[y_i], 1e-12)). Empty weights mean all ones.
template <typename T>
T weighted_cross_entropy(const Tensor<T>& p, std::span<const int> labels, std::span<const T> weights = {}) {
  const std::size_t N = p.dim(0), K = p.dim(1);
  detail::check_labels(labels, N, K, weights);
  T loss = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const T wy = weights.empty() ? T(1) : weights[labels[n]];
    loss += wy * -std::log(std::max<T>(p[n * K + labels[n]], static_cast<T>(kLogClamp)));
  }
  return loss / static_cast<T>(N);
}

template <typename T>
Tensor<T> weighted_cross_entropy_backward(const Tensor<T>& p, std::span<const int> labels,
                                          std::span<const T> weights = {}) {
  const std::size_t N = p.dim(0), K = p.dim(1);
  detail::check_labels(labels, N, K, weights);
  Tensor<T> gp(p.shape);
  for (std::size_t n = 0; n < N; ++n) {
    const T wy = weights.empty() ? T(1) : weights[labels[n]];
    const T pv = p[n * K + labels[n]];
    if (pv >= static_cast<T>(kLogClamp)) gp[n * K + labels[n]] = -wy / (pv * static_cast<T>(N));
  }
  return gp;
}

/// Gradient of weighted_cross_entropy(softmax(z)) with respect to z.
template <typename T>
Tensor<T> softmax_cross_entropy_grad(const Tensor<T>& p, std::span<const int> labels,
                                     std::span<const T> weights = {}) {
  const std::size_t N = p.dim(0), K = p.dim(1);
  detail::check_labels(labels, N, K, weights);
  Tensor<T> gz(p.shape);
  for (std::size_t n = 0; n < N; ++n) {
    const T scale = (weights.empty() ? T(1) : weights[labels[n]]) / static_cast<T>(N);
    for (std::size_t k = 0; k < K; ++k)
      gz[n * K + k] = scale * (p[n * K + k] - (static_cast<std::size_t>(labels[n]) == k ? T(1) : T(0)));
  }
  return gz;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = x[i] >= 0 ? T(1) / (T(1) + std::exp(-x[i])) : std::exp(x[i]) / (T(1) + std::exp(x[i]));
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& gy) {
  Tensor<T> gx(y.shape);
  for (std::size_t i = 0; i < y.size(); ++i) gx[i] = gy[i] * y[i] * (T(1) - y[i]);
  return gx;
}

struct DiceBceOptions {
  double smooth = 1.0;
  double bce_weight = 0.5;
};

/// bce_weight * mean BCE + (1 - bce_weight) * (1 - (2 sum(pg) + s) / (sum(p) + sum(g) + s)).
template <typename T>
T dice_bce_loss(std::span<const T> pred, std::span<const T> gt, DiceBceOptions opt = {}) {
  if (pred.size() != gt.size() || pred.empty()) throw std::invalid_argument("dice_bce_loss: mask shapes differ");
  const T eps = static_cast<T>(kLogClamp);
  T bce = 0, inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T p = pred[i], g = gt[i];
    bce -= g * std::log(std::max(p, eps)) + (T(1) - g) * std::log(std::max(T(1) - p, eps));
    inter += p * g;
    sp += p;
    sg += g;
  }
  bce /= static_cast<T>(pred.size());
  const T s = static_cast<T>(opt.smooth);
  const T dice = (T(2) * inter + s) / (sp + sg + s);
  return static_cast<T>(opt.bce_weight) * bce + static_cast<T>(1 - opt.bce_weight) * (T(1) - dice);
}

/// Gradient with respect to the predicted probabilities.
template <typename T>
std::vector<T> dice_bce_loss_grad(std::span<const T> pred, std::span<const T> gt, DiceBceOptions opt = {}) {
  if (pred.size() != gt.size() || pred.empty()) throw std::invalid_argument("dice_bce_loss: mask shapes differ");
  const T eps = static_cast<T>(kLogClamp);
  const T N = static_cast<T>(pred.size());
  T inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * gt[i];
    sp += pred[i];
    sg += gt[i];
  }
  const T s = static_cast<T>(opt.smooth), den = sp + sg + s, num = T(2) * inter + s;
  const T wb = static_cast<T>(opt.bce_weight), wd = static_cast<T>(1 - opt.bce_weight);
  std::vector<T> g(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T p = pred[i], y = gt[i];
    T dbce = 0;
    if (p > eps) dbce -= y / p;
    if (T(1) - p > eps) dbce += (T(1) - y) / (T(1) - p);
    const T ddice = (T(2) * y * den - num) / (den * den);
    g[i] = wb * dbce / N - wd * ddice;
  }
  return g;
}

/// Gradient of dice_bce_loss(sigmoid(z)) with respect to z, given p = sigmoid(z).
/// Uses the closed form (p - g) / N for the BCE part so saturated outputs keep a gradient.
template <typename T>
std::vector<T> dice_bce_logit_grad(std::span<const T> p, std::span<const T> gt, DiceBceOptions opt = {}) {
  if (p.size() != gt.size() || p.empty()) throw std::invalid_argument("dice_bce_loss: mask shapes differ");
  const T N = static_cast<T>(p.size());
  T inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * gt[i];
    sp += p[i];
    sg += gt[i];
  }
  const T s = static_cast<T>(opt.smooth), den = sp + sg + s, num = T(2) * inter + s;
  const T wb = static_cast<T>(opt.bce_weight), wd = static_cast<T>(1 - opt.bce_weight);
  std::vector<T> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T ddice = (T(2) * gt[i] * den - num) / (den * den);
    g[i] = wb * (p[i] - gt[i]) / N - wd * ddice * p[i] * (T(1) - p[i]);
  }
  return g;
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y({N, C, 2 * H, 2 * W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < 2 * H; ++h)
        for (std::size_t w = 0; w < 2 * W; ++w) y.at(n, c, h, w) = x.at(n, c, h / 2, w / 2);
  return y;
}

template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& gy) {
  const std::size_t N = gy.dim(0), C = gy.dim(1), H = gy.dim(2) / 2, W = gy.dim(3) / 2;
  Tensor<T> gx({N, C, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < 2 * H; ++h)
        for (std::size_t w = 0; w < 2 * W; ++w) gx.at(n, c, h / 2, w / 2) += gy.at(n, c, h, w);
  return gx;
}

/// Channel concatenation of two NCHW tensors with equal N, H, W.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
                      a.dim(3) == b.dim(3),
                  "concat_channels: incompatible shapes");
  const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  Tensor<T> y({N, Ca + Cb, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(&a.data[n * Ca * HW], Ca * HW, &y.data[n * (Ca + Cb) * HW]);
    std::copy_n(&b.data[n * Cb * HW], Cb * HW, &y.data[(n * (Ca + Cb) + Ca) * HW]);
  }
  return y;
}

template <typename T>
void split_channels_backward(const Tensor<T>& gy, std::size_t Ca, Tensor<T>& ga, Tensor<T>& gb) {
  const std::size_t N = gy.dim(0), C = gy.dim(1), Cb = C - Ca, HW = gy.dim(2) * gy.dim(3);
  ga = Tensor<T>({N, Ca, gy.dim(2), gy.dim(3)});
  gb = Tensor<T>({N, Cb, gy.dim(2), gy.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(&gy.data[n * C * HW], Ca * HW, &ga.data[n * Ca * HW]);
    std::copy_n(&gy.data[(n * C + Ca) * HW], Cb * HW, &gb.data[n * Cb * HW]);
  }
}

}  // namespace lesionforge::nn

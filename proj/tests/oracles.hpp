#pragma once

// Brute-force reference implementations, written independently of the
// library's loop structure. Used to cross-check the optimised code.

#include <cmath>
#include <cstdint>
#include <vector>

#include "lesionforge/core.hpp"
#include "lesionforge/image.hpp"
#include "lesionforge/tensor.hpp"

namespace oracle {

using lesionforge::Image;
using lesionforge::Tensor;

template <typename T>
Tensor<T> random_tensor(lesionforge::Shape s, std::uint64_t seed, std::uint64_t stream, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(s));
  lesionforge::CounterRng rng(seed, stream);
  for (auto& v : t.data) v = static_cast<T>(rng.next_uniform(lo, hi));
  return t;
}

inline Image random_image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  Image img(h, w, c);
  lesionforge::CounterRng rng(seed, 77);
  for (auto& v : img.data) v = rng.next_uniform();
  return img;
}

// Zero-padded cross-correlation, one output element at a time.
inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int stride,
                             int pad) {
  const int N = int(x.dim(0)), C = int(x.dim(1)), H = int(x.dim(2)), W = int(x.dim(3));
  const int O = int(w.dim(0)), k = int(w.dim(2));
  const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor<double> y({std::size_t(N), std::size_t(O), std::size_t(Ho), std::size_t(Wo)});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          double s = b.empty() ? 0.0 : b[o];
          for (int c = 0; c < C; ++c)
            for (int u = 0; u < k; ++u)
              for (int v = 0; v < k; ++v) {
                const int yy = i * stride + u - pad, xx = j * stride + v - pad;
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                s += x.at(n, c, yy, xx) * w.at(o, c, u, v);
              }
          y.at(n, o, i, j) = s;
        }
  return y;
}

inline Tensor<double> depthwise(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int stride,
                                int pad) {
  const int N = int(x.dim(0)), C = int(x.dim(1)), H = int(x.dim(2)), W = int(x.dim(3)), k = int(w.dim(2));
  const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor<double> y({std::size_t(N), std::size_t(C), std::size_t(Ho), std::size_t(Wo)});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          double s = b.empty() ? 0.0 : b[c];
          for (int u = 0; u < k; ++u)
            for (int v = 0; v < k; ++v) {
              const int yy = i * stride + u - pad, xx = j * stride + v - pad;
              if (yy >= 0 && yy < H && xx >= 0 && xx < W) s += x.at(n, c, yy, xx) * w.at(c, 0, u, v);
            }
          y.at(n, c, i, j) = s;
        }
  return y;
}

inline Tensor<double> dense(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  Tensor<double> y({x.dim(0), w.dim(1)});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t k = 0; k < w.dim(1); ++k) {
      double s = b[k];
      for (std::size_t f = 0; f < x.dim(1); ++f) s += x.data[n * x.dim(1) + f] * w.data[f * w.dim(1) + k];
      y.data[n * w.dim(1) + k] = s;
    }
  return y;
}

inline int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

// Full 2-D Gaussian (outer product of the normalised 1-D kernel), reflect-101 borders.
inline Image gaussian_blur(const Image& img, double sigma, int k) {
  const int r = k / 2;
  std::vector<double> g(k);
  double sum = 0;
  for (int i = 0; i < k; ++i) sum += g[i] = std::exp(-double((i - r) * (i - r)) / (2 * sigma * sigma));
  for (auto& v : g) v /= sum;
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < int(img.height); ++y)
    for (int x = 0; x < int(img.width); ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        double s = 0;
        for (int u = -r; u <= r; ++u)
          for (int v = -r; v <= r; ++v)
            s += g[u + r] * g[v + r] * img.at(reflect101(y + u, int(img.height)), reflect101(x + v, int(img.width)), c);
        out.at(y, x, c) = s;
      }
  return out;
}

// AUC as the probability that a random positive outscores a random negative, ties counted half.
inline double rank_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double wins = 0;
  for (double p : pos)
    for (double n : neg) wins += p > n ? 1.0 : p == n ? 0.5 : 0.0;
  return wins / double(pos.size() * neg.size());
}

}  // namespace oracle

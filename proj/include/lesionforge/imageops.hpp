#pragma once

// Preprocessing filters and seeded affine augmentation.
// Borders use reflect-101 padding (mirror without repeating the edge pixel).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "lesionforge/core.hpp"
#include "lesionforge/image.hpp"

namespace lesionforge {

inline std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

namespace detail {
inline void require_odd_kernel(int ksize, const char* op) {
  if (ksize < 3 || ksize % 2 == 0)
    throw std::invalid_argument(std::string(op) + ": kernel size must be odd and >= 3, got " + std::to_string(ksize));
}
inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }
}  // namespace detail

/// Normalised 1-D Gaussian taps, k_i proportional to exp(-i^2 / (2 sigma^2)).
inline std::vector<double> gaussian_kernel(double sigma, int ksize) {
  detail::require_odd_kernel(ksize, "gaussian_kernel");
  if (!(sigma > 0)) throw std::invalid_argument("gaussian_kernel: sigma must be positive");
  const int r = ksize / 2;
  std::vector<double> k(ksize);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  for (double& v : k) v /= sum;
  return k;
}

// Weighted sum written as centre + sum k_i (x_i - centre) so flat regions are reproduced exactly.
inline Image gaussian_blur(const Image& img, double sigma, int ksize) {
  const auto k = gaussian_kernel(sigma, ksize);
  const std::ptrdiff_t r = ksize / 2, H = img.height, W = img.width, C = img.channels;
  Image tmp(img.height, img.width, img.channels), out(img.height, img.width, img.channels);
  for (std::ptrdiff_t y = 0; y < H; ++y)
    for (std::ptrdiff_t x = 0; x < W; ++x)
      for (std::ptrdiff_t c = 0; c < C; ++c) {
        const double centre = img.at(y, x, c);
        double s = 0;
        for (std::ptrdiff_t i = -r; i <= r; ++i) s += k[i + r] * (img.at(y, reflect_index(x + i, W), c) - centre);
        tmp.at(y, x, c) = centre + s;
      }
  for (std::ptrdiff_t y = 0; y < H; ++y)
    for (std::ptrdiff_t x = 0; x < W; ++x)
      for (std::ptrdiff_t c = 0; c < C; ++c) {
        const double centre = tmp.at(y, x, c);
        double s = 0;
        for (std::ptrdiff_t i = -r; i <= r; ++i) s += k[i + r] * (tmp.at(reflect_index(y + i, H), x, c) - centre);
        out.at(y, x, c) = detail::clamp01(centre + s);
      }
  return out;
}

inline Image median_filter(const Image& img, int ksize) {
  detail::require_odd_kernel(ksize, "median_filter");
  const std::ptrdiff_t r = ksize / 2, H = img.height, W = img.width, C = img.channels;
  Image out(img.height, img.width, img.channels);
  std::vector<double> window(static_cast<std::size_t>(ksize) * ksize);
  const std::size_t mid = window.size() / 2;
  for (std::ptrdiff_t y = 0; y < H; ++y)
    for (std::ptrdiff_t x = 0; x < W; ++x)
      for (std::ptrdiff_t c = 0; c < C; ++c) {
        std::size_t n = 0;
        for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
          for (std::ptrdiff_t dx = -r; dx <= r; ++dx)
            window[n++] = img.at(reflect_index(y + dy, H), reflect_index(x + dx, W), c);
        std::nth_element(window.begin(), window.begin() + static_cast<std::ptrdiff_t>(mid), window.end());
        out.at(y, x, c) = window[mid];
      }
  return out;
}

/// Gradient magnitude of the luma channel, scaled by the largest value a
/// [0, 1] input can produce (4 * sqrt(2)).
inline Image sobel_magnitude(const Image& img) {
  const Image g = to_luma(img);
  const std::ptrdiff_t H = g.height, W = g.width;
  Image out(g.height, g.width, 1);
  const double scale = 1.0 / (4.0 * std::numbers::sqrt2);
  auto px = [&](std::ptrdiff_t y, std::ptrdiff_t x) { return g.at(reflect_index(y, H), reflect_index(x, W), 0); };
  for (std::ptrdiff_t y = 0; y < H; ++y)
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      const double gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      out.at(y, x, 0) = detail::clamp01(std::sqrt(gx * gx + gy * gy) * scale);
    }
  return out;
}

/// Per-channel equalisation over 256 bins. A channel with a single occupied
/// bin is returned unchanged.
inline Image hist_equalize(const Image& img) {
  Image out = img;
  const std::size_t N = img.pixels(), C = img.channels;
  for (std::size_t c = 0; c < C; ++c) {
    std::array<std::size_t, 256> hist{};
    std::vector<int> bins(N);
    for (std::size_t i = 0; i < N; ++i) {
      bins[i] = static_cast<int>(std::lround(detail::clamp01(img.data[i * C + c]) * 255.0));
      ++hist[bins[i]];
    }
    std::array<std::size_t, 256> cdf{};
    std::size_t acc = 0, cdf_min = 0;
    for (int b = 0; b < 256; ++b) {
      acc += hist[b];
      cdf[b] = acc;
      if (cdf_min == 0 && acc > 0) cdf_min = acc;
    }
    if (N == cdf_min) continue;
    const double denom = static_cast<double>(N - cdf_min);
    for (std::size_t i = 0; i < N; ++i)
      out.data[i * C + c] = std::round((cdf[bins[i]] - cdf_min) / denom * 255.0) / 255.0;
  }
  return out;
}

struct GaussianStep {
  double sigma = 1.0;
  int ksize = 5;
};
struct MedianStep {
  int ksize = 3;
};
struct SobelStep {};
struct HistEqStep {};

using FilterStep = std::variant<GaussianStep, MedianStep, SobelStep, HistEqStep>;

struct FilterChainConfig {
  std::vector<FilterStep> steps;

  /// gaussian(1.0, 5) -> median(3) -> hist_eq; Sobel is opt-in.
  static FilterChainConfig classification_default() {
    return {{GaussianStep{1.0, 5}, MedianStep{3}, HistEqStep{}}};
  }

  void validate() const {
    for (const auto& s : steps) {
      if (const auto* g = std::get_if<GaussianStep>(&s)) {
        detail::require_odd_kernel(g->ksize, "gaussian");
        if (!(g->sigma > 0)) throw std::invalid_argument("gaussian: sigma must be positive");
      } else if (const auto* m = std::get_if<MedianStep>(&s)) {
        detail::require_odd_kernel(m->ksize, "median");
      }
    }
  }
};

inline Image apply_filter(const Image& img, const FilterStep& step) {
  struct Visitor {
    const Image& img;
    Image operator()(const GaussianStep& g) const { return gaussian_blur(img, g.sigma, g.ksize); }
    Image operator()(const MedianStep& m) const { return median_filter(img, m.ksize); }
    Image operator()(const SobelStep&) const { return sobel_magnitude(img); }
    Image operator()(const HistEqStep&) const { return hist_equalize(img); }
  };
  return std::visit(Visitor{img}, step);
}

/// Applies the steps left to right.
inline Image apply_filter_chain(const Image& img, const FilterChainConfig& cfg) {
  cfg.validate();
  Image out = img;
  for (const auto& s : cfg.steps) out = apply_filter(out, s);
  return out;
}

inline std::string filter_step_name(const FilterStep& s) {
  struct Visitor {
    std::string operator()(const GaussianStep& g) const {
      std::ostringstream os;
      os << "gaussian(" << g.sigma << "," << g.ksize << ")";
      return os.str();
    }
    std::string operator()(const MedianStep& m) const { return "median(" + std::to_string(m.ksize) + ")"; }
    std::string operator()(const SobelStep&) const { return "sobel"; }
    std::string operator()(const HistEqStep&) const { return "hist_eq"; }
  };
  return std::visit(Visitor{}, s);
}

inline std::string to_string(const FilterChainConfig& cfg) {
  if (cfg.steps.empty()) return "none";
  std::string out;
  for (std::size_t i = 0; i < cfg.steps.size(); ++i) out += (i ? "," : "") + filter_step_name(cfg.steps[i]);
  return out;
}

/// Parses e.g. "gaussian(1.0,5),median(3),hist_eq" or "none".
inline FilterChainConfig parse_filter_chain(const std::string& text) {
  FilterChainConfig cfg;
  std::vector<std::string> items;
  std::string cur;
  int depth = 0;
  for (char ch : text) {
    if (ch == ' ' || ch == '\t') continue;
    if (ch == '(') ++depth;
    if (ch == ')') --depth;
    if (ch == ',' && depth == 0) {
      items.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!cur.empty()) items.push_back(cur);
  if (items.size() == 1 && (items[0] == "none" || items[0].empty())) return cfg;
  for (const auto& item : items) {
    const auto open = item.find('(');
    const std::string name = item.substr(0, open);
    std::vector<double> args;
    if (open != std::string::npos) {
      if (item.back() != ')') throw std::invalid_argument("filter '" + item + "': missing ')'");
      std::stringstream ss(item.substr(open + 1, item.size() - open - 2));
      std::string a;
      while (std::getline(ss, a, ',')) {
        try {
          args.push_back(std::stod(a));
        } catch (const std::exception&) {
          throw std::invalid_argument("filter '" + item + "': bad argument '" + a + "'");
        }
      }
    }
    auto need = [&](std::size_t n) {
      if (args.size() != n)
        throw std::invalid_argument("filter '" + name + "' expects " + std::to_string(n) + " argument(s)");
    };
    if (name == "gaussian") {
      need(2);
      cfg.steps.push_back(GaussianStep{args[0], static_cast<int>(args[1])});
    } else if (name == "median") {
      need(1);
      cfg.steps.push_back(MedianStep{static_cast<int>(args[0])});
    } else if (name == "sobel") {
      need(0);
      cfg.steps.push_back(SobelStep{});
    } else if (name == "hist_eq") {
      need(0);
      cfg.steps.push_back(HistEqStep{});
    } else {
      throw std::invalid_argument("unknown filter '" + name + "'");
    }
  }
  cfg.validate();
  return cfg;
}

/// Bilinear sample at continuous pixel coordinates with reflect-101 fill.
inline double sample_bilinear(const Image& img, double y, double x, std::size_t c) {
  const double fy = std::floor(y), fx = std::floor(x);
  const double wy = y - fy, wx = x - fx;
  const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(fy), x0 = static_cast<std::ptrdiff_t>(fx);
  const std::ptrdiff_t H = img.height, W = img.width;
  const auto ya = reflect_index(y0, H), yb = reflect_index(y0 + 1, H);
  const auto xa = reflect_index(x0, W), xb = reflect_index(x0 + 1, W);
  const double top = (1 - wx) * img.at(ya, xa, c) + wx * img.at(ya, xb, c);
  const double bot = (1 - wx) * img.at(yb, xa, c) + wx * img.at(yb, xb, c);
  return (1 - wy) * top + wy * bot;
}

/// Half-pixel-centre bilinear resize with edge clamping.
inline Image resize_bilinear(const Image& img, std::size_t height, std::size_t width) {
  if (img.height == height && img.width == width) return img;
  if (img.height == 0 || img.width == 0 || height == 0 || width == 0)
    throw std::invalid_argument("resize_bilinear: empty image");
  Image out(height, width, img.channels);
  const double sy = static_cast<double>(img.height) / height, sx = static_cast<double>(img.width) / width;
  for (std::size_t y = 0; y < height; ++y) {
    const double ys = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    for (std::size_t x = 0; x < width; ++x) {
      const double xs = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = sample_bilinear(img, ys, xs, c);
    }
  }
  return out;
}

inline Image crop(const Image& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > img.height || x0 + w > img.width || h == 0 || w == 0)
    throw std::invalid_argument("crop: region outside image");
  Image out(h, w, img.channels);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
  return out;
}

struct AffineParams {
  double rotation_deg = 0.0;
  double zoom = 1.0;
  double tx_frac = 0.0;  // shift as a fraction of width
  double ty_frac = 0.0;  // shift as a fraction of height
  bool flip_h = false;
  bool flip_v = false;
};

/// Warp about the image centre: flip, zoom, rotate, then translate. Each
/// output pixel is inverse-mapped into the source and sampled bilinearly.
inline Image affine_transform(const Image& img, const AffineParams& p) {
  if (!(p.zoom > 0)) throw std::invalid_argument("affine_transform: zoom must be positive");
  Image out(img.height, img.width, img.channels);
  const double cx = (static_cast<double>(img.width) - 1) / 2, cy = (static_cast<double>(img.height) - 1) / 2;
  const double theta = p.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double tx = p.tx_frac * static_cast<double>(img.width), ty = p.ty_frac * static_cast<double>(img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double u = static_cast<double>(x) - cx - tx, v = static_cast<double>(y) - cy - ty;
      double a = (u * cs + v * sn) / p.zoom;
      double b = (-u * sn + v * cs) / p.zoom;
      if (p.flip_h) a = -a;
      if (p.flip_v) b = -b;
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = sample_bilinear(img, b + cy, a + cx, c);
    }
  return out;
}

struct AugmentRanges {
  double rotation_deg = 30.0;  // symmetric: [-r, r]
  double zoom_min = 0.8;
  double zoom_max = 1.2;
  double max_shift = 0.1;  // fraction of the image side, symmetric
  double flip_prob = 0.5;

  void validate() const {
    if (!(zoom_min > 0) || zoom_max < zoom_min) throw std::invalid_argument("augment: need 0 < zoom_min <= zoom_max");
    if (rotation_deg < 0 || max_shift < 0) throw std::invalid_argument("augment: ranges must be non-negative");
    if (flip_prob < 0 || flip_prob > 1) throw std::invalid_argument("augment: flip probability outside [0, 1]");
  }
};

/// Draws parameters from fixed counters of a counter-based generator, so the
/// result depends only on the seed.
inline AffineParams sample_affine_params(const AugmentRanges& r, std::uint64_t seed) {
  r.validate();
  const CounterRng rng(seed);
  AffineParams p;
  p.rotation_deg = (2 * rng.uniform_at(0) - 1) * r.rotation_deg;
  p.zoom = r.zoom_min + (r.zoom_max - r.zoom_min) * rng.uniform_at(1);
  p.tx_frac = (2 * rng.uniform_at(2) - 1) * r.max_shift;
  p.ty_frac = (2 * rng.uniform_at(3) - 1) * r.max_shift;
  p.flip_h = rng.uniform_at(4) < r.flip_prob;
  p.flip_v = rng.uniform_at(5) < r.flip_prob;
  return p;
}

inline Image random_augment(const Image& img, std::uint64_t seed, const AugmentRanges& ranges = {}) {
  return affine_transform(img, sample_affine_params(ranges, seed));
}

/// Seed for augmentation k of sample i under a run seed.
inline std::uint64_t augmentation_seed(std::uint64_t run_seed, std::uint64_t sample_index, std::uint64_t k) {
  return derive_seed(run_seed, 0x617567ULL, sample_index, k);
}

}  // namespace lesionforge

#pragma once

// Synthetic datasets for tests and the acceptance run.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "lesionforge/core.hpp"
#include "lesionforge/image.hpp"
#include "lesionforge/image_io.hpp"

namespace fixtures {

namespace fs = std::filesystem;
using lesionforge::CounterRng;
using lesionforge::Image;
using lesionforge::MaskImage;

/// Fresh empty directory under the system temp dir.
inline fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lesionforge_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// Three-class texture toy. Class 0: one large soft blob. Class 1: several
/// small dots. Class 2: oriented stripes. Colour and geometry are jittered
/// enough that the classes overlap.
inline Image blob_texture(int cls, std::size_t size, std::uint64_t seed) {
  CounterRng r(seed, 0x626c6f62);
  Image img(size, size, 3);
  const double S = static_cast<double>(size);
  const double base[3] = {r.next_uniform(0.55, 0.8), r.next_uniform(0.35, 0.6), r.next_uniform(0.25, 0.5)};
  const double ink = r.next_uniform(0.25, 0.45);
  std::vector<std::array<double, 3>> dots;  // (y, x, radius)
  if (cls == 0) dots.push_back({r.next_uniform(0.35, 0.65) * S, r.next_uniform(0.35, 0.65) * S, r.next_uniform(0.2, 0.3) * S});
  if (cls == 1) {
    const int n = 5 + static_cast<int>(r.next_below(4));
    for (int i = 0; i < n; ++i)
      dots.push_back({r.next_uniform(0.1, 0.9) * S, r.next_uniform(0.1, 0.9) * S, r.next_uniform(0.05, 0.09) * S});
  }
  const double angle = r.next_uniform(0, std::numbers::pi), period = r.next_uniform(0.12, 0.2) * S;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double v = 0;
      for (const auto& d : dots) {
        const double dy = (static_cast<double>(y) - d[0]) / d[2], dx = (static_cast<double>(x) - d[1]) / d[2];
        v = std::max(v, std::exp(-(dy * dy + dx * dx)));
      }
      if (cls == 2) {
        const double t = (std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y)) / period;
        v = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * t);
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const double noise = r.next_uniform(-0.12, 0.12);
        img.at(y, x, c) = std::clamp(base[c] - ink * v + noise, 0.0, 1.0);
      }
    }
  return img;
}

/// Noisy ellipse on a textured background, with its binary mask.
inline Image noisy_ellipse(std::size_t size, std::uint64_t seed, MaskImage& mask) {
  CounterRng r(seed, 0x656c6c);
  const double S = static_cast<double>(size);
  const double cy = r.next_uniform(0.3, 0.7) * S, cx = r.next_uniform(0.3, 0.7) * S;
  const double ay = r.next_uniform(0.12, 0.28) * S, ax = r.next_uniform(0.12, 0.28) * S;
  const double th = r.next_uniform(0, std::numbers::pi);
  const double fg = r.next_uniform(0.15, 0.35), bg = r.next_uniform(0.55, 0.8);
  Image img(size, size, 3);
  mask = MaskImage(size, size, 1);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const double u = (std::cos(th) * dx + std::sin(th) * dy) / ax, v = (-std::sin(th) * dx + std::cos(th) * dy) / ay;
      const bool in = u * u + v * v <= 1.0;
      mask.at(y, x, 0) = in ? 1.0 : 0.0;
      for (std::size_t c = 0; c < 3; ++c)
        img.at(y, x, c) = std::clamp((in ? fg : bg) + (c == 0 ? 0.08 : 0.0) + r.next_uniform(-0.2, 0.2), 0.0, 1.0);
    }
  return img;
}

struct Row {
  std::string path;
  std::string label;
  std::string split;  // may be empty
  std::string mask;   // may be empty
};

inline void write_manifest(const fs::path& file, const std::vector<std::string>& labels, const std::vector<Row>& rows) {
  std::ofstream os(file);
  os << "# labels: ";
  for (std::size_t i = 0; i < labels.size(); ++i) os << (i ? "," : "") << labels[i];
  os << "\n";
  bool split = false, mask = false;
  for (const auto& r : rows) {
    split |= !r.split.empty();
    mask |= !r.mask.empty();
  }
  os << "path,label" << (split ? ",split" : "") << (mask ? ",mask" : "") << "\n";
  for (const auto& r : rows) {
    os << r.path << "," << r.label;
    if (split) os << "," << r.split;
    if (mask) os << "," << r.mask;
    os << "\n";
  }
}

/// Writes `per_class[c]` blob-texture PNGs per class and a manifest; returns
/// the manifest path. `split_of(c, i)` fills the optional split column.
inline fs::path write_blob_dataset(const fs::path& dir, const std::vector<std::size_t>& per_class, std::size_t size,
                                   std::uint64_t seed,
                                   const std::function<std::string(std::size_t, std::size_t)>& split_of = {}) {
  fs::create_directories(dir / "img");
  std::vector<std::string> labels;
  std::vector<Row> rows;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    labels.push_back("class" + std::to_string(c));
    for (std::size_t i = 0; i < per_class[c]; ++i) {
      const std::string name = "c" + std::to_string(c) + "_" + std::to_string(i) + ".png";
      const auto s = lesionforge::derive_seed(seed, c, i);
      lesionforge::save_image(dir / "img" / name, blob_texture(static_cast<int>(c % 3), size, s));
      rows.push_back({"img/" + name, labels.back(), split_of ? split_of(c, i) : "", ""});
    }
  }
  write_manifest(dir / "manifest.csv", labels, rows);
  return dir / "manifest.csv";
}

/// Writes a config file from key=value lines.
inline fs::path write_config(const fs::path& file, const std::vector<std::string>& lines) {
  std::ofstream os(file);
  for (const auto& l : lines) os << l << "\n";
  return file;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace fixtures

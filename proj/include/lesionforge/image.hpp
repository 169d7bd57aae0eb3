#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace lesionforge {

/// 8-bit raster as read from disk, row-major, channel-interleaved.
struct RawImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> data;
};

/// Intensities in [0, 1], row-major, channel-interleaved. channels is 1 or 3
/// for images entering the pipeline; feature stacks may append channels.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * channels + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * channels + c]; }

  std::size_t pixels() const { return height * width; }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

/// Single-channel mask image; the binary form thresholds at 0.5 with ties to 1.
using MaskImage = Image;

inline Image normalize(const RawImage& raw) {
  Image img(raw.height, raw.width, raw.channels);
  for (std::size_t i = 0; i < raw.data.size(); ++i) img.data[i] = raw.data[i] / 255.0;
  return img;
}

inline RawImage to_raw(const Image& img) {
  RawImage raw{img.height, img.width, img.channels, std::vector<std::uint8_t>(img.data.size())};
  for (std::size_t i = 0; i < img.data.size(); ++i)
    raw.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  return raw;
}

inline Image to_luma(const Image& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) throw std::invalid_argument("to_luma: expected 1 or 3 channels");
  Image out(img.height, img.width, 1);
  for (std::size_t i = 0; i < img.pixels(); ++i)
    out.data[i] = 0.299 * img.data[3 * i] + 0.587 * img.data[3 * i + 1] + 0.114 * img.data[3 * i + 2];
  return out;
}

inline Image to_rgb(const Image& img) {
  if (img.channels == 3) return img;
  if (img.channels != 1) throw std::invalid_argument("to_rgb: expected 1 or 3 channels");
  Image out(img.height, img.width, 3);
  for (std::size_t i = 0; i < img.pixels(); ++i)
    for (std::size_t c = 0; c < 3; ++c) out.data[3 * i + c] = img.data[i];
  return out;
}

/// Appends the channels of `extra` (same spatial size) after those of `img`.
inline Image stack_channels(const Image& img, const Image& extra) {
  if (img.height != extra.height || img.width != extra.width)
    throw std::invalid_argument("stack_channels: spatial sizes differ");
  Image out(img.height, img.width, img.channels + extra.channels);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    for (std::size_t c = 0; c < img.channels; ++c) out.data[i * out.channels + c] = img.data[i * img.channels + c];
    for (std::size_t c = 0; c < extra.channels; ++c)
      out.data[i * out.channels + img.channels + c] = extra.data[i * extra.channels + c];
  }
  return out;
}

}  // namespace lesionforge

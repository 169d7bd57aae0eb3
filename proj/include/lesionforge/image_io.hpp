#pragma once

// 8-bit PNG (libpng) and binary PPM/PGM (P6/P5) reading and writing.

#include <png.h>

#include <cctype>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lesionforge/image.hpp"

namespace lesionforge {

using TextChunks = std::vector<std::pair<std::string, std::string>>;

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw std::runtime_error("cannot open image file '" + path.string() + "'");
  return f;
}

// libpng reports errors by longjmp; the message is stashed for the caller.
inline void png_fail(png_structp png, png_const_charp msg) {
  if (auto* err = static_cast<std::string*>(png_get_error_ptr(png))) *err = msg;
  png_longjmp(png, 1);
}
inline void png_warn(png_structp, png_const_charp) {}

inline RawImage read_png(const std::filesystem::path& path) {
  auto f = open_file(path, "rb");
  std::string err;
  RawImage img;
  std::vector<png_bytep> rows;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp& p;
    png_infop& i;
    ~Guard() { png_destroy_read_struct(&p, &i, nullptr); }
  } guard{png, info};
  if (setjmp(png_jmpbuf(png))) throw std::runtime_error("PNG error in '" + path.string() + "': " + err);
  png_init_io(png, f.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  if (img.channels != 1 && img.channels != 3)
    throw std::runtime_error("unsupported PNG channel layout in '" + path.string() + "'");
  img.data.resize(img.width * img.height * img.channels);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.data.data() + y * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  return img;
}

inline void skip_pnm_space(std::istream& is) {
  while (true) {
    int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      return;
    }
  }
}

inline RawImage read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image file '" + path.string() + "'");
  std::string magic(2, '\0');
  is.read(magic.data(), 2);
  RawImage img;
  if (magic == "P6") img.channels = 3;
  else if (magic == "P5") img.channels = 1;
  else throw std::runtime_error("'" + path.string() + "' is not a binary PPM/PGM");
  std::size_t maxval = 0;
  skip_pnm_space(is);
  is >> img.width;
  skip_pnm_space(is);
  is >> img.height;
  skip_pnm_space(is);
  is >> maxval;
  is.get();
  if (!is || maxval == 0 || maxval > 255) throw std::runtime_error("unsupported PNM header in '" + path.string() + "'");
  img.data.resize(img.width * img.height * img.channels);
  if (!is.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size())))
    throw std::runtime_error("truncated PNM payload in '" + path.string() + "'");
  if (maxval != 255)
    for (auto& v : img.data) v = static_cast<std::uint8_t>((v * 255 + maxval / 2) / maxval);
  return img;
}

}  // namespace detail

/// Reads PNG or binary PNM (P6/P5), detected from the file signature.
inline RawImage read_image(const std::filesystem::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw std::runtime_error("cannot open image file '" + path.string() + "'");
  unsigned char sig[8] = {};
  probe.read(reinterpret_cast<char*>(sig), 8);
  probe.close();
  if (png_sig_cmp(sig, 0, 8) == 0) return detail::read_png(path);
  if (sig[0] == 'P' && (sig[1] == '5' || sig[1] == '6')) return detail::read_pnm(path);
  throw std::runtime_error("unrecognised image format: '" + path.string() + "'");
}

inline Image load_image(const std::filesystem::path& path) { return normalize(read_image(path)); }

inline void write_png(const std::filesystem::path& path, const RawImage& img, const TextChunks& text = {}) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_png: expected 1 or 3 channels");
  auto f = detail::open_file(path, "wb");
  std::string err;
  std::vector<png_text> chunks(text.size());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_fail, detail::png_warn);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp& p;
    png_infop& i;
    ~Guard() { png_destroy_write_struct(&p, &i); }
  } guard{png, info};
  if (setjmp(png_jmpbuf(png))) throw std::runtime_error("PNG error writing '" + path.string() + "': " + err);
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  for (std::size_t i = 0; i < text.size(); ++i) {
    chunks[i].compression = PNG_TEXT_COMPRESSION_NONE;
    chunks[i].key = const_cast<char*>(text[i].first.c_str());
    chunks[i].text = const_cast<char*>(text[i].second.c_str());
  }
  if (!chunks.empty()) png_set_text(png, info, chunks.data(), static_cast<int>(chunks.size()));
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.data.data() + y * img.width * img.channels));
  png_write_end(png, nullptr);
}

/// Writes P5 for single-channel and P6 for three-channel rasters; text entries
/// become `# key: value` header comments.
inline void write_pnm(const std::filesystem::path& path, const RawImage& img, const TextChunks& text = {}) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_pnm: expected 1 or 3 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  os << (img.channels == 3 ? "P6" : "P5") << '\n';
  for (const auto& [k, v] : text) os << "# " << k << ": " << v << '\n';
  os << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (!os) throw std::runtime_error("failed writing '" + path.string() + "'");
}

/// Chooses PNG or PNM from the extension (.png, .ppm, .pgm).
inline void save_image(const std::filesystem::path& path, const Image& img, const TextChunks& text = {}) {
  const auto ext = path.extension().string();
  if (ext == ".ppm" || ext == ".pgm") write_pnm(path, to_raw(img), text);
  else write_png(path, to_raw(img), text);
}

}  // namespace lesionforge

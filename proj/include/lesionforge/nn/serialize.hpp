#pragma once

// Parameter file layout, all integers little-endian:
//   "LFW1" | u32 tensor_count | per tensor:
//     u32 name_len | name bytes | u32 rank | u32 dims[rank] | f32 payload[prod(dims)]

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lesionforge/tensor.hpp"

namespace lesionforge::nn {

using NamedTensor = std::pair<std::string, Tensor<float>>;

inline constexpr char kParamMagic[4] = {'L', 'F', 'W', '1'};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("parameter file truncated");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

}  // namespace detail

inline void write_parameters(std::ostream& os, const std::vector<NamedTensor>& tensors) {
  os.write(kParamMagic, 4);
  detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.data) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw std::runtime_error("failed to write parameter stream");
}

inline std::vector<NamedTensor> read_parameters(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kParamMagic, 4) != 0)
    throw std::runtime_error("not a parameter file (bad magic)");
  const std::uint32_t count = detail::get_u32(is);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = detail::get_u32(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error("parameter file truncated");
    const std::uint32_t rank = detail::get_u32(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_u32(is);
    Tensor<float> t(shape);
    for (auto& v : t.data) v = std::bit_cast<float>(detail::get_u32(is));
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

inline void save_parameters(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  write_parameters(os, tensors);
}

inline std::vector<NamedTensor> load_parameters(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open parameter file '" + path.string() + "'");
  return read_parameters(is);
}

inline const Tensor<float>& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw std::runtime_error("parameter '" + name + "' missing from file");
}

}  // namespace lesionforge::nn

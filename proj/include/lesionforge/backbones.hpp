#pragma once

// Frozen surrogate feature extractors. Each keeps the structural signature of
// the network it stands in for and emits 64 channels at 1/16 resolution:
//   S-MOBILE  stem conv, then inverted-residual blocks (1x1 expand, 3x3
//             depthwise, linear 1x1 projection)
//   S-VGG     plain stacked 3x3 convolutions with 2x2 max pooling
//   S-INCEPT  stem conv, then modules with parallel 3x3 and 5x5 branches
//             concatenated along channels

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include "lesionforge/core.hpp"
#include "lesionforge/image.hpp"
#include "lesionforge/nn/ops.hpp"
#include "lesionforge/tensor.hpp"

namespace lesionforge {

enum class BackboneKind { s_mobile, s_vgg, s_incept };

inline constexpr BackboneKind kAllBackbones[] = {BackboneKind::s_mobile, BackboneKind::s_vgg, BackboneKind::s_incept};
inline constexpr std::size_t kFeatureChannels = 64;
inline constexpr std::size_t kMinBackboneInput = 16;

inline std::string to_string(BackboneKind k) {
  switch (k) {
    case BackboneKind::s_mobile: return "S-MOBILE";
    case BackboneKind::s_vgg: return "S-VGG";
    default: return "S-INCEPT";
  }
}

// Lower-case form used for file names and config keys.
inline std::string slug(BackboneKind k) {
  switch (k) {
    case BackboneKind::s_mobile: return "s_mobile";
    case BackboneKind::s_vgg: return "s_vgg";
    default: return "s_incept";
  }
}

struct ConvLayer {
  std::size_t weight = 0;  // index into Backbone::parameters()
  std::size_t bias = 0;
  std::size_t stride = 1;
  bool depthwise = false;
  bool relu = true;
};
struct PoolLayer {
  std::size_t k = 2;
  std::size_t stride = 2;
};
struct BranchConcat {
  std::vector<ConvLayer> left;
  std::vector<ConvLayer> right;
};
using BackboneLayer = std::variant<ConvLayer, PoolLayer, BranchConcat>;

class Backbone {
 public:
  static Backbone build(BackboneKind kind, std::uint64_t seed, std::size_t in_channels = 3) {
    Backbone b;
    b.kind_ = kind;
    b.in_channels_ = in_channels;
    b.seed_ = derive_seed(seed, 0x6b62ULL, static_cast<std::uint64_t>(kind));
    const std::size_t C = in_channels;
    switch (kind) {
      case BackboneKind::s_mobile:
        b.layers_.push_back(b.conv("stem", C, 16, 3, 2, false, true));
        b.inverted_residual("ir1", 16, 64, 24);
        b.inverted_residual("ir2", 24, 96, 32);
        b.inverted_residual("ir3", 32, 128, 64);
        break;
      case BackboneKind::s_vgg:
        b.layers_.push_back(b.conv("conv1_1", C, 16, 3, 1, false, true));
        b.layers_.push_back(b.conv("conv1_2", 16, 16, 3, 1, false, true));
        b.layers_.push_back(PoolLayer{});
        b.layers_.push_back(b.conv("conv2_1", 16, 32, 3, 1, false, true));
        b.layers_.push_back(PoolLayer{});
        b.layers_.push_back(b.conv("conv3_1", 32, 64, 3, 1, false, true));
        b.layers_.push_back(b.conv("conv3_2", 64, 64, 3, 1, false, true));
        b.layers_.push_back(PoolLayer{});
        b.layers_.push_back(b.conv("conv4_1", 64, 64, 3, 1, false, true));
        b.layers_.push_back(PoolLayer{});
        break;
      case BackboneKind::s_incept:
        b.layers_.push_back(b.conv("stem", C, 32, 3, 2, false, true));
        b.layers_.push_back(BranchConcat{{b.conv("mix1.b3", 32, 16, 3, 2, false, true)},
                                         {b.conv("mix1.b5", 32, 16, 5, 2, false, true)}});
        b.layers_.push_back(PoolLayer{});
        b.layers_.push_back(BranchConcat{{b.conv("mix2.b3", 32, 32, 3, 1, false, true)},
                                         {b.conv("mix2.b5", 32, 32, 5, 1, false, true)}});
        b.layers_.push_back(PoolLayer{});
        break;
    }
    return b;
  }

  BackboneKind kind() const { return kind_; }
  std::size_t in_channels() const { return in_channels_; }
  const std::vector<BackboneLayer>& layers() const { return layers_; }
  const std::vector<Parameter<float>>& parameters() const { return params_; }
  std::vector<Parameter<float>>& parameters() { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Convolutions with a spatial (k > 1) kernel.
  std::size_t spatial_conv_count() const {
    std::size_t n = 0;
    auto count = [&](const ConvLayer& c) { n += params_[c.weight].value.dim(2) > 1; };
    for (const auto& l : layers_) {
      if (const auto* c = std::get_if<ConvLayer>(&l)) count(*c);
      if (const auto* b = std::get_if<BranchConcat>(&l)) {
        for (const auto& c : b->left) count(c);
        for (const auto& c : b->right) count(c);
      }
    }
    return n;
  }

  /// Forward pass over an N x C x H x W batch; no intermediate state is kept.
  Tensor<float> forward(const Tensor<float>& x) const {
    if (x.rank() != 4 || x.dim(1) != in_channels_)
      throw std::invalid_argument(to_string(kind_) + ": expected N x " + std::to_string(in_channels_) + " x H x W input");
    if (x.dim(2) < kMinBackboneInput || x.dim(3) < kMinBackboneInput)
      throw std::invalid_argument(to_string(kind_) + ": input " + std::to_string(x.dim(2)) + "x" +
                                  std::to_string(x.dim(3)) + " is smaller than the 16x16 minimum");
    Tensor<float> h = x;
    for (const auto& layer : layers_) {
      if (const auto* c = std::get_if<ConvLayer>(&layer)) {
        h = apply_conv(*c, h);
      } else if (const auto* p = std::get_if<PoolLayer>(&layer)) {
        h = nn::max_pool2d(h, p->k, p->stride).out;
      } else {
        const auto& br = std::get<BranchConcat>(layer);
        Tensor<float> a = h, b = h;
        for (const auto& c : br.left) a = apply_conv(c, a);
        for (const auto& c : br.right) b = apply_conv(c, b);
        h = nn::concat_channels(a, b);
      }
    }
    return h;
  }

  /// Hash over every parameter's bytes; unchanged iff the weights are bit-identical.
  std::uint64_t digest() const {
    std::uint64_t h = 0;
    for (const auto& p : params_) {
      std::string_view bytes(reinterpret_cast<const char*>(p.value.data.data()), p.value.size() * sizeof(float));
      h = splitmix64(h ^ hash_string(p.name) ^ hash_string(bytes));
    }
    return h;
  }

 private:
  ConvLayer conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                 bool depthwise, bool relu) {
    const std::string prefix = slug(kind_) + "." + name;
    Parameter<float> w(prefix + ".w", depthwise ? Shape{in, 1, k, k} : Shape{out, in, k, k});
    Parameter<float> b(prefix + ".b", Shape{depthwise ? in : out});
    he_uniform_init(w, depthwise ? k * k : in * k * k, seed_);
    CounterRng rng(seed_, hash_string(b.name));
    for (auto& v : b.value.data) v = static_cast<float>(rng.next_uniform(-0.1, 0.1));
    w.frozen = b.frozen = true;
    ConvLayer layer{params_.size(), params_.size() + 1, stride, depthwise, relu};
    params_.push_back(std::move(w));
    params_.push_back(std::move(b));
    return layer;
  }

  void inverted_residual(const std::string& name, std::size_t in, std::size_t expanded, std::size_t out) {
    layers_.push_back(conv(name + ".expand", in, expanded, 1, 1, false, true));
    layers_.push_back(conv(name + ".dw", expanded, expanded, 3, 2, true, true));
    layers_.push_back(conv(name + ".project", expanded, out, 1, 1, false, false));
  }

  Tensor<float> apply_conv(const ConvLayer& c, const Tensor<float>& x) const {
    const auto& w = params_[c.weight].value;
    const auto& b = params_[c.bias].value;
    Tensor<float> y = c.depthwise ? nn::depthwise_conv2d(x, w, b, c.stride, nn::Padding::same)
                                  : nn::conv2d(x, w, b, c.stride, nn::Padding::same);
    return c.relu ? nn::relu(y) : y;
  }

  BackboneKind kind_ = BackboneKind::s_mobile;
  std::size_t in_channels_ = 3;
  std::uint64_t seed_ = 0;
  std::vector<BackboneLayer> layers_;
  std::vector<Parameter<float>> params_;
};

inline Backbone build_backbone(BackboneKind kind, std::uint64_t seed, std::size_t in_channels = 3) {
  return Backbone::build(kind, seed, in_channels);
}

/// 1 x C x H x W tensor from an image, centred by subtracting 0.5.
inline Tensor<float> image_to_tensor(const Image& img) {
  Tensor<float> t({1, img.channels, img.height, img.width});
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) t.at(0, c, y, x) = static_cast<float>(img.at(y, x, c) - 0.5);
  return t;
}

/// Feature map (1 x 64 x H/16 x W/16) of a single image.
inline Tensor<float> extract_features(const Backbone& backbone, const Image& img) {
  return backbone.forward(image_to_tensor(img));
}

/// Global-average-pooled features of a single image.
inline std::vector<float> pooled_features(const Backbone& backbone, const Image& img) {
  return nn::global_avg_pool(extract_features(backbone, img)).data;
}

/// Pooled feature vectors keyed by sample id.
struct FeatureTable {
  std::size_t width = 0;
  std::vector<std::string> ids;
  std::vector<std::vector<float>> rows;

  void add(std::string id, std::vector<float> row) {
    if (row.size() != width)
      throw ValidationError("feature row for '" + id + "' has width " + std::to_string(row.size()) + ", expected " +
                            std::to_string(width));
    index_[id] = rows.size();
    ids.push_back(std::move(id));
    rows.push_back(std::move(row));
  }
  const std::vector<float>* find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &rows[it->second];
  }
  const std::vector<float>& at(const std::string& id) const {
    if (const auto* r = find(id)) return *r;
    throw ValidationError("feature table has no row for sample '" + id + "'");
  }
  /// Throws listing (up to five) ids absent from the table.
  void require_ids(const std::vector<std::string>& wanted) const {
    std::vector<std::string> missing;
    for (const auto& id : wanted)
      if (!find(id)) missing.push_back(id);
    if (missing.empty()) return;
    std::string msg = "feature table is missing " + std::to_string(missing.size()) + " sample id(s):";
    for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 5); ++i) msg += " " + missing[i];
    throw ValidationError(msg);
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

/// Header `id,<width>`, then `sample_id,f0,...,f{W-1}`; '#' lines are comments.
inline void write_feature_table(std::ostream& os, const FeatureTable& t, const std::vector<std::string>& comments = {}) {
  for (const auto& c : comments) os << "# " << c << '\n';
  os << "id," << t.width << '\n';
  char buf[32];
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    os << t.ids[i];
    for (float v : t.rows[i]) {
      std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(v));
      os << buf;
    }
    os << '\n';
  }
}

inline FeatureTable read_feature_table(std::istream& is, std::optional<std::size_t> expected_width = std::nullopt) {
  FeatureTable t;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    if (!header) {
      std::string w;
      if (cell != "id" || !std::getline(ss, w, ','))
        throw ValidationError("feature table line " + std::to_string(lineno) + ": expected header 'id,<width>'");
      try {
        t.width = std::stoul(w);
      } catch (const std::exception&) {
        throw ValidationError("feature table line " + std::to_string(lineno) + ": bad width '" + w + "'");
      }
      if (t.width == 0) throw ValidationError("feature table width must be positive");
      if (expected_width && t.width != *expected_width)
        throw ValidationError("feature table width " + std::to_string(t.width) + " does not match expected " +
                              std::to_string(*expected_width));
      header = true;
      continue;
    }
    std::vector<float> row;
    std::string v;
    while (std::getline(ss, v, ',')) {
      char* end = nullptr;
      const float f = std::strtof(v.c_str(), &end);
      if (end == v.c_str() || !std::isfinite(f))
        throw ValidationError("feature table line " + std::to_string(lineno) + ": bad value '" + v + "'");
      row.push_back(f);
    }
    if (row.size() != t.width)
      throw ValidationError("feature table line " + std::to_string(lineno) + ": dimension mismatch, row has " +
                            std::to_string(row.size()) + " values but the table width is " + std::to_string(t.width));
    if (t.find(cell)) throw ValidationError("feature table line " + std::to_string(lineno) + ": duplicate id '" + cell + "'");
    t.add(cell, std::move(row));
  }
  if (!header) throw ValidationError("feature table has no header");
  return t;
}

inline void save_feature_table(const std::filesystem::path& path, const FeatureTable& t,
                               const std::vector<std::string>& comments = {}) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write feature table '" + path.string() + "'");
  write_feature_table(os, t, comments);
}

/// Reads a feature table and, when `required_ids` is non-empty, checks coverage.
inline FeatureTable import_features(const std::filesystem::path& path, const std::vector<std::string>& required_ids = {},
                                    std::optional<std::size_t> expected_width = std::nullopt) {
  std::ifstream is(path);
  if (!is) throw ValidationError("feature table not found: '" + path.string() + "'");
  FeatureTable t = read_feature_table(is, expected_width);
  t.require_ids(required_ids);
  return t;
}

/// Pools features for every (id, image) pair produced by `load` and writes the table.
/// `load(i)` returns the preprocessed image of item i.
inline FeatureTable compute_feature_table(const Backbone& backbone, const std::vector<std::string>& ids,
                                          const std::function<Image(std::size_t)>& load) {
  std::vector<std::vector<float>> rows(ids.size());
  parallel_for(ids.size(), [&](std::size_t i) { rows[i] = pooled_features(backbone, load(i)); });
  FeatureTable t;
  t.width = kFeatureChannels;
  for (std::size_t i = 0; i < ids.size(); ++i) t.add(ids[i], std::move(rows[i]));
  return t;
}

inline FeatureTable export_features(const Backbone& backbone, const std::vector<std::string>& ids,
                                    const std::function<Image(std::size_t)>& load, const std::filesystem::path& out,
                                    const std::vector<std::string>& comments = {}) {
  FeatureTable t = compute_feature_table(backbone, ids, load);
  save_feature_table(out, t, comments);
  return t;
}

}  // namespace lesionforge

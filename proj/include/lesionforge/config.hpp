#pragma once

// Experiment configuration: flat `key = value` lines, dotted keys, '#' starts
// a comment. Unknown keys are rejected. Relative paths resolve against the
// directory holding the config file.

#include <openssl/evp.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lesionforge/backbones.hpp"
#include "lesionforge/core.hpp"
#include "lesionforge/dataset.hpp"
#include "lesionforge/ensemble.hpp"
#include "lesionforge/imageops.hpp"
#include "lesionforge/segmentation.hpp"

namespace lesionforge {

enum class MaskSource { model, identity };

struct ExperimentConfig {
  std::filesystem::path manifest;
  LabelSource label_source = LabelSource::header;
  std::size_t image_size = 128;
  SplitFractions split;
  std::uint64_t seed = 0;

  bool rebalance_weights = true;
  bool rebalance_augment = true;
  double cap_ratio = std::numeric_limits<double>::infinity();
  AugmentRanges augment;

  FilterChainConfig filters = FilterChainConfig::classification_default();
  bool sobel_channel = false;

  bool seg_enabled = false;
  MaskSource mask_source = MaskSource::model;
  MaskMode mask_mode = MaskMode::multiply;
  std::size_t seg_size = 64;
  std::size_t seg_epochs = 50;
  std::size_t seg_batch_size = 8;
  double seg_lr = 1e-3;

  EnsembleMode ensemble_mode = EnsembleMode::soft_vote;
  std::vector<double> ensemble_weights = uniform_weights(3);
  TrainConfig train;

  // Externally computed pooled features, one optional table per backbone.
  std::array<std::filesystem::path, 3> feature_import;

  std::size_t timing_warmup = 10;
  std::size_t timing_runs = 100;

  std::filesystem::path out = "lesionforge_out";

  std::size_t backbone_channels() const { return 3 + (sobel_channel ? 1 : 0); }
  bool imports_features() const {
    return std::any_of(feature_import.begin(), feature_import.end(), [](const auto& p) { return !p.empty(); });
  }

  /// Every setting that influences results, one `key=value` per line, sorted.
  /// The output directory and timing repetitions are excluded.
  std::string canonical() const;
  /// SHA-256 of canonical(), lower-case hex.
  std::string digest() const;
  void validate() const;
};

namespace detail {

inline std::string fmt_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ValidationError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

inline double parse_real(const std::string& key, const std::string& v) {
  if (v == "inf" || v == "infinity") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || std::isnan(d))
    throw ValidationError("config key '" + key + "': expected a number, got '" + v + "'");
  return d;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw ValidationError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': integer out of range '" + v + "'");
  }
}

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 computation failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

}  // namespace detail

inline std::string ExperimentConfig::canonical() const {
  using detail::fmt_double;
  std::map<std::string, std::string> kv;
  kv["manifest"] = manifest.string();
  kv["labels.source"] = label_source == LabelSource::header ? "header" : "data";
  kv["image.size"] = std::to_string(image_size);
  kv["split.train"] = fmt_double(split.train);
  kv["split.val"] = fmt_double(split.val);
  kv["split.test"] = fmt_double(split.test);
  kv["seed"] = std::to_string(seed);
  kv["rebalance.weights"] = rebalance_weights ? "true" : "false";
  kv["rebalance.augment"] = rebalance_augment ? "true" : "false";
  kv["rebalance.cap_ratio"] = fmt_double(cap_ratio);
  kv["augment.rotation"] = fmt_double(augment.rotation_deg);
  kv["augment.zoom_min"] = fmt_double(augment.zoom_min);
  kv["augment.zoom_max"] = fmt_double(augment.zoom_max);
  kv["augment.max_shift"] = fmt_double(augment.max_shift);
  kv["augment.flip_prob"] = fmt_double(augment.flip_prob);
  kv["filters"] = to_string(filters);
  kv["filters.sobel_channel"] = sobel_channel ? "true" : "false";
  kv["segmentation.enabled"] = seg_enabled ? "true" : "false";
  kv["segmentation.mask_source"] = mask_source == MaskSource::model ? "model" : "identity";
  kv["segmentation.mode"] = to_string(mask_mode);
  kv["segmentation.size"] = std::to_string(seg_size);
  kv["segmentation.epochs"] = std::to_string(seg_epochs);
  kv["segmentation.batch_size"] = std::to_string(seg_batch_size);
  kv["segmentation.lr"] = fmt_double(seg_lr);
  kv["ensemble.mode"] = to_string(ensemble_mode);
  std::string w;
  for (std::size_t i = 0; i < ensemble_weights.size(); ++i) w += (i ? "," : "") + fmt_double(ensemble_weights[i]);
  kv["ensemble.weights"] = w;
  kv["train.epochs"] = std::to_string(train.epochs);
  kv["train.batch_size"] = std::to_string(train.batch_size);
  kv["train.lr"] = fmt_double(train.lr);
  for (std::size_t j = 0; j < 3; ++j) kv["features." + slug(kAllBackbones[j])] = feature_import[j].string();
  std::string out_text;
  for (const auto& [k, v] : kv) out_text += k + "=" + v + "\n";
  return out_text;
}

inline std::string ExperimentConfig::digest() const { return detail::sha256_hex(canonical()); }

inline void ExperimentConfig::validate() const {
  if (manifest.empty()) throw ValidationError("config key 'manifest' is required");
  if (!std::filesystem::exists(manifest)) throw ValidationError("config key 'manifest': file not found '" + manifest.string() + "'");
  if (image_size < kMinBackboneInput)
    throw ValidationError("config key 'image.size': must be at least " + std::to_string(kMinBackboneInput));
  try {
    split.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("config keys 'split.*': ") + e.what());
  }
  if (!(cap_ratio >= 1)) throw ValidationError("config key 'rebalance.cap_ratio': must be >= 1");
  try {
    augment.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(std::string("config keys 'augment.*': ") + e.what());
  }
  if (seg_size < 8 || seg_size % 4)
    throw ValidationError("config key 'segmentation.size': must be a multiple of 4 and at least 8");
  if (seg_batch_size == 0) throw ValidationError("config key 'segmentation.batch_size': must be positive");
  if (!(seg_lr > 0) || !std::isfinite(seg_lr)) throw ValidationError("config key 'segmentation.lr': must be positive");
  validate_model_weights(ensemble_weights, 3);
  if (train.batch_size == 0) throw ValidationError("config key 'train.batch_size': must be positive");
  if (!(train.lr > 0) || !std::isfinite(train.lr)) throw ValidationError("config key 'train.lr': must be positive");
  for (std::size_t j = 0; j < 3; ++j)
    if (!feature_import[j].empty() && !std::filesystem::exists(feature_import[j]))
      throw ValidationError("config key 'features." + slug(kAllBackbones[j]) + "': file not found '" +
                            feature_import[j].string() + "'");
  if (imports_features() &&
      std::any_of(feature_import.begin(), feature_import.end(), [](const auto& p) { return p.empty(); }))
    throw ValidationError("config keys 'features.*': either all three backbones import features or none do");
  if (timing_runs < 10) throw ValidationError("config key 'timing.runs': must be at least 10");
}

/// Parses config text. `base_dir` anchors relative paths.
inline ExperimentConfig parse_config(std::istream& is, const std::filesystem::path& base_dir) {
  ExperimentConfig c;
  auto path_of = [&](const std::string& v) {
    const std::filesystem::path p(v);
    return (p.is_absolute() || v.empty() ? p : base_dir / p).lexically_normal();
  };
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> setters = {
      {"manifest", [&](auto&, auto& v) { c.manifest = path_of(v); }},
      {"labels.source",
       [&](auto& k, auto& v) {
         if (v == "header") c.label_source = LabelSource::header;
         else if (v == "data") c.label_source = LabelSource::data;
         else throw ValidationError("config key '" + k + "': expected header or data");
       }},
      {"image.size", [&](auto& k, auto& v) { c.image_size = detail::parse_uint(k, v); }},
      {"split.train", [&](auto& k, auto& v) { c.split.train = detail::parse_real(k, v); }},
      {"split.val", [&](auto& k, auto& v) { c.split.val = detail::parse_real(k, v); }},
      {"split.test", [&](auto& k, auto& v) { c.split.test = detail::parse_real(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = detail::parse_uint(k, v); }},
      {"out", [&](auto&, auto& v) { c.out = path_of(v); }},
      {"rebalance.weights", [&](auto& k, auto& v) { c.rebalance_weights = detail::parse_bool(k, v); }},
      {"rebalance.augment", [&](auto& k, auto& v) { c.rebalance_augment = detail::parse_bool(k, v); }},
      {"rebalance.cap_ratio", [&](auto& k, auto& v) { c.cap_ratio = detail::parse_real(k, v); }},
      {"augment.rotation", [&](auto& k, auto& v) { c.augment.rotation_deg = detail::parse_real(k, v); }},
      {"augment.zoom_min", [&](auto& k, auto& v) { c.augment.zoom_min = detail::parse_real(k, v); }},
      {"augment.zoom_max", [&](auto& k, auto& v) { c.augment.zoom_max = detail::parse_real(k, v); }},
      {"augment.max_shift", [&](auto& k, auto& v) { c.augment.max_shift = detail::parse_real(k, v); }},
      {"augment.flip_prob", [&](auto& k, auto& v) { c.augment.flip_prob = detail::parse_real(k, v); }},
      {"filters",
       [&](auto& k, auto& v) {
         try {
           c.filters = parse_filter_chain(v);
         } catch (const std::invalid_argument& e) {
           throw ValidationError("config key '" + k + "': " + e.what());
         }
       }},
      {"filters.sobel_channel", [&](auto& k, auto& v) { c.sobel_channel = detail::parse_bool(k, v); }},
      {"segmentation.enabled", [&](auto& k, auto& v) { c.seg_enabled = detail::parse_bool(k, v); }},
      {"segmentation.mask_source",
       [&](auto& k, auto& v) {
         if (v == "model") c.mask_source = MaskSource::model;
         else if (v == "identity") c.mask_source = MaskSource::identity;
         else throw ValidationError("config key '" + k + "': expected model or identity");
       }},
      {"segmentation.mode",
       [&](auto& k, auto& v) {
         if (v == "multiply") c.mask_mode = MaskMode::multiply;
         else if (v == "crop") c.mask_mode = MaskMode::crop;
         else throw ValidationError("config key '" + k + "': expected multiply or crop");
       }},
      {"segmentation.size", [&](auto& k, auto& v) { c.seg_size = detail::parse_uint(k, v); }},
      {"segmentation.epochs", [&](auto& k, auto& v) { c.seg_epochs = detail::parse_uint(k, v); }},
      {"segmentation.batch_size", [&](auto& k, auto& v) { c.seg_batch_size = detail::parse_uint(k, v); }},
      {"segmentation.lr", [&](auto& k, auto& v) { c.seg_lr = detail::parse_real(k, v); }},
      {"ensemble.mode", [&](auto&, auto& v) { c.ensemble_mode = parse_ensemble_mode(v); }},
      {"ensemble.weights",
       [&](auto& k, auto& v) {
         c.ensemble_weights.clear();
         std::stringstream ss(v);
         std::string item;
         while (std::getline(ss, item, ',')) c.ensemble_weights.push_back(detail::parse_real(k, detail::trim(item)));
       }},
      {"train.epochs", [&](auto& k, auto& v) { c.train.epochs = detail::parse_uint(k, v); }},
      {"train.batch_size", [&](auto& k, auto& v) { c.train.batch_size = detail::parse_uint(k, v); }},
      {"train.lr", [&](auto& k, auto& v) { c.train.lr = detail::parse_real(k, v); }},
      {"features.s_mobile", [&](auto&, auto& v) { c.feature_import[0] = path_of(v); }},
      {"features.s_vgg", [&](auto&, auto& v) { c.feature_import[1] = path_of(v); }},
      {"features.s_incept", [&](auto&, auto& v) { c.feature_import[2] = path_of(v); }},
      {"timing.warmup", [&](auto& k, auto& v) { c.timing_warmup = detail::parse_uint(k, v); }},
      {"timing.runs", [&](auto& k, auto& v) { c.timing_runs = detail::parse_uint(k, v); }},
  };
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    const std::string where = "config line " + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ValidationError(where + "expected key=value, got '" + t + "'");
    const std::string key = detail::trim(t.substr(0, eq)), value = detail::trim(t.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) throw ValidationError(where + "unknown key '" + key + "'");
    if (seen.count(key))
      throw ValidationError(where + "key '" + key + "' already set on line " + std::to_string(seen[key]));
    seen[key] = lineno;
    try {
      it->second(key, value);
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("config file not found: '" + path.string() + "'");
  return parse_config(is, std::filesystem::absolute(path).parent_path());
}

}  // namespace lesionforge

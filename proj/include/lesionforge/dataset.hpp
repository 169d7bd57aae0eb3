#pragma once

// Manifests and stratified splits, plus the class-balancing helpers used by
// `prepare`.
//
// Manifest format (UTF-8, comma separated):
//   # labels: nevus,melanoma          optional, must be the first line
//   path,label[,split][,mask]         header; column order is free
//   img/0001.png,nevus,train,masks/0001.png
// Other lines starting with '#' are comments. Relative paths resolve against
// the manifest's directory.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "lesionforge/core.hpp"

namespace lesionforge {

enum class Split { unassigned, train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    default: return "";
  }
}

inline std::optional<Split> parse_split(const std::string& s) {
  if (s.empty() || s == "unassigned") return Split::unassigned;
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  return std::nullopt;
}

class LabelMap {
 public:
  LabelMap() = default;
  explicit LabelMap(std::vector<std::string> names) {
    for (auto& n : names) add(n);
  }

  int add(const std::string& name) {
    if (index_.count(name)) throw ValidationError("duplicate label name '" + name + "'");
    index_[name] = static_cast<int>(names_.size());
    names_.push_back(name);
    return index_[name];
  }
  std::optional<int> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
};

struct Sample {
  std::string id;  // file stem, unique within a manifest
  std::filesystem::path image_path;
  int label_id = 0;
  Split split = Split::unassigned;
  std::filesystem::path mask_path;  // empty when no ground-truth mask
  bool augmented = false;
};

struct DatasetManifest {
  std::vector<Sample> samples;
  LabelMap label_map;
  std::vector<std::size_t> counts;

  std::size_t num_classes() const { return label_map.size(); }

  void recount() {
    counts.assign(label_map.size(), 0);
    for (const auto& s : samples) ++counts.at(static_cast<std::size_t>(s.label_id));
  }

  std::vector<std::size_t> counts_in(Split split) const {
    std::vector<std::size_t> c(label_map.size(), 0);
    for (const auto& s : samples)
      if (s.split == split) ++c[static_cast<std::size_t>(s.label_id)];
    return c;
  }

  std::vector<std::size_t> indices_in(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == split) out.push_back(i);
    return out;
  }

  bool has_masks() const {
    return std::any_of(samples.begin(), samples.end(), [](const Sample& s) { return !s.mask_path.empty(); });
  }
};

/// Where label names come from: a leading "# labels:" line, or first-seen order in the data.
enum class LabelSource { header, data };

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

inline DatasetManifest parse_manifest(std::istream& is, const std::filesystem::path& base_dir,
                                      LabelSource source = LabelSource::header) {
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  bool have_header_labels = false, have_columns = false, first_content = true;
  int col_path = -1, col_label = -1, col_split = -1, col_mask = -1;
  std::unordered_map<std::string, std::size_t> ids;
  auto fail = [&](const std::string& what) {
    throw ValidationError("manifest line " + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      const std::string body = detail::trim(t.substr(1));
      if (first_content && body.rfind("labels:", 0) == 0) {
        if (source == LabelSource::header) {
          for (const auto& n : detail::split_csv(body.substr(7))) {
            if (n.empty()) fail("empty label name in labels line");
            try {
              m.label_map.add(n);
            } catch (const ValidationError& e) {
              fail(e.what());
            }
          }
          have_header_labels = true;
        }
      }
      first_content = false;
      continue;
    }
    first_content = false;
    const auto cells = detail::split_csv(t);
    if (!have_columns) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        const int c = static_cast<int>(i);
        if (cells[i] == "path") col_path = c;
        else if (cells[i] == "label") col_label = c;
        else if (cells[i] == "split") col_split = c;
        else if (cells[i] == "mask") col_mask = c;
        else fail("unknown column '" + cells[i] + "' in header");
      }
      if (col_path < 0 || col_label < 0) fail("header must name 'path' and 'label' columns");
      if (source == LabelSource::header && !have_header_labels)
        fail("label source is 'header' but no '# labels:' line precedes the column header");
      have_columns = true;
      continue;
    }
    const int ncols = std::max({col_path, col_label, col_split, col_mask}) + 1;
    if (static_cast<int>(cells.size()) != ncols)
      fail("expected " + std::to_string(ncols) + " fields, found " + std::to_string(cells.size()));
    Sample s;
    const std::string& path = cells[col_path];
    if (path.empty()) fail("empty path");
    s.image_path = std::filesystem::path(path).is_absolute() ? std::filesystem::path(path) : base_dir / path;
    s.image_path = s.image_path.lexically_normal();
    s.id = std::filesystem::path(path).stem().string();
    const std::string& label = cells[col_label];
    auto id = m.label_map.find(label);
    if (!id) {
      if (source == LabelSource::header) fail("unknown label '" + label + "'");
      if (label.empty()) fail("empty label");
      id = m.label_map.add(label);
    }
    s.label_id = *id;
    if (col_split >= 0) {
      auto sp = parse_split(cells[col_split]);
      if (!sp) fail("invalid split '" + cells[col_split] + "'");
      s.split = *sp;
    }
    if (col_mask >= 0 && !cells[col_mask].empty()) {
      const std::filesystem::path mp(cells[col_mask]);
      s.mask_path = (mp.is_absolute() ? mp : base_dir / mp).lexically_normal();
    }
    s.augmented = s.id.rfind("aug_", 0) == 0;
    if (ids.count(s.id)) fail("duplicate sample id '" + s.id + "' (first on line " + std::to_string(ids[s.id]) + ")");
    ids[s.id] = lineno;
    m.samples.push_back(std::move(s));
  }
  if (m.samples.empty()) throw ValidationError("empty manifest");
  if (m.label_map.size() < 2) throw ValidationError("manifest needs at least 2 classes");
  m.recount();
  for (std::size_t c = 0; c < m.counts.size(); ++c)
    if (m.counts[c] == 0) throw ValidationError("label '" + m.label_map.name(static_cast<int>(c)) + "' has no samples");
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path, LabelSource source = LabelSource::header) {
  std::ifstream is(path);
  if (!is) throw ValidationError("manifest file not found: '" + path.string() + "'");
  return parse_manifest(is, path.parent_path(), source);
}

/// Writes the manifest with the split column filled; `comments` become extra
/// '#' lines after the labels line.
inline void write_manifest(std::ostream& os, const DatasetManifest& m, const std::vector<std::string>& comments = {}) {
  os << "# labels: ";
  for (std::size_t i = 0; i < m.label_map.size(); ++i) os << (i ? "," : "") << m.label_map.name(static_cast<int>(i));
  os << '\n';
  for (const auto& c : comments) os << "# " << c << '\n';
  const bool masks = m.has_masks();
  os << "path,label,split" << (masks ? ",mask" : "") << '\n';
  for (const auto& s : m.samples) {
    os << s.image_path.string() << ',' << m.label_map.name(s.label_id) << ',' << to_string(s.split);
    if (masks) os << ',' << s.mask_path.string();
    os << '\n';
  }
}

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;

  void validate() const {
    for (double f : {train, val, test})
      if (!(f > 0 && f < 1)) throw ValidationError("split fractions must lie in (0, 1)");
    if (std::abs(train + val + test - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1");
  }
};

/// Per-class {train, val, test} counts by largest-remainder rounding. Ties in
/// the remainder favour train, then val. Every split receives at least one sample.
inline std::array<std::size_t, 3> split_counts(std::size_t n, const SplitFractions& f) {
  const double raw[3] = {n * f.train, n * f.val, n * f.test};
  std::array<std::size_t, 3> out{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) assigned += out[i] = static_cast<std::size_t>(std::floor(raw[i] + 1e-9));
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return (raw[a] - std::floor(raw[a] + 1e-9)) > (raw[b] - std::floor(raw[b] + 1e-9)) + 1e-12;
  });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++out[order[k % 3]];
  for (int i = 0; i < 3; ++i) {
    if (out[i] > 0) continue;
    const int donor = static_cast<int>(std::max_element(out.begin(), out.end()) - out.begin());
    --out[donor];
    ++out[i];
  }
  return out;
}

/// Assigns every sample to train/val/test, stratified per class. The result
/// depends only on manifest order and seed.
inline DatasetManifest stratified_split(const DatasetManifest& m, const SplitFractions& f, std::uint64_t seed) {
  f.validate();
  DatasetManifest out = m;
  std::vector<std::vector<std::size_t>> by_class(m.num_classes());
  for (std::size_t i = 0; i < m.samples.size(); ++i) by_class[m.samples[i].label_id].push_back(i);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 3)
      throw ValidationError("class '" + m.label_map.name(static_cast<int>(c)) + "' has " + std::to_string(idx.size()) +
                            " sample(s); at least 3 are needed to populate train, val and test");
    CounterRng rng(seed, 0x73706c6974ULL + c);
    rng.shuffle(idx.begin(), idx.end());
    const auto counts = split_counts(idx.size(), f);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      Split s = k < counts[0] ? Split::train : k < counts[0] + counts[1] ? Split::val : Split::test;
      out.samples[idx[k]].split = s;
    }
  }
  return out;
}

using ClassWeights = std::vector<double>;

/// w[c] = N / (K * n_c).
inline ClassWeights class_weights_from_counts(const std::vector<std::size_t>& counts) {
  if (counts.empty()) throw ValidationError("no classes");
  std::size_t total = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] == 0) throw ValidationError("class " + std::to_string(i) + " has zero samples; weight undefined");
    total += counts[i];
  }
  ClassWeights w(counts.size());
  const double K = static_cast<double>(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) w[i] = static_cast<double>(total) / (K * static_cast<double>(counts[i]));
  return w;
}

inline ClassWeights compute_class_weights(const DatasetManifest& m) { return class_weights_from_counts(m.counts); }

/// Synthetic samples to add per class: min(max_count, ceil(cap_ratio * n_c)) - n_c.
/// cap_ratio = +inf targets parity with the largest class.
inline std::vector<std::size_t> rebalance_plan(const std::vector<std::size_t>& counts, double cap_ratio) {
  if (!(cap_ratio >= 1.0)) throw ValidationError("rebalance cap_ratio must be >= 1");
  const std::size_t max_count = counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end());
  std::vector<std::size_t> plan(counts.size(), 0);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    double target = static_cast<double>(max_count);
    if (std::isfinite(cap_ratio)) target = std::min(target, std::ceil(cap_ratio * static_cast<double>(counts[c])));
    const auto t = static_cast<std::size_t>(target);
    plan[c] = t > counts[c] ? t - counts[c] : 0;
  }
  return plan;
}

inline std::vector<std::size_t> rebalance_plan(const DatasetManifest& m, double cap_ratio) {
  return rebalance_plan(m.counts, cap_ratio);
}

}  // namespace lesionforge

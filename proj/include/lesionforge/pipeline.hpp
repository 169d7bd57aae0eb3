#pragma once

// Subcommands behind the lesionforge CLI. Each reads the experiment config,
// works inside the output directory and leaves a run record
// (run_<command>.json) listing its outputs with SHA-256 digests.
//
// Output directory layout:
//   split_manifest.csv, class_weights.csv, aug/         prepare
//   segmenter.lfw, seg_history.csv, masks/, masked/     seg train / seg apply
//   features/<backbone>_<digest>.csv                   train (cache)
//   heads.lfw, train_history.csv                       train
//   metrics.json, roc_<model>.csv,
//   predictions_<model>.csv, timing.json               evaluate

#include <array>
#include <cctype>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lesionforge/backbones.hpp"
#include "lesionforge/config.hpp"
#include "lesionforge/dataset.hpp"
#include "lesionforge/ensemble.hpp"
#include "lesionforge/image_io.hpp"
#include "lesionforge/imageops.hpp"
#include "lesionforge/metrics.hpp"
#include "lesionforge/nn/gradcheck_suite.hpp"
#include "lesionforge/nn/serialize.hpp"
#include "lesionforge/segmentation.hpp"

namespace lesionforge {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr const char* kMetricsFormat = "lesionforge.metrics/1";

struct RunRecord {
  std::string command;
  std::string config_digest;
  std::uint64_t seed = 0;
  std::string config_text;
  std::vector<std::pair<std::string, double>> stage_seconds;
  std::vector<fs::path> outputs;
};

inline std::string file_sha256(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read '" + p.string() + "' for hashing");
  std::ostringstream ss;
  ss << is.rdbuf();
  return detail::sha256_hex(ss.str());
}

inline void write_run_record(const fs::path& out_dir, const RunRecord& r) {
  json j;
  j["command"] = r.command;
  j["config_digest"] = r.config_digest;
  j["seed"] = r.seed;
  json cfg = json::object();
  std::istringstream lines(r.config_text);
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    cfg[line.substr(0, eq)] = line.substr(eq + 1);
  }
  j["config"] = cfg;
  json stages = json::object();
  for (const auto& [name, s] : r.stage_seconds) stages[name] = s;
  j["stage_seconds"] = stages;
  json outs = json::array();
  for (const auto& p : r.outputs)
    outs.push_back({{"path", fs::relative(p, out_dir).generic_string()}, {"sha256", file_sha256(p)}});
  j["outputs"] = outs;
  std::ofstream os(out_dir / ("run_" + r.command + ".json"));
  os << j.dump(2) << '\n';
}

/// Shared state of one subcommand invocation.
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, std::ostream& log) : cfg_(std::move(cfg)), log_(log) {
    cfg_.validate();
    digest_ = cfg_.digest();
    out_ = fs::absolute(cfg_.out).lexically_normal();
    fs::create_directories(out_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::string& digest() const { return digest_; }
  const fs::path& out_dir() const { return out_; }

  std::vector<std::string> provenance() const {
    return {"config_digest=" + digest_, "seed=" + std::to_string(cfg_.seed)};
  }
  TextChunks image_tags() const { return {{"config_digest", digest_}, {"seed", std::to_string(cfg_.seed)}}; }
  std::vector<nn::NamedTensor> meta_tensors() const {
    std::vector<float> bytes;
    for (std::size_t i = 0; i + 1 < digest_.size(); i += 2)
      bytes.push_back(static_cast<float>(std::stoi(digest_.substr(i, 2), nullptr, 16)));
    return {{"meta.config_digest", Tensor<float>({bytes.size()}, bytes)},
            {"meta.seed", Tensor<float>({2}, {static_cast<float>(cfg_.seed >> 32), static_cast<float>(cfg_.seed & 0xffffffffu)})}};
  }

  void begin(const std::string& command) {
    record_ = RunRecord{command, digest_, cfg_.seed, cfg_.canonical(), {}, {}};
  }
  void stage(const std::string& name, double seconds) { record_.stage_seconds.emplace_back(name, seconds); }
  void output(const fs::path& p) { record_.outputs.push_back(p); }
  void finish() { write_run_record(out_, record_); }

  // ---- prepare ---------------------------------------------------------

  fs::path split_manifest_path() const { return out_ / "split_manifest.csv"; }

  DatasetManifest load_prepared() const {
    if (!fs::exists(split_manifest_path()))
      throw ValidationError("missing '" + split_manifest_path().string() + "'; run `lesionforge prepare` first");
    return load_manifest(split_manifest_path(), LabelSource::header);
  }

  ClassWeights weights_for(const DatasetManifest& m) const {
    if (!cfg_.rebalance_weights) return ClassWeights(m.num_classes(), 1.0);
    return class_weights_from_counts(m.counts_in(Split::train));
  }

  /// Loads an image as RGB at the working size.
  Image load_rgb(const fs::path& p, std::size_t size) const { return resize_bilinear(to_rgb(load_image(p)), size, size); }
  MaskImage load_mask(const fs::path& p, std::size_t size) const {
    return binarize(resize_bilinear(to_luma(load_image(p)), size, size));
  }

  DatasetManifest prepare() {
    begin("prepare");
    auto t0 = std::chrono::steady_clock::now();
    DatasetManifest m = load_manifest(cfg_.manifest, cfg_.label_source);
    std::size_t assigned = 0;
    for (const auto& s : m.samples) assigned += s.split != Split::unassigned;
    for (const auto& s : m.samples)
      if (s.augmented) throw ValidationError("manifest: sample id '" + s.id + "' uses the reserved 'aug_' prefix");
    if (assigned == 0) {
      m = stratified_split(m, cfg_.split, cfg_.seed);
    } else if (assigned != m.samples.size()) {
      throw ValidationError("manifest: " + std::to_string(assigned) + " of " + std::to_string(m.samples.size()) +
                            " rows carry a split; assign all rows or none");
    } else {
      for (std::size_t c = 0; c < m.num_classes(); ++c)
        if (m.counts_in(Split::train)[c] == 0)
          throw ValidationError("manifest: class '" + m.label_map.name(static_cast<int>(c)) + "' has no train rows");
    }
    stage("split", seconds_since(t0));

    t0 = std::chrono::steady_clock::now();
    const fs::path aug_dir = out_ / "aug";
    fs::remove_all(aug_dir);
    std::size_t n_aug = 0;
    if (cfg_.rebalance_augment) {
      const auto plan = rebalance_plan(m.counts_in(Split::train), cfg_.cap_ratio);
      std::vector<Sample> extra;
      for (std::size_t c = 0; c < plan.size(); ++c) {
        if (plan[c] == 0) continue;
        std::vector<std::size_t> sources;
        for (std::size_t i = 0; i < m.samples.size(); ++i)
          if (m.samples[i].split == Split::train && static_cast<std::size_t>(m.samples[i].label_id) == c)
            sources.push_back(i);
        fs::create_directories(aug_dir);
        // Round-robin over the class's training samples; k counts passes.
        std::vector<Sample> made(plan[c]);
        parallel_for(plan[c], [&](std::size_t j) {
          const std::size_t src = sources[j % sources.size()], k = j / sources.size();
          const Sample& s = m.samples[src];
          const AffineParams params = sample_affine_params(cfg_.augment, augmentation_seed(cfg_.seed, src, k));
          Sample a;
          a.id = "aug_" + s.id + "_" + std::to_string(k);
          a.label_id = s.label_id;
          a.split = Split::train;
          a.augmented = true;
          a.image_path = aug_dir / (a.id + ".png");
          save_image(a.image_path, affine_transform(load_rgb(s.image_path, cfg_.image_size), params), image_tags());
          if (!s.mask_path.empty()) {
            a.mask_path = aug_dir / (a.id + "_mask.png");
            save_image(a.mask_path, binarize(affine_transform(load_mask(s.mask_path, cfg_.image_size), params)),
                       image_tags());
          }
          made[j] = std::move(a);
        });
        for (auto& a : made) {
          output(a.image_path);
          if (!a.mask_path.empty()) output(a.mask_path);
          extra.push_back(std::move(a));
        }
        n_aug += plan[c];
      }
      for (auto& a : extra) m.samples.push_back(std::move(a));
      m.recount();
    }
    stage("augment", seconds_since(t0));

    {
      std::ofstream os(split_manifest_path());
      write_manifest(os, m, provenance());
    }
    output(split_manifest_path());
    const ClassWeights w = weights_for(m);
    const auto train_counts = m.counts_in(Split::train);
    {
      std::ofstream os(out_ / "class_weights.csv");
      for (const auto& c : provenance()) os << "# " << c << '\n';
      os << "class,label,train_count,weight\n";
      char buf[64];
      for (std::size_t c = 0; c < w.size(); ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", w[c]);
        os << c << ',' << m.label_map.name(static_cast<int>(c)) << ',' << train_counts[c] << ',' << buf << '\n';
      }
    }
    output(out_ / "class_weights.csv");
    log_ << "prepare: " << m.samples.size() << " samples (" << n_aug << " augmented), train/val/test = "
         << m.indices_in(Split::train).size() << "/" << m.indices_in(Split::val).size() << "/"
         << m.indices_in(Split::test).size() << "\n";
    finish();
    return m;
  }

  // ---- segmentation ----------------------------------------------------

  fs::path segmenter_path() const { return out_ / "segmenter.lfw"; }

  struct SegSummary {
    SegTrainHistory history;
    std::optional<double> val_dice;
    std::size_t pairs = 0;
  };

  SegSummary seg_train() {
    begin("seg_train");
    const DatasetManifest m = load_prepared();
    std::vector<SegPair> train, val;
    for (const auto& s : m.samples) {
      if (s.mask_path.empty() || (s.split != Split::train && s.split != Split::val)) continue;
      SegPair p{load_rgb(s.image_path, cfg_.seg_size), load_mask(s.mask_path, cfg_.seg_size)};
      (s.split == Split::train ? train : val).push_back(std::move(p));
    }
    if (train.empty())
      throw ValidationError(
          "segmentation training needs mask rows in the manifest's train split and found none; "
          "add a 'mask' column, or set segmentation.mask_source=identity to classify unmasked images");
    auto t0 = std::chrono::steady_clock::now();
    auto net = build_dual_encoder<float>(DualEncoderConfig{}, derive_seed(cfg_.seed, hash_string("segmenter")));
    SegTrainConfig tc;
    tc.epochs = cfg_.seg_epochs;
    tc.batch_size = cfg_.seg_batch_size;
    tc.lr = cfg_.seg_lr;
    tc.seed = cfg_.seed;
    SegSummary sum;
    sum.pairs = train.size();
    sum.history = train_segmenter(net, train, tc);
    stage("train", seconds_since(t0));
    if (!val.empty()) {
      double d = 0;
      for (const auto& p : val) d += dice_score(predict_mask(net, p.image), p.mask);
      sum.val_dice = d / static_cast<double>(val.size());
    }
    auto tensors = net.to_named();
    for (auto& t : meta_tensors()) tensors.push_back(std::move(t));
    nn::save_parameters(segmenter_path(), tensors);
    output(segmenter_path());
    {
      std::ofstream os(out_ / "seg_history.csv");
      for (const auto& c : provenance()) os << "# " << c << '\n';
      os << "epoch,loss,train_dice\n";
      for (std::size_t e = 0; e < sum.history.loss.size(); ++e)
        os << e + 1 << ',' << sum.history.loss[e] << ',' << sum.history.train_dice[e] << '\n';
    }
    output(out_ / "seg_history.csv");
    log_ << "seg train: " << train.size() << " pairs, " << sum.history.epochs_run << " epochs";
    if (!sum.history.loss.empty()) log_ << ", final loss " << sum.history.loss.back();
    if (sum.val_dice) log_ << ", validation Dice " << *sum.val_dice;
    log_ << "\n";
    finish();
    return sum;
  }

  /// Lesion mask for a working-size RGB image: all ones for the identity
  /// source, else predicted at the segmentation size and resized back.
  MaskImage compute_mask(const Image& rgb) const {
    if (cfg_.mask_source == MaskSource::identity) return MaskImage(rgb.height, rgb.width, 1, 1.0);
    const MaskImage small = predict_mask(segmenter(), resize_bilinear(rgb, cfg_.seg_size, cfg_.seg_size));
    return resize_bilinear(small, rgb.height, rgb.width);
  }

  std::optional<MaskImage> mask_for(const Image& rgb) const {
    if (!cfg_.seg_enabled) return std::nullopt;
    return compute_mask(rgb);
  }

  void seg_apply() {
    begin("seg_apply");
    const DatasetManifest m = load_prepared();
    if (cfg_.mask_source == MaskSource::model && !fs::exists(segmenter_path()))
      throw ValidationError("missing '" + segmenter_path().string() +
                            "'; run `lesionforge seg train` first or set segmentation.mask_source=identity");
    fs::create_directories(out_ / "masks");
    fs::create_directories(out_ / "masked");
    std::size_t fallbacks = 0;
    std::vector<char> fell(m.samples.size(), 0);
    parallel_for(m.samples.size(), [&](std::size_t i) {
      const auto& s = m.samples[i];
      const Image rgb = load_rgb(s.image_path, cfg_.image_size);
      const MaskImage mask = compute_mask(rgb);
      const MaskedImage r = apply_mask(rgb, mask, cfg_.mask_mode);
      fell[i] = r.fell_back;
      save_image(out_ / "masks" / (s.id + ".pgm"), binarize(mask), image_tags());
      save_image(out_ / "masked" / (s.id + ".png"), r.image, image_tags());
    });
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
      fallbacks += fell[i];
      output(out_ / "masks" / (m.samples[i].id + ".pgm"));
      output(out_ / "masked" / (m.samples[i].id + ".png"));
    }
    log_ << "seg apply: " << m.samples.size() << " images masked (" << to_string(cfg_.mask_mode) << ")";
    if (fallbacks) log_ << ", " << fallbacks << " empty masks fell back to multiply";
    log_ << "\n";
    finish();
  }

  // ---- features --------------------------------------------------------

  /// Classifier input: resize, filter chain, optional mask, optional Sobel channel.
  Image preprocess(const Sample& s) const {
    const Image rgb = load_rgb(s.image_path, cfg_.image_size);
    Image img = apply_filter_chain(rgb, cfg_.filters);
    if (img.channels == 1) img = to_rgb(img);
    if (const auto mask = mask_for(rgb)) img = apply_mask(img, *mask, cfg_.mask_mode).image;
    if (cfg_.sobel_channel) img = stack_channels(img, sobel_magnitude(img));
    return img;
  }

  const std::array<Backbone, 3>& backbones() const {
    if (!backbones_) {
      backbones_.emplace();
      for (std::size_t j = 0; j < 3; ++j)
        (*backbones_)[j] = build_backbone(kAllBackbones[j], cfg_.seed, cfg_.backbone_channels());
    }
    return *backbones_;
  }

  fs::path feature_cache_path(BackboneKind k) const {
    return out_ / "features" / (slug(k) + "_" + digest_.substr(0, 16) + ".csv");
  }

  /// Pooled features of every manifest sample for each backbone: imported
  /// tables when configured, else the cache, else computed and cached.
  std::array<FeatureTable, 3> features(const DatasetManifest& m) {
    std::vector<std::string> ids;
    for (const auto& s : m.samples) ids.push_back(s.id);
    std::array<FeatureTable, 3> tables;
    if (cfg_.imports_features()) {
      for (std::size_t j = 0; j < 3; ++j) tables[j] = import_features(cfg_.feature_import[j], ids);
      return tables;
    }
    std::vector<std::size_t> todo;
    for (std::size_t j = 0; j < 3; ++j) {
      const fs::path p = feature_cache_path(kAllBackbones[j]);
      if (fs::exists(p)) {
        tables[j] = import_features(p, ids, kFeatureChannels);
      } else {
        todo.push_back(j);
      }
    }
    if (todo.empty()) return tables;
    fs::create_directories(out_ / "features");
    const auto& bbs = backbones();
    std::vector<std::array<std::vector<float>, 3>> rows(ids.size());
    parallel_for(ids.size(), [&](std::size_t i) {
      const Image img = preprocess(m.samples[i]);
      for (std::size_t j : todo) rows[i][j] = pooled_features(bbs[j], img);
    });
    for (std::size_t j : todo) {
      tables[j].width = kFeatureChannels;
      for (std::size_t i = 0; i < ids.size(); ++i) tables[j].add(ids[i], std::move(rows[i][j]));
      save_feature_table(feature_cache_path(kAllBackbones[j]), tables[j], provenance());
    }
    return tables;
  }

  // ---- train -------------------------------------------------------------

  fs::path heads_path() const { return out_ / "heads.lfw"; }

  struct TrainSummary {
    EnsembleModel model;
    std::vector<std::pair<std::string, TrainHistory>> histories;
    std::array<std::uint64_t, 3> backbone_digest_before{}, backbone_digest_after{};
  };

  TrainSummary train() {
    begin("train");
    const DatasetManifest m = load_prepared();
    const std::size_t K = m.num_classes();
    auto t0 = std::chrono::steady_clock::now();
    TrainSummary sum;
    if (!cfg_.imports_features())
      for (std::size_t j = 0; j < 3; ++j) sum.backbone_digest_before[j] = backbones()[j].digest();
    const auto tables = features(m);
    stage("features", seconds_since(t0));
    for (std::size_t j = 0; j < 3; ++j) output(cfg_.imports_features() ? cfg_.feature_import[j] : feature_cache_path(kAllBackbones[j]));

    std::array<std::vector<std::vector<float>>, 3> xtr, xva;
    std::vector<int> ytr, yva;
    for (const auto& s : m.samples) {
      if (s.split != Split::train && s.split != Split::val) continue;
      auto& xs = s.split == Split::train ? xtr : xva;
      (s.split == Split::train ? ytr : yva).push_back(s.label_id);
      for (std::size_t j = 0; j < 3; ++j) xs[j].push_back(tables[j].at(s.id));
    }
    if (cfg_.train.epochs == 0) log_ << "warning: train.epochs=0, heads are written at initialization\n";
    const ClassWeights cw = weights_for(m);
    TrainConfig tc = cfg_.train;
    tc.seed = cfg_.seed;
    t0 = std::chrono::steady_clock::now();
    sum.model.mode = cfg_.ensemble_mode;
    sum.model.set_weights(cfg_.ensemble_weights);
    for (std::size_t j = 0; j < 3; ++j) {
      Head h("head." + slug(kAllBackbones[j]), tables[j].width, K, derive_seed(cfg_.seed, hash_string("head"), j));
      sum.histories.emplace_back(h.name(), train_head(h, xtr[j], ytr, cw, tc, xva[j], yva));
      sum.model.heads.push_back(std::move(h));
    }
    if (cfg_.ensemble_mode == EnsembleMode::fusion) {
      auto fuse = [](const std::array<std::vector<std::vector<float>>, 3>& x) {
        std::vector<std::vector<float>> out;
        for (std::size_t i = 0; i < x[0].size(); ++i) out.push_back(concat_pooled({&x[0][i], &x[1][i], &x[2][i]}));
        return out;
      };
      Head h("head.fusion", tables[0].width + tables[1].width + tables[2].width, K,
             derive_seed(cfg_.seed, hash_string("head"), 3));
      sum.histories.emplace_back(h.name(), train_head(h, fuse(xtr), ytr, cw, tc, fuse(xva), yva));
      sum.model.fusion = std::move(h);
    }
    stage("heads", seconds_since(t0));
    if (!cfg_.imports_features())
      for (std::size_t j = 0; j < 3; ++j) sum.backbone_digest_after[j] = backbones()[j].digest();

    auto tensors = sum.model.to_named();
    for (auto& t : meta_tensors()) tensors.push_back(std::move(t));
    nn::save_parameters(heads_path(), tensors);
    output(heads_path());
    {
      std::ofstream os(out_ / "train_history.csv");
      for (const auto& c : provenance()) os << "# " << c << '\n';
      os << "model,epoch,train_loss,val_loss,train_accuracy\n";
      for (const auto& [name, h] : sum.histories) {
        os << name << ",0," << h.initial_train_loss << ",,\n";
        for (std::size_t e = 0; e < h.train_loss.size(); ++e) {
          os << name << ',' << e + 1 << ',' << h.train_loss[e] << ',';
          if (e < h.val_loss.size()) os << h.val_loss[e];
          os << ',' << h.train_accuracy[e] << '\n';
        }
      }
    }
    output(out_ / "train_history.csv");
    for (const auto& [name, h] : sum.histories)
      log_ << "train: " << name << " loss " << h.initial_train_loss << " -> "
           << (h.train_loss.empty() ? h.initial_train_loss : h.train_loss.back()) << "\n";
    finish();
    return sum;
  }

  // ---- evaluate ----------------------------------------------------------

  struct ModelResult {
    std::string name;
    std::vector<Prediction> predictions;
    MetricReport report;
    std::vector<RocCurve> roc;
  };

  std::vector<ModelResult> evaluate() {
    begin("evaluate");
    const DatasetManifest m = load_prepared();
    if (!fs::exists(heads_path()))
      throw ValidationError("missing '" + heads_path().string() + "'; run `lesionforge train` first");
    const EnsembleModel model = load_ensemble(heads_path());
    const std::size_t K = m.num_classes();
    if (model.heads.at(0).classes() != K) throw ValidationError("heads.lfw class count does not match the manifest");
    auto t0 = std::chrono::steady_clock::now();
    const auto tables = features(m);
    stage("features", seconds_since(t0));

    const auto test = m.indices_in(Split::test);
    std::vector<int> truth;
    for (std::size_t i : test) truth.push_back(m.samples[i].label_id);
    std::vector<ModelResult> results(4);
    for (std::size_t j = 0; j < 3; ++j) results[j].name = to_string(kAllBackbones[j]);
    results[3].name = "ENSEMBLE(" + to_string(model.mode) + ")";
    for (std::size_t i : test) {
      const auto& id = m.samples[i].id;
      const Prediction p = model.predict({&tables[0].at(id), &tables[1].at(id), &tables[2].at(id)});
      for (std::size_t j = 0; j < 3; ++j) results[j].predictions.push_back(single_model_prediction(p.per_model_probs[j]));
      results[3].predictions.push_back(p);
    }

    json doc;
    doc["format"] = kMetricsFormat;
    doc["config_digest"] = digest_;
    doc["seed"] = cfg_.seed;
    doc["ensemble_mode"] = to_string(model.mode);
    doc["classes"] = m.label_map.names();
    doc["test_samples"] = test.size();
    json models = json::array();
    for (auto& r : results) {
      std::vector<int> pred;
      std::vector<std::vector<double>> scores;
      for (const auto& p : r.predictions) {
        pred.push_back(p.label);
        scores.push_back(p.probs);
      }
      r.report = report(confusion(truth, pred, K));
      for (std::size_t c = 0; c < K; ++c) {
        const bool pos = std::count(truth.begin(), truth.end(), static_cast<int>(c)) > 0;
        const bool neg = std::any_of(truth.begin(), truth.end(), [&](int t) { return t != static_cast<int>(c); });
        if (pos && neg) r.roc.push_back(roc_auc(scores, truth, static_cast<int>(c)));
      }
      models.push_back(model_json(r, m.label_map));
      write_roc(r);
      write_predictions(r, m, test);
    }
    doc["models"] = models;
    {
      std::ofstream os(out_ / "metrics.json");
      os << doc.dump(2) << '\n';
    }
    output(out_ / "metrics.json");

    t0 = std::chrono::steady_clock::now();
    write_timing(m, test, model);
    stage("timing", seconds_since(t0));
    for (const auto& r : results) log_ << "evaluate: " << r.name << " accuracy " << r.report.accuracy << "\n";
    finish();
    return results;
  }

 private:
  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  static std::string file_slug(const std::string& model_name) {
    std::string s;
    for (char c : model_name) {
      if (std::isalnum(static_cast<unsigned char>(c))) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      else if (!s.empty() && s.back() != '_') s += '_';
    }
    while (!s.empty() && s.back() == '_') s.pop_back();
    return s;
  }

  const DualEncoder<float>& segmenter() const {
    std::call_once(seg_once_, [&] {
      if (!fs::exists(segmenter_path()))
        throw ValidationError("missing '" + segmenter_path().string() +
                              "'; run `lesionforge seg train` first or set segmentation.mask_source=identity");
      segmenter_ = load_segmenter(segmenter_path());
    });
    return segmenter_;
  }

  static json model_json(const ModelResult& r, const LabelMap& labels) {
    json j;
    j["model"] = r.name;
    j["accuracy"] = r.report.accuracy;
    j["macro"] = {{"precision", r.report.macro.precision}, {"recall", r.report.macro.recall}, {"f1", r.report.macro.f1}};
    j["weighted"] = {
        {"precision", r.report.weighted.precision}, {"recall", r.report.weighted.recall}, {"f1", r.report.weighted.f1}};
    json pc = json::array();
    for (std::size_t c = 0; c < r.report.per_class.size(); ++c) {
      const auto& cm = r.report.per_class[c];
      json e{{"class", labels.name(static_cast<int>(c))},
             {"precision", cm.precision},
             {"recall", cm.recall},
             {"f1", cm.f1},
             {"support", cm.support}};
      if (cm.undefined_precision) e["precision_undefined"] = true;
      if (cm.undefined_recall) e["recall_undefined"] = true;
      pc.push_back(e);
    }
    j["per_class"] = pc;
    json cmx = json::array();
    for (std::size_t t = 0; t < r.report.matrix.K; ++t) {
      json row = json::array();
      for (std::size_t p = 0; p < r.report.matrix.K; ++p) row.push_back(r.report.matrix.at(t, p));
      cmx.push_back(row);
    }
    j["confusion"] = cmx;
    json auc = json::object();
    for (const auto& c : r.roc) auc[labels.name(c.class_id)] = c.auc;
    j["auc"] = auc;
    return j;
  }

  void write_roc(const ModelResult& r) {
    const fs::path p = out_ / ("roc_" + file_slug(r.name) + ".csv");
    std::ofstream os(p);
    for (const auto& c : provenance()) os << "# " << c << '\n';
    os << "class,threshold,fpr,tpr\n";
    char buf[96];
    for (const auto& curve : r.roc)
      for (const auto& pt : curve.points) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", curve.class_id, pt.threshold, pt.fpr, pt.tpr);
        os << buf;
      }
    output(p);
  }

  void write_predictions(const ModelResult& r, const DatasetManifest& m, const std::vector<std::size_t>& test) {
    const fs::path p = out_ / ("predictions_" + file_slug(r.name) + ".csv");
    std::ofstream os(p);
    for (const auto& c : provenance()) os << "# " << c << '\n';
    os << "sample_id,label";
    for (std::size_t k = 0; k < m.num_classes(); ++k) os << ",prob_" << k;
    os << '\n';
    char buf[32];
    for (std::size_t i = 0; i < test.size(); ++i) {
      os << m.samples[test[i]].id << ',' << r.predictions[i].label;
      for (double v : r.predictions[i].probs) {
        std::snprintf(buf, sizeof buf, ",%.9g", v);
        os << buf;
      }
      os << '\n';
    }
    output(p);
  }

  /// Wall-clock per-sample latency of each surrogate alone (features + head)
  /// and of the full ensemble, on preprocessed test images.
  void write_timing(const DatasetManifest& m, const std::vector<std::size_t>& test, const EnsembleModel& model) {
    json doc;
    doc["config_digest"] = digest_;
    doc["seed"] = cfg_.seed;
    doc["note"] = "wall-clock seconds per sample on this machine; informational only";
    std::vector<Image> imgs;
    for (std::size_t i = 0; i < std::min<std::size_t>(test.size(), 8); ++i) imgs.push_back(preprocess(m.samples[test[i]]));
    if (imgs.empty()) return;
    const auto& bbs = backbones();
    json entries = json::array();
    auto emit = [&](const std::string& name, const TimingReport& t) {
      entries.push_back({{"model", name}, {"n", t.n()}, {"warmup", t.warmup}, {"median_s", t.median}, {"p95_s", t.p95}});
    };
    std::array<double, 3> medians{};
    const bool imported = cfg_.imports_features();
    for (std::size_t j = 0; j < 3; ++j) {
      const auto t = time_inference(
          [&](std::size_t i) {
            const auto f = pooled_features(bbs[j], imgs[i]);
            if (!imported) (void)model.heads[j].predict_one(f);
          },
          imgs.size(), cfg_.timing_warmup, cfg_.timing_runs);
      medians[j] = t.median;
      emit(to_string(kAllBackbones[j]), t);
    }
    if (!imported)
      emit("ENSEMBLE(" + to_string(model.mode) + ")",
           time_inference(
               [&](std::size_t i) {
                 const auto a = pooled_features(bbs[0], imgs[i]), b = pooled_features(bbs[1], imgs[i]),
                            c = pooled_features(bbs[2], imgs[i]);
                 (void)model.predict({&a, &b, &c});
               },
               imgs.size(), cfg_.timing_warmup, cfg_.timing_runs));
    doc["models"] = entries;
    doc["s_mobile_faster_than_s_vgg"] = medians[0] < medians[1];
    const fs::path p = out_ / "timing.json";
    std::ofstream os(p);
    os << doc.dump(2) << '\n';
    output(p);
  }

  ExperimentConfig cfg_;
  std::ostream& log_;
  std::string digest_;
  fs::path out_;
  RunRecord record_;
  mutable std::optional<std::array<Backbone, 3>> backbones_;
  mutable std::once_flag seg_once_;
  mutable DualEncoder<float> segmenter_;
};

// ---- gradcheck -----------------------------------------------------------

/// Runs the finite-difference suite, prints one line per op and returns the
/// process exit code: 0 when every check passes, 2 otherwise.
inline int cmd_gradcheck(std::ostream& os, const nn::SuiteOptions& opt = {}) {
  const auto r = nn::run_gradcheck_suite(opt);
  char buf[160];
  for (const auto& e : r.entries) {
    std::snprintf(buf, sizeof buf, "%-26s max_rel_err=%.3e tol=%.0e coords=%zu %s\n", e.op.c_str(), e.max_rel_error,
                  e.tolerance, e.coords, e.passed ? "PASS" : "FAIL");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "gradcheck: %s in %.1f s\n", r.passed ? "all checks passed" : "FAILED", r.seconds);
  os << buf;
  return r.passed ? 0 : 2;
}

}  // namespace lesionforge

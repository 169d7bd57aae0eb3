#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lesionforge/backbones.hpp"
#include "lesionforge/core.hpp"
#include "lesionforge/nn/adam.hpp"
#include "lesionforge/nn/ops.hpp"
#include "lesionforge/nn/serialize.hpp"
#include "lesionforge/tensor.hpp"

namespace lesionforge {

enum class EnsembleMode { fusion, soft_vote };

inline std::string to_string(EnsembleMode m) { return m == EnsembleMode::fusion ? "FUSION" : "SOFT_VOTE"; }

inline EnsembleMode parse_ensemble_mode(const std::string& s) {
  if (s == "FUSION" || s == "fusion") return EnsembleMode::fusion;
  if (s == "SOFT_VOTE" || s == "soft_vote") return EnsembleMode::soft_vote;
  throw ValidationError("ensemble.mode: expected FUSION or SOFT_VOTE, got '" + s + "'");
}

/// GAP of each map, concatenated in the given order (S-MOBILE, S-VGG, S-INCEPT).
inline std::vector<float> pool_and_concat(std::span<const Tensor<float>> maps) {
  if (maps.size() != 3) throw std::invalid_argument("pool_and_concat: expected three feature maps");
  std::vector<float> z;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].empty()) throw std::invalid_argument("pool_and_concat: feature map " + std::to_string(i) + " is missing");
    const auto g = nn::global_avg_pool(maps[i]);
    z.insert(z.end(), g.data.begin(), g.data.end());
  }
  return z;
}

/// Concatenates already-pooled vectors.
inline std::vector<float> concat_pooled(const std::vector<const std::vector<float>*>& parts) {
  std::vector<float> z;
  for (const auto* p : parts) z.insert(z.end(), p->begin(), p->end());
  return z;
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 0.001;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0) throw ValidationError("train.batch_size must be positive");
    if (!(lr > 0) || !std::isfinite(lr)) throw ValidationError("train.lr must be a positive number");
  }
};

struct TrainHistory {
  std::vector<double> train_loss;  // one entry per epoch, after the epoch's updates
  std::vector<double> val_loss;    // empty when no validation data was given
  std::vector<double> train_accuracy;
  double initial_train_loss = 0;
};

/// Dense + softmax over standardized inputs. Standardization statistics come
/// from the training features and are stored alongside the weights.
class Head {
 public:
  Head() = default;
  Head(std::string name, std::size_t in_width, std::size_t classes, std::uint64_t seed)
      : name_(std::move(name)),
        w_(name_ + ".w", {in_width, classes}),
        b_(name_ + ".b", {classes}),
        mean_(in_width, 0.0f),
        std_(in_width, 1.0f) {
    if (in_width == 0 || classes < 2) throw std::invalid_argument("head: need a positive width and at least 2 classes");
    he_uniform_init(w_, in_width, seed);
  }

  const std::string& name() const { return name_; }
  std::size_t in_width() const { return w_.value.dim(0); }
  std::size_t classes() const { return w_.value.dim(1); }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  void fit_standardizer(const std::vector<std::vector<float>>& X) {
    const std::size_t F = in_width();
    std::vector<double> m(F, 0.0), s(F, 0.0);
    for (const auto& x : X)
      for (std::size_t f = 0; f < F; ++f) m[f] += x[f];
    for (auto& v : m) v /= static_cast<double>(X.size());
    for (const auto& x : X)
      for (std::size_t f = 0; f < F; ++f) s[f] += (x[f] - m[f]) * (x[f] - m[f]);
    for (std::size_t f = 0; f < F; ++f) {
      const double sd = std::sqrt(s[f] / static_cast<double>(X.size()));
      mean_[f] = static_cast<float>(m[f]);
      std_[f] = sd > 1e-12 ? static_cast<float>(sd) : 1.0f;
    }
  }

  Tensor<float> standardize(const std::vector<const std::vector<float>*>& rows) const {
    const std::size_t F = in_width();
    Tensor<float> x({rows.size(), F});
    for (std::size_t n = 0; n < rows.size(); ++n) {
      if (rows[n]->size() != F)
        throw ValidationError(name_ + ": feature width " + std::to_string(rows[n]->size()) + " does not match head width " +
                              std::to_string(F));
      for (std::size_t f = 0; f < F; ++f) x[n * F + f] = ((*rows[n])[f] - mean_[f]) / std_[f];
    }
    return x;
  }

  Tensor<float> logits(const Tensor<float>& xs) const { return nn::dense(xs, w_.value, b_.value); }

  /// Class probabilities, one row per input.
  Tensor<float> predict(const std::vector<const std::vector<float>*>& rows) const {
    return nn::softmax(logits(standardize(rows)));
  }
  std::vector<double> predict_one(const std::vector<float>& x) const {
    const auto p = predict({&x});
    return {p.data.begin(), p.data.end()};
  }

  std::vector<Parameter<float>*> parameters() { return {&w_, &b_}; }

  std::vector<nn::NamedTensor> to_named() const {
    return {{w_.name, w_.value},
            {b_.name, b_.value},
            {name_ + ".mean", Tensor<float>({mean_.size()}, mean_)},
            {name_ + ".std", Tensor<float>({std_.size()}, std_)}};
  }
  static Head from_named(const std::string& name, const std::vector<nn::NamedTensor>& tensors) {
    const auto& w = nn::find_tensor(tensors, name + ".w");
    if (w.rank() != 2) throw ValidationError("head '" + name + "': weight must be 2-d");
    Head h(name, w.dim(0), w.dim(1), 0);
    h.w_.value = w;
    h.b_.value = nn::find_tensor(tensors, name + ".b");
    h.mean_ = nn::find_tensor(tensors, name + ".mean").data;
    h.std_ = nn::find_tensor(tensors, name + ".std").data;
    if (h.b_.value.size() != w.dim(1) || h.mean_.size() != w.dim(0) || h.std_.size() != w.dim(0))
      throw ValidationError("head '" + name + "': inconsistent tensor sizes");
    h.trained_ = true;
    return h;
  }

 private:
  std::string name_;
  Parameter<float> w_, b_;
  std::vector<float> mean_, std_;
  bool trained_ = false;
};

namespace detail {
inline double head_loss(const Head& h, const Tensor<float>& xs, const std::vector<int>& labels,
                        const std::vector<float>& weights, double* accuracy = nullptr) {
  const auto p = nn::softmax(h.logits(xs));
  if (accuracy) {
    const std::size_t K = p.dim(1);
    std::size_t ok = 0;
    for (std::size_t n = 0; n < labels.size(); ++n) {
      const auto* row = &p.data[n * K];
      ok += static_cast<int>(std::max_element(row, row + K) - row) == labels[n];
    }
    *accuracy = static_cast<double>(ok) / static_cast<double>(labels.size());
  }
  return static_cast<double>(nn::weighted_cross_entropy<float>(p, labels, weights));
}
}  // namespace detail

/// Weighted cross-entropy + Adam over mini-batches. Pass an empty `class_weights`
/// for unweighted training and empty validation data to skip validation loss.
inline TrainHistory train_head(Head& head, const std::vector<std::vector<float>>& X, const std::vector<int>& y,
                               const std::vector<double>& class_weights, const TrainConfig& cfg,
                               const std::vector<std::vector<float>>& X_val = {}, const std::vector<int>& y_val = {}) {
  cfg.validate();
  if (X.size() != y.size() || X.empty()) throw ValidationError(head.name() + ": training features and labels differ in count");
  std::vector<int> present(y);
  std::sort(present.begin(), present.end());
  present.erase(std::unique(present.begin(), present.end()), present.end());
  if (present.size() < 2)
    throw ValidationError(head.name() + ": degenerate training split, only one class present");
  std::vector<float> cw(class_weights.begin(), class_weights.end());
  if (!cw.empty() && cw.size() != head.classes())
    throw ValidationError(head.name() + ": class weight count does not match class count");

  head.fit_standardizer(X);
  std::vector<const std::vector<float>*> rows;
  for (const auto& x : X) rows.push_back(&x);
  const Tensor<float> xs = head.standardize(rows);
  Tensor<float> xv;
  if (!X_val.empty()) {
    std::vector<const std::vector<float>*> vr;
    for (const auto& x : X_val) vr.push_back(&x);
    xv = head.standardize(vr);
  }

  TrainHistory hist;
  hist.initial_train_loss = detail::head_loss(head, xs, y, cw);
  nn::Adam<float> adam({cfg.lr});
  auto params = head.parameters();
  const std::size_t F = head.in_width();
  std::vector<std::size_t> order(X.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng(cfg.seed, hash_string(head.name()) + epoch).shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      Tensor<float> xb({stop - start, F});
      std::vector<int> yb;
      for (std::size_t j = start; j < stop; ++j) {
        std::copy_n(&xs.data[order[j] * F], F, &xb.data[(j - start) * F]);
        yb.push_back(y[order[j]]);
      }
      for (auto* p : params) p->zero_grad();
      const auto p = nn::softmax(head.logits(xb));
      const auto gz = nn::softmax_cross_entropy_grad<float>(p, yb, cw);
      nn::dense_backward(xb, params[0]->value, gz, static_cast<Tensor<float>*>(nullptr), params[0]->grad,
                         params[1]->grad);
      adam.step(params);
    }
    double acc = 0;
    hist.train_loss.push_back(detail::head_loss(head, xs, y, cw, &acc));
    hist.train_accuracy.push_back(acc);
    if (!X_val.empty()) hist.val_loss.push_back(detail::head_loss(head, xv, y_val, cw));
  }
  head.mark_trained();
  return hist;
}

/// Lowest index attaining the maximum.
inline int argmax_lowest(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<int>(best);
}

struct Prediction {
  std::vector<double> probs;
  int label = 0;
  std::vector<std::vector<double>> per_model_probs;
  std::vector<double> model_weights;
};

inline constexpr double kProbTolerance = 1e-6;

inline std::vector<double> uniform_weights(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

inline void validate_model_weights(const std::vector<double>& w, std::size_t n) {
  if (w.size() != n)
    throw ValidationError("ensemble.weights: expected " + std::to_string(n) + " weights, got " + std::to_string(w.size()));
  double s = 0;
  for (double v : w) {
    if (!(v >= 0) || !std::isfinite(v)) throw ValidationError("ensemble.weights: weights must be finite and nonnegative");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) throw ValidationError("ensemble.weights: weights must sum to 1");
}

inline Prediction soft_vote(const std::vector<std::vector<double>>& per_model, const std::vector<double>& weights) {
  if (per_model.empty()) throw std::invalid_argument("soft_vote: no model outputs");
  if (weights.size() != per_model.size()) throw std::invalid_argument("soft_vote: weight count does not match model count");
  const std::size_t K = per_model[0].size();
  Prediction out;
  out.probs.assign(K, 0.0);
  for (std::size_t j = 0; j < per_model.size(); ++j) {
    if (per_model[j].size() != K) throw std::invalid_argument("soft_vote: probability vectors differ in length");
    const double s = std::accumulate(per_model[j].begin(), per_model[j].end(), 0.0);
    if (std::abs(s - 1.0) > kProbTolerance)
      throw std::invalid_argument("soft_vote: model " + std::to_string(j) + " probabilities sum to " + std::to_string(s));
    for (std::size_t k = 0; k < K; ++k) out.probs[k] += weights[j] * per_model[j][k];
  }
  out.label = argmax_lowest(out.probs);
  out.per_model_probs = per_model;
  out.model_weights = weights;
  return out;
}

inline Prediction single_model_prediction(std::vector<double> probs) {
  Prediction p;
  p.label = argmax_lowest(probs);
  p.probs = std::move(probs);
  return p;
}

/// Per-backbone heads (always present) plus a fused head in FUSION mode.
struct EnsembleModel {
  EnsembleMode mode = EnsembleMode::soft_vote;
  std::vector<Head> heads;  // S-MOBILE, S-VGG, S-INCEPT
  std::optional<Head> fusion;
  // Held at float precision so a saved model reproduces predictions exactly.
  std::vector<double> weights = rounded(uniform_weights(3));

  static std::vector<double> rounded(std::vector<double> w) {
    for (auto& v : w) v = static_cast<double>(static_cast<float>(v));
    return w;
  }
  void set_weights(const std::vector<double>& w) {
    validate_model_weights(w, 3);
    weights = rounded(w);
  }

  /// `pooled[j]` is the pooled feature vector for backbone j.
  Prediction predict(const std::array<const std::vector<float>*, 3>& pooled) const {
    if (heads.size() != 3) throw std::logic_error("ensemble: expected three per-backbone heads");
    std::vector<std::vector<double>> per;
    for (std::size_t j = 0; j < 3; ++j) {
      if (!heads[j].trained()) throw std::logic_error("ensemble: head '" + heads[j].name() + "' is untrained");
      per.push_back(heads[j].predict_one(*pooled[j]));
    }
    if (mode == EnsembleMode::soft_vote) return soft_vote(per, weights);
    if (!fusion || !fusion->trained()) throw std::logic_error("ensemble: fusion head is untrained");
    Prediction p = single_model_prediction(fusion->predict_one(concat_pooled({pooled[0], pooled[1], pooled[2]})));
    p.per_model_probs = std::move(per);
    return p;
  }

  std::vector<nn::NamedTensor> to_named() const {
    std::vector<nn::NamedTensor> out;
    out.emplace_back("ensemble.mode", Tensor<float>({1}, {mode == EnsembleMode::fusion ? 1.0f : 0.0f}));
    std::vector<float> w(weights.begin(), weights.end());
    out.emplace_back("ensemble.weights", Tensor<float>({w.size()}, w));
    for (const auto& h : heads)
      for (auto& t : h.to_named()) out.push_back(std::move(t));
    if (fusion)
      for (auto& t : fusion->to_named()) out.push_back(std::move(t));
    return out;
  }

  static EnsembleModel from_named(const std::vector<nn::NamedTensor>& tensors) {
    EnsembleModel m;
    m.mode = nn::find_tensor(tensors, "ensemble.mode")[0] != 0.0f ? EnsembleMode::fusion : EnsembleMode::soft_vote;
    const auto& w = nn::find_tensor(tensors, "ensemble.weights");
    m.weights.assign(w.data.begin(), w.data.end());
    for (BackboneKind k : kAllBackbones) m.heads.push_back(Head::from_named("head." + slug(k), tensors));
    if (m.mode == EnsembleMode::fusion) m.fusion = Head::from_named("head.fusion", tensors);
    return m;
  }
};

inline void save_ensemble(const std::filesystem::path& path, const EnsembleModel& m) {
  nn::save_parameters(path, m.to_named());
}
inline EnsembleModel load_ensemble(const std::filesystem::path& path) {
  return EnsembleModel::from_named(nn::load_parameters(path));
}

}  // namespace lesionforge

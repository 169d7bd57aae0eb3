#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lesionforge {

/// K x K counts; rows are the true class, columns the predicted class.
struct ConfusionMatrix {
  std::size_t K = 0;
  std::vector<std::size_t> counts;

  explicit ConfusionMatrix(std::size_t k = 0) : K(k), counts(k * k, 0) {}
  std::size_t& at(std::size_t t, std::size_t p) { return counts[t * K + p]; }
  std::size_t at(std::size_t t, std::size_t p) const { return counts[t * K + p]; }
  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
  std::size_t trace() const {
    std::size_t s = 0;
    for (std::size_t i = 0; i < K; ++i) s += at(i, i);
    return s;
  }
};

inline ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, std::size_t K) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("confusion: label lists differ in length");
  ConfusionMatrix m(K);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || predicted[i] < 0 || static_cast<std::size_t>(truth[i]) >= K ||
        static_cast<std::size_t>(predicted[i]) >= K)
      throw std::invalid_argument("confusion: label out of range at position " + std::to_string(i));
    ++m.at(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(predicted[i]));
  }
  return m;
}

struct ClassMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::size_t support = 0;  // true instances
  // Set when a ratio was 0/0 and reported as 0.
  bool undefined_precision = false;
  bool undefined_recall = false;
};

struct AveragedMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

struct MetricReport {
  double accuracy = 0;
  std::vector<ClassMetrics> per_class;
  AveragedMetrics macro;
  AveragedMetrics weighted;
  ConfusionMatrix matrix;
};

namespace detail {
inline double ratio(std::size_t num, std::size_t den, bool& undefined) {
  undefined = den == 0;
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace detail

/// Per-class precision/recall/F1 with 0/0 reported as 0 (and flagged), plus
/// macro and support-weighted means.
inline MetricReport report(const ConfusionMatrix& m) {
  const std::size_t total = m.total();
  if (m.K == 0 || total == 0) throw std::invalid_argument("report: empty confusion matrix");
  MetricReport r;
  r.matrix = m;
  r.accuracy = static_cast<double>(m.trace()) / static_cast<double>(total);
  r.per_class.resize(m.K);
  for (std::size_t c = 0; c < m.K; ++c) {
    std::size_t tp = m.at(c, c), col = 0, row = 0;
    for (std::size_t j = 0; j < m.K; ++j) {
      col += m.at(j, c);
      row += m.at(c, j);
    }
    auto& cm = r.per_class[c];
    cm.support = row;
    cm.precision = detail::ratio(tp, col, cm.undefined_precision);
    cm.recall = detail::ratio(tp, row, cm.undefined_recall);
    cm.f1 = cm.precision + cm.recall > 0 ? 2 * cm.precision * cm.recall / (cm.precision + cm.recall) : 0.0;
  }
  for (const auto& cm : r.per_class) {
    r.macro.precision += cm.precision / static_cast<double>(m.K);
    r.macro.recall += cm.recall / static_cast<double>(m.K);
    r.macro.f1 += cm.f1 / static_cast<double>(m.K);
    const double w = static_cast<double>(cm.support) / static_cast<double>(total);
    r.weighted.precision += w * cm.precision;
    r.weighted.recall += w * cm.recall;
    r.weighted.f1 += w * cm.f1;
  }
  return r;
}

struct RocPoint {
  double threshold;  // scores >= threshold are called positive; +inf at the origin
  double fpr;
  double tpr;
};

struct RocCurve {
  int class_id = 0;
  std::vector<RocPoint> points;
  double auc = 0;
};

/// One-vs-rest ROC for class c from per-sample score vectors. Thresholds are
/// the distinct scores in decreasing order; AUC by the trapezoid rule.
inline RocCurve roc_auc(const std::vector<std::vector<double>>& scores, std::span<const int> truth, int c) {
  if (scores.size() != truth.size()) throw std::invalid_argument("roc_auc: score and label counts differ");
  std::vector<std::pair<double, bool>> s(scores.size());
  std::size_t npos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    s[i] = {scores[i].at(static_cast<std::size_t>(c)), truth[i] == c};
    npos += s[i].second;
  }
  const std::size_t nneg = s.size() - npos;
  if (npos == 0 || nneg == 0)
    throw std::invalid_argument("roc_auc: class " + std::to_string(c) + " needs both positive and negative samples");
  std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  RocCurve curve;
  curve.class_id = c;
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < s.size();) {
    const double thr = s[i].first;
    for (; i < s.size() && s[i].first == thr; ++i) (s[i].second ? tp : fp) += 1;
    curve.points.push_back({thr, static_cast<double>(fp) / nneg, static_cast<double>(tp) / npos});
  }
  // The last threshold admits every sample, so the curve ends at exactly (1, 1).
  double auc = 0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    auc += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2;
  }
  curve.auc = auc;
  return curve;
}

struct TimingReport {
  std::vector<double> seconds;  // one entry per measured run
  std::size_t warmup = 0;
  double median = 0;
  double p95 = 0;
  std::size_t n() const { return seconds.size(); }
};

/// Nearest-rank percentile of an unsorted sample (q in [0, 1]).
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile of empty sample");
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

/// Times run_one(i) sequentially, cycling through n_samples inputs. Warm-up
/// runs are executed but not recorded.
inline TimingReport time_inference(const std::function<void(std::size_t)>& run_one, std::size_t n_samples,
                                   std::size_t n_warmup = 10, std::size_t n_runs = 100) {
  if (n_runs < 10) throw std::invalid_argument("time_inference: need at least 10 measured runs");
  if (n_samples == 0) throw std::invalid_argument("time_inference: no samples");
  TimingReport r;
  r.warmup = n_warmup;
  for (std::size_t i = 0; i < n_warmup; ++i) run_one(i % n_samples);
  r.seconds.reserve(n_runs);
  for (std::size_t i = 0; i < n_runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run_one(i % n_samples);
    const auto t1 = std::chrono::steady_clock::now();
    r.seconds.push_back(std::max(std::chrono::duration<double>(t1 - t0).count(), 1e-9));
  }
  r.median = median(r.seconds);
  r.p95 = std::max(percentile(r.seconds, 0.95), r.median);
  return r;
}

}  // namespace lesionforge

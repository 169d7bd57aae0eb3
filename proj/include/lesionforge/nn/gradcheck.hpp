#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lesionforge/core.hpp"

namespace lesionforge::nn {

/// A block of values whose analytic gradient is to be compared to central
/// finite differences of a scalar objective.
struct GradTarget {
  std::string name;
  std::span<double> values;
  std::span<const double> analytic;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = true;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Coordinates probed per target; 0 probes all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  // Gradients smaller than this are compared on an absolute scale.
  double scale_floor = 1e-7;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences with the given step. `loss` must recompute the objective
/// from the current contents of the target spans.
inline GradCheckReport grad_check(const std::function<double()>& loss, const std::vector<GradTarget>& targets,
                                  const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  report.tolerance = opt.tolerance;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto& target = targets[t];
    GradCheckEntry entry{target.name};
    std::vector<std::size_t> coords(target.values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords && coords.size() > opt.max_coords) {
      CounterRng rng(opt.seed, t);
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(opt.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double orig = target.values[i];
      target.values[i] = orig + opt.step;
      const double up = loss();
      target.values[i] = orig - opt.step;
      const double down = loss();
      target.values[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(target.analytic[i], numeric, opt.scale_floor));
      ++entry.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error < opt.tolerance;
  return report;
}

}  // namespace lesionforge::nn

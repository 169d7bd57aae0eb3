#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "lesionforge/tensor.hpp"

namespace lesionforge::nn {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  Tensor<T> m;
  Tensor<T> v;
  std::int64_t t = 0;

  static AdamState like(const Parameter<T>& p) { return {Tensor<T>(p.value.shape), Tensor<T>(p.value.shape), 0}; }
};

/// One bias-corrected Adam update. Frozen parameters are a caller error here;
/// Adam::step skips them.
template <typename T>
void adam_step(Parameter<T>& p, AdamState<T>& s, const AdamConfig& cfg = {}) {
  if (p.frozen) throw std::logic_error("adam_step called on frozen parameter '" + p.name + "'");
  if (s.m.shape != p.value.shape) s = AdamState<T>::like(p);
  for (std::size_t i = 0; i < p.grad.size(); ++i) {
    if (!std::isfinite(p.grad[i])) {
      std::ostringstream os;
      os << "non-finite gradient in parameter '" << p.name << "' at index " << i << " (value " << p.grad[i]
         << ", step " << s.t + 1 << ")";
      throw std::runtime_error(os.str());
    }
  }
  s.t += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.t));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const T g = p.grad[i];
    s.m[i] = b1 * s.m[i] + (T(1) - b1) * g;
    s.v[i] = b2 * s.v[i] + (T(1) - b2) * g * g;
    const double mhat = static_cast<double>(s.m[i]) / c1;
    const double vhat = static_cast<double>(s.v[i]) / c2;
    p.value[i] -= static_cast<T>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

/// Optimizer over a fixed parameter list; state is keyed by position.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<Parameter<T>*>& params) {
    if (states_.size() < params.size()) states_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i]->frozen) continue;
      adam_step(*params[i], states_[i], cfg_);
    }
  }

  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<AdamState<T>> states_;
};

}  // namespace lesionforge::nn

#pragma once

// Central-difference checks of every differentiable op plus the composed head
// and dual-encoder networks, all in double precision.

#include <chrono>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lesionforge/core.hpp"
#include "lesionforge/nn/gradcheck.hpp"
#include "lesionforge/nn/ops.hpp"
#include "lesionforge/segmentation.hpp"
#include "lesionforge/tensor.hpp"

namespace lesionforge::nn {

struct SuiteEntry {
  std::string op;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t coords = 0;
  std::size_t trials = 0;
  bool passed = true;
};

struct SuiteReport {
  std::vector<SuiteEntry> entries;
  double seconds = 0;
  bool passed = true;
};

struct SuiteOptions {
  std::uint64_t seed = 2024;
  std::size_t trials = 5;
  // Name of an op whose analytic gradient is deliberately corrupted.
  std::string inject_fault;
};

namespace suite_detail {

using D = Tensor<double>;

inline D random(Shape s, std::uint64_t seed, std::uint64_t stream, double lo = -1, double hi = 1) {
  D t(std::move(s));
  CounterRng rng(seed, stream);
  for (auto& v : t.data) v = rng.next_uniform(lo, hi);
  return t;
}

// Values in [-1, -margin] U [margin, 1]: keeps probes away from ReLU kinks.
inline D away_from_zero(Shape s, std::uint64_t seed, std::uint64_t stream, double margin = 0.05) {
  D t = random(std::move(s), seed, stream, margin, 1.0);
  CounterRng rng(seed, stream + 1000);
  for (auto& v : t.data)
    if (rng.next_uniform() < 0.5) v = -v;
  return t;
}

inline double dot(const D& a, const D& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct Probe {
  std::string name;
  D* value;
  D grad;
};

inline GradCheckReport run(const std::function<double()>& loss, std::vector<Probe>& probes, GradCheckOptions opt,
                           bool fault) {
  std::vector<GradTarget> targets;
  for (auto& p : probes) {
    if (fault) {
      for (auto& g : p.grad.data) g *= 1.01;
      p.grad.data[0] += 1e-3;
    }
    targets.push_back({p.name, std::span<double>(p.value->data), std::span<const double>(p.grad.data)});
  }
  return grad_check(loss, targets, opt);
}

using Check = std::function<GradCheckReport(std::uint64_t seed, bool fault)>;

struct Case {
  std::string op;
  double tolerance;
  Check check;
};

inline std::vector<Case> cases() {
  const GradCheckOptions base{};
  std::vector<Case> cs;

  auto conv_case = [&](std::string name, Shape xs, Shape ws, std::size_t stride, Padding pad) {
    cs.push_back({name, 1e-4, [=](std::uint64_t seed, bool fault) {
                    D x = random(xs, seed, 1), w = random(ws, seed, 2), b = random({ws[0]}, seed, 3);
                    D y0 = conv2d(x, w, b, stride, pad);
                    D r = random(y0.shape, seed, 4);
                    auto loss = [&] { return dot(conv2d(x, w, b, stride, pad), r); };
                    D gx, gw(w.shape), gb(b.shape);
                    conv2d_backward(x, w, stride, pad, r, &gx, gw, &gb);
                    std::vector<Probe> ps{{"x", &x, gx}, {"w", &w, gw}, {"b", &b, gb}};
                    return run(loss, ps, base, fault);
                  }});
  };
  conv_case("conv2d(same,s1)", {2, 3, 6, 6}, {4, 3, 3, 3}, 1, Padding::same);
  conv_case("conv2d(valid,s2)", {1, 2, 7, 7}, {3, 2, 3, 3}, 2, Padding::valid);
  conv_case("conv2d(same,5x5,s2)", {1, 2, 8, 8}, {2, 2, 5, 5}, 2, Padding::same);

  cs.push_back({"depthwise_conv2d", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D x = random({2, 3, 6, 6}, seed, 1), w = random({3, 1, 3, 3}, seed, 2), b = random({3}, seed, 3);
                  D r = random(depthwise_conv2d(x, w, b, 2, Padding::same).shape, seed, 4);
                  auto loss = [&] { return dot(depthwise_conv2d(x, w, b, 2, Padding::same), r); };
                  D gx, gw(w.shape), gb(b.shape);
                  depthwise_conv2d_backward(x, w, 2, Padding::same, r, &gx, gw, &gb);
                  std::vector<Probe> ps{{"x", &x, gx}, {"w", &w, gw}, {"b", &b, gb}};
                  return run(loss, ps, base, fault);
                }});

  cs.push_back({"dense", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D x = random({4, 5}, seed, 1), w = random({5, 3}, seed, 2), b = random({3}, seed, 3);
                  D r = random({4, 3}, seed, 4);
                  auto loss = [&] { return dot(dense(x, w, b), r); };
                  D gx, gw(w.shape), gb(b.shape);
                  dense_backward(x, w, r, &gx, gw, gb);
                  std::vector<Probe> ps{{"x", &x, gx}, {"w", &w, gw}, {"b", &b, gb}};
                  return run(loss, ps, base, fault);
                }});

  cs.push_back({"relu", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D x = away_from_zero({2, 2, 4, 4}, seed, 1), r = random(x.shape, seed, 2);
                  auto loss = [&] { return dot(relu(x), r); };
                  std::vector<Probe> ps{{"x", &x, relu_backward(x, r)}};
                  return run(loss, ps, base, fault);
                }});

  cs.push_back({"max_pool2d", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D x = random({2, 2, 6, 6}, seed, 1);
                  auto pr = max_pool2d(x, 2, 2);
                  D r = random(pr.out.shape, seed, 2);
                  auto loss = [&] { return dot(max_pool2d(x, 2, 2).out, r); };
                  std::vector<Probe> ps{{"x", &x, max_pool2d_backward(x.shape, pr.argmax, r)}};
                  return run(loss, ps, base, fault);
                }});

  cs.push_back({"global_avg_pool", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D x = random({2, 3, 4, 5}, seed, 1), r = random({2, 3}, seed, 2);
                  auto loss = [&] { return dot(global_avg_pool(x), r); };
                  std::vector<Probe> ps{{"x", &x, global_avg_pool_backward(x.shape, r)}};
                  return run(loss, ps, base, fault);
                }});

  cs.push_back({"softmax", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D z = random({3, 4}, seed, 1, -3, 3), r = random({3, 4}, seed, 2);
                  auto loss = [&] { return dot(softmax(z), r); };
                  std::vector<Probe> ps{{"z", &z, softmax_backward(softmax(z), r)}};
                  return run(loss, ps, base, fault);
                }});

  cs.push_back({"weighted_cross_entropy", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D p = softmax(random({4, 3}, seed, 1, -2, 2));
                  const std::vector<int> y{0, 2, 1, 2};
                  const std::vector<double> w{0.5, 2.0, 1.5};
                  auto loss = [&] { return weighted_cross_entropy<double>(p, y, w); };
                  std::vector<Probe> ps{{"p", &p, weighted_cross_entropy_backward<double>(p, y, w)}};
                  return run(loss, ps, base, fault);
                }});

  cs.push_back({"softmax_cross_entropy", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D z = random({5, 3}, seed, 1, -3, 3);
                  const std::vector<int> y{0, 1, 2, 2, 0};
                  const std::vector<double> w{1.2, 0.7, 1.1};
                  auto loss = [&] { return weighted_cross_entropy<double>(softmax(z), y, w); };
                  std::vector<Probe> ps{{"z", &z, softmax_cross_entropy_grad<double>(softmax(z), y, w)}};
                  return run(loss, ps, base, fault);
                }});

  cs.push_back({"sigmoid", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D x = random({2, 1, 3, 3}, seed, 1, -4, 4), r = random(x.shape, seed, 2);
                  auto loss = [&] { return dot(sigmoid(x), r); };
                  std::vector<Probe> ps{{"x", &x, sigmoid_backward(sigmoid(x), r)}};
                  return run(loss, ps, base, fault);
                }});

  auto binary_mask = [](std::size_t n, std::uint64_t seed) {
    D g({n});
    CounterRng rng(seed, 9);
    for (auto& v : g.data) v = rng.next_uniform() < 0.4 ? 1.0 : 0.0;
    return g;
  };

  cs.push_back({"dice_bce_loss", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D p = random({36}, seed, 1, 0.05, 0.95), g = binary_mask(36, seed);
                  auto loss = [&] { return dice_bce_loss<double>(p.data, g.data); };
                  D gp({36}, dice_bce_loss_grad<double>(p.data, g.data));
                  std::vector<Probe> ps{{"p", &p, gp}};
                  return run(loss, ps, base, fault);
                }});

  cs.push_back({"dice_bce_logits", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D z = random({36}, seed, 1, -3, 3), g = binary_mask(36, seed);
                  auto loss = [&] { return dice_bce_loss<double>(sigmoid(z).data, g.data); };
                  D gz({36}, dice_bce_logit_grad<double>(sigmoid(z).data, g.data));
                  std::vector<Probe> ps{{"z", &z, gz}};
                  return run(loss, ps, base, fault);
                }});

  cs.push_back({"upsample2x", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D x = random({1, 2, 3, 4}, seed, 1), r = random({1, 2, 6, 8}, seed, 2);
                  auto loss = [&] { return dot(upsample2x(x), r); };
                  std::vector<Probe> ps{{"x", &x, upsample2x_backward(r)}};
                  return run(loss, ps, base, fault);
                }});

  cs.push_back({"concat_channels", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D a = random({2, 2, 3, 3}, seed, 1), b = random({2, 3, 3, 3}, seed, 2);
                  D r = random({2, 5, 3, 3}, seed, 3);
                  auto loss = [&] { return dot(concat_channels(a, b), r); };
                  D ga, gb;
                  split_channels_backward(r, 2, ga, gb);
                  std::vector<Probe> ps{{"a", &a, ga}, {"b", &b, gb}};
                  return run(loss, ps, base, fault);
                }});

  cs.push_back({"head(dense+softmax+wCE)", 1e-4, [=](std::uint64_t seed, bool fault) {
                  D x = random({6, 8}, seed, 1, -2, 2), w = random({8, 3}, seed, 2), b = random({3}, seed, 3);
                  const std::vector<int> y{0, 1, 2, 1, 0, 2};
                  const std::vector<double> cw{0.8, 1.5, 1.0};
                  auto loss = [&] { return weighted_cross_entropy<double>(softmax(dense(x, w, b)), y, cw); };
                  D gz = softmax_cross_entropy_grad<double>(softmax(dense(x, w, b)), y, cw);
                  D gx, gw(w.shape), gb(b.shape);
                  dense_backward(x, w, gz, &gx, gw, gb);
                  std::vector<Probe> ps{{"x", &x, gx}, {"w", &w, gw}, {"b", &b, gb}};
                  return run(loss, ps, base, fault);
                }});

  cs.push_back({"dual_encoder", 1e-3, [=](std::uint64_t seed, bool fault) {
                  DualEncoder<double> net(DualEncoderConfig{}, seed);
                  D x = random({1, 3, 8, 8}, seed, 1, -0.5, 0.5);
                  D g = binary_mask(64, seed);
                  g.shape = {1, 1, 8, 8};
                  auto loss = [&] { return dice_bce_loss<double>(net.forward(x).data, g.data); };
                  typename DualEncoder<double>::Cache cache;
                  const D p = net.forward(x, cache);
                  net.zero_grad();
                  D gx = net.backward(cache, D(p.shape, dice_bce_logit_grad<double>(p.data, g.data)));
                  std::vector<Probe> ps{{"input", &x, gx}};
                  for (auto* prm : net.parameters()) ps.push_back({prm->name, &prm->value, prm->grad});
                  GradCheckOptions o = base;
                  o.max_coords = 24;
                  o.seed = seed;
                  return run(loss, ps, o, fault);
                }});
  return cs;
}

}  // namespace suite_detail

/// Names of all checks, in run order.
inline std::vector<std::string> gradcheck_suite_ops() {
  std::vector<std::string> names;
  for (const auto& c : suite_detail::cases()) names.push_back(c.op);
  return names;
}

inline SuiteReport run_gradcheck_suite(const SuiteOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport report;
  for (const auto& c : suite_detail::cases()) {
    SuiteEntry e{c.op, 0.0, c.tolerance};
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const auto r = c.check(derive_seed(opt.seed, hash_string(c.op), t), c.op == opt.inject_fault);
      e.max_rel_error = std::max(e.max_rel_error, r.max_rel_error);
      for (const auto& entry : r.entries) e.coords += entry.checked;
      ++e.trials;
    }
    e.passed = e.max_rel_error < e.tolerance;
    report.passed = report.passed && e.passed;
    report.entries.push_back(std::move(e));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace lesionforge::nn

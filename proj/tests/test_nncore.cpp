#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "lesionforge/nn/adam.hpp"
#include "lesionforge/nn/gradcheck.hpp"
#include "lesionforge/nn/gradcheck_suite.hpp"
#include "lesionforge/nn/ops.hpp"
#include "oracles.hpp"

using namespace lesionforge;
using namespace lesionforge::nn;
using Catch::Approx;

static double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST_CASE("conv2d hand examples") {
  Tensor<double> ones({1, 1, 3, 3}, 1.0);
  auto y = conv2d(ones, ones, Tensor<double>(), 1, Padding::valid);
  REQUIRE(y.shape == Shape{1, 1, 1, 1});
  REQUIRE(y[0] == 9.0);

  auto x = oracle::random_tensor<double>({1, 2, 5, 5}, 1, 0);
  Tensor<double> id({2, 2, 1, 1});
  id.at(0, 0, 0, 0) = id.at(1, 1, 0, 0) = 1;
  REQUIRE(conv2d(x, id, Tensor<double>(), 1, Padding::same).data == x.data);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  struct Case { std::size_t k, stride; Padding pad; };
  for (const Case c : {Case{3, 1, Padding::same}, Case{3, 2, Padding::valid}, Case{5, 2, Padding::same}, Case{1, 1, Padding::valid}}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto x = oracle::random_tensor<double>({2, 2, 8, 8}, seed, 1);
      auto w = oracle::random_tensor<double>({3, 2, c.k, c.k}, seed, 2);
      auto b = oracle::random_tensor<double>({3}, seed, 3);
      const int pad = c.pad == Padding::same ? int(c.k / 2) : 0;
      REQUIRE(max_abs_diff(conv2d(x, w, b, c.stride, c.pad), oracle::conv2d(x, w, b, int(c.stride), pad)) < 1e-6);
    }
  }
  REQUIRE_THROWS_AS(conv2d(Tensor<double>({1, 3, 4, 4}), Tensor<double>({2, 2, 3, 3}), Tensor<double>(), 1, Padding::same),
                    std::invalid_argument);
}

TEST_CASE("depthwise conv matches the grouped oracle and keeps channels") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto x = oracle::random_tensor<double>({1, 3, 4, 4}, seed, 1);
    auto w = oracle::random_tensor<double>({3, 1, 3, 3}, seed, 2);
    auto b = oracle::random_tensor<double>({3}, seed, 3);
    auto y = depthwise_conv2d(x, w, b, 1, Padding::same);
    REQUIRE(y.dim(1) == 3);
    REQUIRE(max_abs_diff(y, oracle::depthwise(x, w, b, 1, 1)) < 1e-6);
  }
  auto x = oracle::random_tensor<double>({1, 2, 4, 4}, 4, 1);
  Tensor<double> id({2, 1, 3, 3});
  id.at(0, 0, 1, 1) = id.at(1, 0, 1, 1) = 1;
  REQUIRE(depthwise_conv2d(x, id, Tensor<double>(), 1, Padding::same).data == x.data);
}

TEST_CASE("dense hand examples and oracle") {
  Tensor<double> x({1, 2}, std::vector<double>{1, 0});
  Tensor<double> eye({2, 2}, std::vector<double>{1, 0, 0, 1});
  REQUIRE(dense(x, eye, Tensor<double>({2})).data == std::vector<double>{1, 0});
  Tensor<double> b({2}, std::vector<double>{0.3, -2});
  REQUIRE(dense(Tensor<double>({1, 2}), eye, b).data == b.data);
  auto xr = oracle::random_tensor<double>({4, 7}, 1, 1), wr = oracle::random_tensor<double>({7, 3}, 1, 2),
       br = oracle::random_tensor<double>({3}, 1, 3);
  REQUIRE(max_abs_diff(dense(xr, wr, br), oracle::dense(xr, wr, br)) < 1e-9);
  REQUIRE_THROWS_AS(dense(xr, Tensor<double>({6, 3}), br), std::invalid_argument);
}

TEST_CASE("relu, pooling and global average pooling") {
  Tensor<double> x({3}, std::vector<double>{-1, 0, 2});
  REQUIRE(relu(x).data == std::vector<double>{0, 0, 2});
  Tensor<double> p({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  auto pr = max_pool2d(p, 2, 2);
  REQUIRE(pr.out[0] == 4);
  auto g = max_pool2d_backward(p.shape, pr.argmax, Tensor<double>({1, 1, 1, 1}, 1.0));
  REQUIRE(g.data == std::vector<double>{0, 0, 0, 1});
  REQUIRE_THROWS_AS(max_pool2d(p, 3, 1), std::invalid_argument);
  REQUIRE(global_avg_pool(p)[0] == 2.5);
  Tensor<double> one({1, 2, 1, 1}, std::vector<double>{0.7, -3});
  REQUIRE(global_avg_pool(one).data == one.data);
  auto gg = global_avg_pool_backward(p.shape, Tensor<double>({1, 1}, 1.0));
  for (double v : gg.data) REQUIRE(v == 0.25);
}

TEST_CASE("softmax is stable, normalised and shift invariant") {
  auto u = softmax(Tensor<double>({1, 3}));
  for (double v : u.data) REQUIRE(v == Approx(1.0 / 3));
  auto big = softmax(Tensor<double>({1, 2}, std::vector<double>{1000, 0}));
  REQUIRE(big.all_finite());
  REQUIRE(big[0] == Approx(1.0));
  auto z = oracle::random_tensor<double>({6, 4}, 3, 0, -5, 5);
  auto zs = z;
  for (auto& v : zs.data) v += 17.5;
  auto p = softmax(z), ps = softmax(zs);
  for (std::size_t n = 0; n < 6; ++n) {
    double s = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      s += p[n * 4 + k];
      REQUIRE(p[n * 4 + k] > 0);
      REQUIRE(p[n * 4 + k] == Approx(ps[n * 4 + k]).epsilon(1e-12));
    }
    REQUIRE(std::abs(s - 1) < 1e-9);
  }
}

TEST_CASE("weighted cross entropy values") {
  Tensor<double> certain({1, 2}, std::vector<double>{0, 1});
  std::vector<int> y1{1};
  REQUIRE(weighted_cross_entropy<double>(certain, y1) == 0.0);
  Tensor<double> half({1, 2}, std::vector<double>{0.5, 0.5});
  std::vector<double> w{1, 2};
  REQUIRE(weighted_cross_entropy<double>(half, y1, w) == Approx(2 * std::numbers::ln2).epsilon(1e-12));
  REQUIRE(weighted_cross_entropy<double>(half, y1, w) == Approx(1.38629).margin(1e-5));

  auto p = softmax(oracle::random_tensor<double>({8, 3}, 5, 0, -3, 3));
  std::vector<int> y{0, 1, 2, 0, 1, 2, 2, 2};
  std::vector<double> ones(3, 1.0);
  REQUIRE(std::abs(weighted_cross_entropy<double>(p, y, ones) - weighted_cross_entropy<double>(p, y)) < 1e-12);
  REQUIRE(weighted_cross_entropy<double>(p, y) >= 0);
  std::vector<int> bad{0, 1, 2, 0, 1, 2, 2, 3};
  REQUIRE_THROWS(weighted_cross_entropy<double>(p, bad));
  // A confident mistake is clamped rather than infinite.
  Tensor<double> wrong({1, 2}, std::vector<double>{1, 0});
  REQUIRE(weighted_cross_entropy<double>(wrong, y1) == Approx(-std::log(1e-12)));
}

TEST_CASE("dice+bce loss values") {
  std::vector<double> gt(16, 0.0);
  for (std::size_t i = 0; i < 8; ++i) gt[i] = 1.0;
  DiceBceOptions dice_only{1.0, 0.0};
  REQUIRE(dice_bce_loss<double>(gt, gt, dice_only) == Approx(0.0).margin(1e-12));
  std::vector<double> inv(16);
  for (std::size_t i = 0; i < 16; ++i) inv[i] = 1 - gt[i];
  // With p = 1 - g on a half-ones mask the intersection is zero: 1 - s/(N + s).
  REQUIRE(dice_bce_loss<double>(inv, gt, dice_only) == Approx(1 - 1.0 / 17.0).epsilon(1e-12));
  REQUIRE_THROWS(dice_bce_loss<double>(std::vector<double>(3), gt));
}

TEST_CASE("adam step arithmetic") {
  Parameter<double> p("p", {1});
  p.grad[0] = 1;
  AdamState<double> s;
  adam_step(p, s);
  REQUIRE(p.value[0] == Approx(-0.000999999).margin(1e-9));
  REQUIRE(s.t == 1);

  Parameter<double> q("q", {3});
  q.value.data = {0.5, -1, 2};
  const auto before = q.value.data;
  AdamState<double> sq;
  for (int i = 0; i < 20; ++i) adam_step(q, sq);
  REQUIRE(q.value.data == before);

  Parameter<float> f("f", {4});
  f.value.fill(0.25f);
  f.frozen = true;
  f.grad.fill(3.0f);
  Adam<float> opt;
  for (int i = 0; i < 10; ++i) opt.step({&f});
  for (float v : f.value.data) REQUIRE(v == 0.25f);
  AdamState<float> sf;
  REQUIRE_THROWS_AS(adam_step(f, sf), std::logic_error);

  Parameter<double> n("n", {2});
  n.grad[1] = std::nan("");
  AdamState<double> sn;
  REQUIRE_THROWS_WITH(adam_step(n, sn), Catch::Matchers::ContainsSubstring("non-finite gradient in parameter 'n'"));
}

TEST_CASE("grad_check on a dense layer is tight and flags a corrupted gradient") {
  auto x = oracle::random_tensor<double>({3, 5}, 1, 1), w = oracle::random_tensor<double>({5, 4}, 1, 2),
       b = oracle::random_tensor<double>({4}, 1, 3), r = oracle::random_tensor<double>({3, 4}, 1, 4);
  auto loss = [&] {
    auto y = dense(x, w, b);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += r[i] * y[i];
    return s;
  };
  Tensor<double> gx, gw(w.shape), gb(b.shape);
  dense_backward(x, w, r, &gx, gw, gb);
  auto rep = grad_check(loss, {{"x", x.data, gx.data}, {"w", w.data, gw.data}, {"b", b.data, gb.data}});
  REQUIRE(rep.passed);
  REQUIRE(rep.max_rel_error < 1e-6);
  gw[3] *= 1.01;
  REQUIRE_FALSE(grad_check(loss, {{"w", w.data, gw.data}}).passed);
}

TEST_CASE("conv+relu+gap+softmax+ce stack passes grad_check") {
  auto x = oracle::random_tensor<double>({2, 2, 6, 6}, 9, 1), w = oracle::random_tensor<double>({3, 2, 3, 3}, 9, 2),
       b = oracle::random_tensor<double>({3}, 9, 3);
  std::vector<int> y{0, 2};
  auto loss = [&] {
    auto p = softmax(global_avg_pool(relu(conv2d(x, w, b, 1, Padding::same))));
    return weighted_cross_entropy<double>(p, y);
  };
  auto pre = conv2d(x, w, b, 1, Padding::same);
  auto a = relu(pre);
  auto g = global_avg_pool(a);
  auto p = softmax(g);
  auto gz = softmax_cross_entropy_grad<double>(p, y);
  auto ga = global_avg_pool_backward(a.shape, gz);
  auto gpre = relu_backward(pre, ga);
  Tensor<double> gx, gw(w.shape), gb(b.shape);
  conv2d_backward(x, w, 1, Padding::same, gpre, &gx, gw, &gb);
  auto rep = grad_check(loss, {{"x", x.data, gx.data}, {"w", w.data, gw.data}, {"b", b.data, gb.data}});
  REQUIRE(rep.passed);
  REQUIRE(rep.max_rel_error < 1e-4);
}

TEST_CASE("the full finite-difference suite passes and detects injected faults") {
  const auto clean = run_gradcheck_suite();
  for (const auto& e : clean.entries) {
    INFO(e.op << " " << e.max_rel_error);
    CHECK(e.passed);
    CHECK(e.trials == 5);
  }
  REQUIRE(clean.passed);
  REQUIRE(clean.entries.size() == gradcheck_suite_ops().size());
  for (const std::string op : {"dense", "conv2d(same,s1)", "sigmoid"}) {
    SuiteOptions o;
    o.inject_fault = op;
    const auto bad = run_gradcheck_suite(o);
    REQUIRE_FALSE(bad.passed);
    for (const auto& e : bad.entries) REQUIRE(e.passed == (e.op != op));
  }
}

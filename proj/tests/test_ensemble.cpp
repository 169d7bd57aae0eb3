#include <catch_amalgamated.hpp>

#include "lesionforge/ensemble.hpp"
#include "fixtures.hpp"

using namespace lesionforge;
using Catch::Approx;

namespace {

struct Toy {
  std::vector<std::vector<float>> X;
  std::vector<int> y;
};

// Two uniform clouds; the first `informative` features are shifted by +-3.
Toy separable(std::size_t n, std::size_t width, std::uint64_t seed, std::size_t informative = 3) {
  CounterRng r(seed);
  Toy t;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = int(i % 2);
    std::vector<float> x(width);
    for (std::size_t f = 0; f < width; ++f) x[f] = float(r.next_uniform(-1, 1) + (f < informative ? (label ? 3.0 : -3.0) : 0.0));
    t.X.push_back(std::move(x));
    t.y.push_back(label);
  }
  return t;
}

std::vector<float> params_of(Head& h) {
  std::vector<float> v;
  for (auto* p : h.parameters()) v.insert(v.end(), p->value.data.begin(), p->value.data.end());
  return v;
}

}  // namespace

TEST_CASE("pool_and_concat") {
  std::vector<Tensor<float>> maps;
  for (int j = 0; j < 3; ++j) {
    Tensor<float> m({1, 64, 1, 1});
    for (std::size_t c = 0; c < 64; ++c) m[c] = float(j * 100 + int(c));
    maps.push_back(m);
  }
  const auto z = pool_and_concat(maps);
  REQUIRE(z.size() == 192);
  for (std::size_t i = 0; i < 192; ++i) REQUIRE(z[i] == float((i / 64) * 100 + i % 64));
  REQUIRE(pool_and_concat(maps) == z);
  maps[1] = Tensor<float>();
  REQUIRE_THROWS(pool_and_concat(maps));
  REQUIRE_THROWS(pool_and_concat(std::span<const Tensor<float>>(maps.data(), 2)));
}

TEST_CASE("head training on separable features") {
  // 64-wide like a backbone table; 10 epochs at batch 32 are 320 Adam steps.
  const Toy t = separable(1024, 64, 1, 64);
  Head h("head.toy", 64, 2, 3);
  const auto hist = train_head(h, t.X, t.y, {}, TrainConfig{10, 32, 0.001, 1});
  REQUIRE(hist.train_accuracy.back() == 1.0);
  REQUIRE(hist.train_loss.back() < hist.initial_train_loss);
  for (const auto& x : t.X) {
    const auto p = h.predict_one(x);
    REQUIRE(std::accumulate(p.begin(), p.end(), 0.0) == Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("zero epochs keep the initial head") {
  const Toy t = separable(20, 4, 2);
  Head a("head.toy", 4, 2, 3), b("head.toy", 4, 2, 3);
  const auto hist = train_head(a, t.X, t.y, {}, TrainConfig{0, 32, 0.001, 1});
  REQUIRE(hist.train_loss.empty());
  REQUIRE(params_of(a) == params_of(b));
}

TEST_CASE("uniform class weights match omitted weights") {
  const Toy t = separable(50, 6, 4);
  Head a("head.toy", 6, 2, 3), b("head.toy", 6, 2, 3);
  const auto ha = train_head(a, t.X, t.y, {1.0, 1.0}, TrainConfig{5, 8, 0.001, 9});
  const auto hb = train_head(b, t.X, t.y, {}, TrainConfig{5, 8, 0.001, 9});
  REQUIRE(ha.train_loss == hb.train_loss);
  REQUIRE(params_of(a) == params_of(b));
}

TEST_CASE("validation loss is recorded and degenerate splits are rejected") {
  const Toy t = separable(40, 4, 5), v = separable(10, 4, 6);
  Head h("head.toy", 4, 2, 1);
  const auto hist = train_head(h, t.X, t.y, {}, TrainConfig{3, 8, 0.001, 1}, v.X, v.y);
  REQUIRE(hist.val_loss.size() == 3);
  Head d("head.toy", 4, 2, 1);
  REQUIRE_THROWS_AS(train_head(d, t.X, std::vector<int>(t.y.size(), 1), {}, TrainConfig{}), ValidationError);
  REQUIRE_THROWS_AS(TrainConfig({0, 0, 0.001, 1}).validate(), ValidationError);
}

TEST_CASE("soft vote examples") {
  const std::vector<std::vector<double>> per{{0.6, 0.4}, {0.2, 0.8}, {0.7, 0.3}};
  const auto p = soft_vote(per, uniform_weights(3));
  REQUIRE(p.probs[0] == Approx(0.5));
  REQUIRE(p.probs[1] == Approx(0.5));
  REQUIRE(p.label == 0);
  const std::vector<double> one{0.1, 0.7, 0.2};
  const auto same = soft_vote({one, one, one}, uniform_weights(3));
  for (std::size_t k = 0; k < 3; ++k) REQUIRE(same.probs[k] == Approx(one[k]).epsilon(1e-15));
  const auto first = soft_vote(per, {1, 0, 0});
  REQUIRE(first.probs == per[0]);
  REQUIRE_THROWS(soft_vote(per, {0.5, 0.5}));
  REQUIRE_THROWS(soft_vote({{0.5, 0.5}, {1.0}}, {0.5, 0.5}));
  REQUIRE_THROWS(soft_vote({{0.5, 0.6}}, {1.0}));
  REQUIRE(argmax_lowest(std::vector<double>{0.2, 0.4, 0.4}) == 1);
}

TEST_CASE("soft vote ordering survives a common rescaling of the members") {
  CounterRng r(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<double>> per(3, std::vector<double>(4)), scaled = per;
    for (auto& v : per) {
      double s = 0;
      for (auto& x : v) s += x = r.next_uniform() + 1e-3;
      for (auto& x : v) x /= s;
    }
    const double c = r.next_uniform(0.1, 10);
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += scaled[j][k] = c * per[j][k];
      for (auto& x : scaled[j]) x /= s;
    }
    const auto a = soft_vote(per, uniform_weights(3)), b = soft_vote(scaled, uniform_weights(3));
    REQUIRE(a.label == b.label);
    double s = 0;
    for (double v : a.probs) {
      REQUIRE(v >= 0);
      s += v;
    }
    REQUIRE(std::abs(s - 1) < kProbTolerance);
  }
}

TEST_CASE("model weights validation") {
  REQUIRE_NOTHROW(validate_model_weights({0.2, 0.3, 0.5}, 3));
  REQUIRE_THROWS_AS(validate_model_weights({0.2, 0.3}, 3), ValidationError);
  REQUIRE_THROWS_AS(validate_model_weights({0.2, 0.3, 0.6}, 3), ValidationError);
  REQUIRE_THROWS_AS(validate_model_weights({-0.2, 0.6, 0.6}, 3), ValidationError);
  REQUIRE(parse_ensemble_mode("FUSION") == EnsembleMode::fusion);
  REQUIRE_THROWS_AS(parse_ensemble_mode("stacking"), ValidationError);
}

TEST_CASE("ensemble models predict valid distributions and persist exactly") {
  const auto dir = fixtures::temp_dir("ensemble");
  for (const auto mode : {EnsembleMode::soft_vote, EnsembleMode::fusion}) {
    std::array<Toy, 3> parts{separable(60, 5, 1), separable(60, 7, 2), separable(60, 5, 3)};
    EnsembleModel m;
    m.mode = mode;
    m.set_weights({0.2, 0.3, 0.5});
    for (std::size_t j = 0; j < 3; ++j) {
      Head h("head." + slug(kAllBackbones[j]), parts[j].X[0].size(), 2, j);
      train_head(h, parts[j].X, parts[j].y, {}, TrainConfig{3, 16, 0.01, 1});
      m.heads.push_back(std::move(h));
    }
    if (mode == EnsembleMode::fusion) {
      std::vector<std::vector<float>> fused;
      for (std::size_t i = 0; i < 60; ++i) fused.push_back(concat_pooled({&parts[0].X[i], &parts[1].X[i], &parts[2].X[i]}));
      Head h("head.fusion", fused[0].size(), 2, 9);
      train_head(h, fused, parts[0].y, {}, TrainConfig{3, 16, 0.01, 1});
      m.fusion = std::move(h);
    }
    save_ensemble(dir / "m.lfw", m);
    const EnsembleModel back = load_ensemble(dir / "m.lfw");
    REQUIRE(back.mode == mode);
    for (std::size_t i = 0; i < 60; ++i) {
      const std::array<const std::vector<float>*, 3> in{&parts[0].X[i], &parts[1].X[i], &parts[2].X[i]};
      const auto p = m.predict(in), q = back.predict(in);
      REQUIRE(p.probs == q.probs);
      REQUIRE(p.label == q.label);
      REQUIRE(m.predict(in).probs == p.probs);
      double s = 0;
      for (double v : p.probs) {
      REQUIRE(v >= 0);
      s += v;
    }
      REQUIRE(std::abs(s - 1) < kProbTolerance);
    }
  }
  EnsembleModel untrained;
  untrained.heads.emplace_back("head.s_mobile", 2, 2, 1);
  std::vector<float> x{0, 0};
  REQUIRE_THROWS(untrained.predict({&x, &x, &x}));
}

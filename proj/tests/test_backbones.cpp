#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "lesionforge/backbones.hpp"
#include "lesionforge/ensemble.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace lesionforge;

namespace {

Tensor<double> to_double(const Tensor<float>& t) { return t.cast<double>(); }

Tensor<double> oracle_relu(Tensor<double> t) {
  for (auto& v : t.data) v = std::max(v, 0.0);
  return t;
}

Tensor<double> oracle_pool(const Tensor<double>& x) {
  Tensor<double> y({x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2});
  for (std::size_t n = 0; n < y.dim(0); ++n)
    for (std::size_t c = 0; c < y.dim(1); ++c)
      for (std::size_t i = 0; i < y.dim(2); ++i)
        for (std::size_t j = 0; j < y.dim(3); ++j)
          y.at(n, c, i, j) = std::max({x.at(n, c, 2 * i, 2 * j), x.at(n, c, 2 * i + 1, 2 * j), x.at(n, c, 2 * i, 2 * j + 1),
                                       x.at(n, c, 2 * i + 1, 2 * j + 1)});
  return y;
}

Tensor<double> oracle_conv(const Backbone& b, const ConvLayer& c, const Tensor<double>& x) {
  const auto w = to_double(b.parameters()[c.weight].value), bias = to_double(b.parameters()[c.bias].value);
  const int pad = int(w.dim(2) / 2);
  auto y = c.depthwise ? oracle::depthwise(x, w, bias, int(c.stride), pad) : oracle::conv2d(x, w, bias, int(c.stride), pad);
  if (c.relu) y = oracle_relu(y);
  // Activations are stored as 32-bit floats between layers, as in the library.
  for (auto& v : y.data) v = static_cast<float>(v);
  return y;
}

// Replays the layer list with the brute-force oracles, accumulating in double.
Tensor<double> replay(const Backbone& b, Tensor<double> h) {
  for (const auto& layer : b.layers()) {
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      h = oracle_conv(b, *c, h);
    } else if (std::get_if<PoolLayer>(&layer)) {
      h = oracle_pool(h);
    } else {
      const auto& br = std::get<BranchConcat>(layer);
      auto l = h, r = h;
      for (const auto& c : br.left) l = oracle_conv(b, c, l);
      for (const auto& c : br.right) r = oracle_conv(b, c, r);
      Tensor<double> cat({l.dim(0), l.dim(1) + r.dim(1), l.dim(2), l.dim(3)});
      for (std::size_t c = 0; c < l.dim(1); ++c)
        for (std::size_t i = 0; i < l.dim(2) * l.dim(3); ++i) {
          cat.data[c * l.dim(2) * l.dim(3) + i] = l.data[c * l.dim(2) * l.dim(3) + i];
          cat.data[(c + l.dim(1)) * l.dim(2) * l.dim(3) + i] = r.data[c * l.dim(2) * l.dim(3) + i];
        }
      h = cat;
    }
  }
  return h;
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST_CASE("backbone shapes, sizes and frozen flags") {
  const Image img = oracle::random_image(128, 128, 3, 1);
  for (auto k : kAllBackbones) {
    const Backbone b = build_backbone(k, 7);
    const auto f = extract_features(b, img);
    REQUIRE(f.shape == Shape{1, 64, 8, 8});
    REQUIRE(f.all_finite());
    REQUIRE(b.spatial_conv_count() <= 6);
    for (const auto& p : b.parameters()) REQUIRE(p.frozen);
    REQUIRE(pooled_features(b, Image(32, 32, 3, 0.0)).size() == kFeatureChannels);
    for (float v : pooled_features(b, Image(32, 32, 3, 0.0))) REQUIRE(std::isfinite(v));
    REQUIRE_THROWS_AS(extract_features(b, Image(15, 32, 3)), std::invalid_argument);
  }
  REQUIRE(build_backbone(BackboneKind::s_mobile, 1).parameter_count() < build_backbone(BackboneKind::s_vgg, 1).parameter_count());
  REQUIRE(build_backbone(BackboneKind::s_mobile, 1).parameter_count() == 23960);
  REQUIRE(build_backbone(BackboneKind::s_vgg, 1).parameter_count() == 99760);
  REQUIRE(build_backbone(BackboneKind::s_incept, 1).parameter_count() == 53216);
  REQUIRE(build_backbone(BackboneKind::s_mobile, 1, 4).in_channels() == 4);
}

TEST_CASE("backbone weights are deterministic per kind and seed") {
  for (auto k : kAllBackbones) {
    REQUIRE(build_backbone(k, 3).digest() == build_backbone(k, 3).digest());
    REQUIRE(build_backbone(k, 3).digest() != build_backbone(k, 4).digest());
  }
  // Pinned so that an accidental change to initialisation is noticed.
  CHECK(build_backbone(BackboneKind::s_mobile, 0).digest() == 0x3700640625bb49d4ULL);
  CHECK(build_backbone(BackboneKind::s_vgg, 0).digest() == 0xa6a8228e36dcd6d1ULL);
  CHECK(build_backbone(BackboneKind::s_incept, 0).digest() == 0x28a59a6c8c591a24ULL);
}

TEST_CASE("backbone forward matches an oracle replay") {
  for (auto k : kAllBackbones) {
    const Backbone b = build_backbone(k, 11);
    const Image img = oracle::random_image(32, 32, 3, 5);
    const auto x = image_to_tensor(img);
    const auto y = b.forward(x);
    const auto ref = replay(b, to_double(x));
    REQUIRE(ref.shape == y.shape);
    double m = 0, mag = 0;
    for (std::size_t i = 0; i < y.size(); ++i) m = std::max(m, std::abs(double(y[i]) - ref[i])), mag = std::max(mag, std::abs(ref[i]));
    INFO(to_string(k) << " max |diff| " << m << " max |y| " << mag);
    REQUIRE(m < 1e-6);
  }
}

TEST_CASE("different kinds extract genuinely different features") {
  std::vector<Image> batch;
  for (std::uint64_t s = 0; s < 8; ++s) batch.push_back(fixtures::blob_texture(int(s % 3), 32, s));
  std::array<std::vector<float>, 3> feats;
  for (std::size_t j = 0; j < 3; ++j) {
    const Backbone b = build_backbone(kAllBackbones[j], 2);
    for (const auto& img : batch) {
      const auto f = pooled_features(b, img);
      feats[j].insert(feats[j].end(), f.begin(), f.end());
    }
  }
  REQUIRE(cosine(feats[0], feats[1]) < 0.999);
  REQUIRE(cosine(feats[0], feats[2]) < 0.999);
  REQUIRE(cosine(feats[1], feats[2]) < 0.999);
}

TEST_CASE("training a head leaves backbone parameters bit-identical") {
  const Backbone b = build_backbone(BackboneKind::s_incept, 5);
  const auto before = b.digest();
  std::vector<std::vector<float>> X;
  std::vector<int> y;
  for (std::uint64_t s = 0; s < 12; ++s) {
    X.push_back(pooled_features(b, fixtures::blob_texture(int(s % 2), 32, s)));
    y.push_back(int(s % 2));
  }
  Head h("head.s_incept", 64, 2, 1);
  train_head(h, X, y, {1, 1}, TrainConfig{5, 4, 0.001, 1});
  REQUIRE(b.digest() == before);
}

TEST_CASE("feature tables round-trip and validate") {
  const Backbone b = build_backbone(BackboneKind::s_mobile, 1);
  std::vector<Image> imgs;
  for (std::uint64_t s = 0; s < 4; ++s) imgs.push_back(oracle::random_image(16, 16, 3, s));
  const std::vector<std::string> ids{"a", "b", "c", "d"};
  const auto dir = fixtures::temp_dir("features");
  const auto t = export_features(b, ids, [&](std::size_t i) { return imgs[i]; }, dir / "f.csv", {"seed=1"});
  const auto back = import_features(dir / "f.csv", ids, 64);
  REQUIRE(back.ids == t.ids);
  REQUIRE(back.rows == t.rows);

  std::ostringstream narrow;
  narrow << "id,64\nx";
  for (int i = 0; i < 63; ++i) narrow << ",0.5";
  std::istringstream n(narrow.str());
  REQUIRE_THROWS_WITH(read_feature_table(n), Catch::Matchers::ContainsSubstring("dimension mismatch"));
  REQUIRE_THROWS_WITH(import_features(dir / "f.csv", {"a", "zz"}), Catch::Matchers::ContainsSubstring("zz"));
  std::istringstream w10("id,10\ns1,0,1,2,3,4,5,6,7,8,9\n");
  REQUIRE(read_feature_table(w10).width == 10);
  std::istringstream wrong("id,10\n");
  REQUIRE_THROWS(read_feature_table(wrong, 64));
}

TEST_CASE("externally supplied widths size the fused head") {
  std::vector<float> a(10, 1.0f), b(10, 2.0f), c(10, 3.0f);
  const auto z = concat_pooled({&a, &b, &c});
  REQUIRE(z.size() == 30);
  Head h("head.fusion", z.size(), 3, 1);
  REQUIRE(h.in_width() == 30);
}

#include <catch_amalgamated.hpp>

#include <sstream>

#include "fixtures.hpp"
#include "lesionforge/config.hpp"

using namespace lesionforge;
using Catch::Matchers::ContainsSubstring;

namespace {

ExperimentConfig parse(const std::string& text, const std::filesystem::path& base = "/base") {
  std::istringstream is(text);
  return parse_config(is, base);
}

}  // namespace

TEST_CASE("defaults match the documented values") {
  const auto c = parse("");
  CHECK(c.image_size == 128);
  CHECK(c.split.train == 0.6);
  CHECK(c.split.val == 0.2);
  CHECK(c.split.test == 0.2);
  CHECK(c.rebalance_weights);
  CHECK(c.rebalance_augment);
  CHECK(std::isinf(c.cap_ratio));
  CHECK_FALSE(c.seg_enabled);
  CHECK(c.ensemble_mode == EnsembleMode::soft_vote);
  CHECK(c.ensemble_weights == uniform_weights(3));
  CHECK_FALSE(c.sobel_channel);
}

TEST_CASE("keys, comments and whitespace") {
  const auto c = parse(
      "# experiment\n"
      "manifest = data/m.csv   # trailing comment\n"
      "  seed=42\n"
      "\n"
      "image.size = 64\n"
      "ensemble.mode = fusion\n"
      "ensemble.weights = 1, 2 ,3\n"
      "segmentation.mode = crop\n"
      "rebalance.cap_ratio = 2.5\n"
      "train.epochs = 3\n");
  CHECK(c.manifest == std::filesystem::path("/base/data/m.csv"));
  CHECK(c.seed == 42);
  CHECK(c.image_size == 64);
  CHECK(c.ensemble_mode == EnsembleMode::fusion);
  CHECK(c.ensemble_weights == std::vector<double>{1, 2, 3});
  CHECK(c.mask_mode == MaskMode::crop);
  CHECK(c.cap_ratio == 2.5);
  CHECK(c.train.epochs == 3);
}

TEST_CASE("relative paths resolve against the config directory, absolute ones do not") {
  const auto c = parse("manifest = ../m.csv\nout = /abs/out\n", "/cfg/dir");
  CHECK(c.manifest == std::filesystem::path("/cfg/m.csv"));
  CHECK(c.out == std::filesystem::path("/abs/out"));
}

TEST_CASE("parse errors name the line and the key") {
  CHECK_THROWS_WITH(parse("seed = 1\nbogus = 3\n"), ContainsSubstring("line 2") && ContainsSubstring("unknown key 'bogus'"));
  CHECK_THROWS_WITH(parse("seed = 1\nseed = 2\n"), ContainsSubstring("already set on line 1"));
  CHECK_THROWS_WITH(parse("just words\n"), ContainsSubstring("expected key=value"));
  CHECK_THROWS_WITH(parse("seed = -3\n"), ContainsSubstring("'seed'"));
  CHECK_THROWS_WITH(parse("image.size = 12.5\n"), ContainsSubstring("'image.size'"));
  CHECK_THROWS_WITH(parse("train.lr = fast\n"), ContainsSubstring("'train.lr'"));
  CHECK_THROWS_WITH(parse("rebalance.weights = maybe\n"), ContainsSubstring("expected a boolean"));
  CHECK_THROWS_WITH(parse("labels.source = file\n"), ContainsSubstring("header or data"));
  CHECK_THROWS_WITH(parse("filters = gaussian(sigma=0)\n"), ContainsSubstring("'filters'"));
  CHECK_THROWS_AS(parse("ensemble.mode = majority\n"), ValidationError);
}

TEST_CASE("validate reports the offending field") {
  const auto dir = fixtures::temp_dir("config_validate");
  fixtures::write_manifest(dir / "m.csv", {"a", "b"}, {{"x.png", "a", "", ""}});
  auto ok = [&](const std::string& extra) { return parse("manifest = m.csv\n" + extra, dir); };

  CHECK_NOTHROW(ok("").validate());
  CHECK_THROWS_WITH(parse("").validate(), ContainsSubstring("'manifest' is required"));
  CHECK_THROWS_WITH(parse("manifest = nope.csv\n", dir).validate(), ContainsSubstring("file not found"));
  CHECK_THROWS_WITH(ok("split.train = 0.7\n").validate(), ContainsSubstring("split"));
  CHECK_THROWS_WITH(ok("rebalance.cap_ratio = 0.5\n").validate(), ContainsSubstring("cap_ratio"));
  CHECK_THROWS_WITH(ok("image.size = 8\n").validate(), ContainsSubstring("image.size"));
  CHECK_THROWS_WITH(ok("segmentation.size = 30\n").validate(), ContainsSubstring("segmentation.size"));
  CHECK_THROWS_WITH(ok("train.batch_size = 0\n").validate(), ContainsSubstring("train.batch_size"));
  CHECK_THROWS_WITH(ok("timing.runs = 5\n").validate(), ContainsSubstring("timing.runs"));
  CHECK_THROWS_AS(ok("ensemble.weights = 1,0,1\n").validate(), ValidationError);
  CHECK_THROWS_AS(ok("ensemble.weights = 1,1\n").validate(), ValidationError);
  CHECK_THROWS_WITH(ok("features.s_mobile = m.csv\n").validate(), ContainsSubstring("all three"));
}

TEST_CASE("digest tracks content, not formatting") {
  const auto a = parse("seed = 3\nimage.size = 64\n");
  const auto b = parse("# same thing\nimage.size=64\n\nseed=3\n");
  const auto c = parse("seed = 4\nimage.size = 64\n");
  CHECK(a.digest() == b.digest());
  CHECK(a.digest() != c.digest());
  CHECK(a.digest().size() == 64);
}

TEST_CASE("a config named relative to the working directory still yields absolute paths") {
  const auto dir = fixtures::temp_dir("config_relative");
  fixtures::write_config(dir / "exp.cfg", {"manifest = m.csv", "out = out"});
  const auto cwd = std::filesystem::current_path();
  std::filesystem::current_path(dir);
  const auto c = load_config("exp.cfg");
  std::filesystem::current_path(cwd);
  CHECK(c.manifest.is_absolute());
  CHECK(c.manifest == dir / "m.csv");
  CHECK(c.out == dir / "out");
}

TEST_CASE("load_config reports a missing file") {
  CHECK_THROWS_WITH(load_config("/nonexistent/dir/x.cfg"), ContainsSubstring("config file not found"));
}

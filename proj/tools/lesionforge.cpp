// lesionforge <prepare|seg|train|evaluate|gradcheck> --config <path> [--seed N] [--out DIR]
//
// Exit status: 0 success, 1 validation error, 2 runtime error (including a
// failed gradient check).

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "lesionforge/pipeline.hpp"

namespace lf = lesionforge;

int main(int argc, char** argv) {
  CLI::App app{"lesionforge: skin-lesion classification pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", config_path, "experiment config file");
    if (config_required) opt->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out_dir, "override the output directory");
  };
  auto* prepare = app.add_subcommand("prepare", "split the manifest, rebalance, write class weights");
  auto* seg = app.add_subcommand("seg", "train the segmenter or apply masks");
  std::string seg_action;
  seg->add_option("action", seg_action, "train or apply")->required()->check(CLI::IsMember({"train", "apply"}));
  auto* train = app.add_subcommand("train", "extract features and train the classification heads");
  auto* evaluate = app.add_subcommand("evaluate", "metrics, ROC curves and timing on the test split");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::string inject;
  gradcheck->add_option("--inject-fault", inject, "corrupt one op's analytic gradient (negative control)")
      ->group("");
  for (auto* s : {prepare, seg, train, evaluate}) add_common(s, true);
  add_common(gradcheck, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gradcheck->parsed()) {
      lf::nn::SuiteOptions opt;
      if (seed) opt.seed = *seed;
      opt.inject_fault = inject;
      if (!inject.empty()) {
        const auto ops = lf::nn::gradcheck_suite_ops();
        if (std::find(ops.begin(), ops.end(), inject) == ops.end())
          throw lf::ValidationError("--inject-fault: unknown op '" + inject + "'");
      }
      return lf::cmd_gradcheck(std::cout, opt);
    }
    lf::ExperimentConfig cfg = lf::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out = out_dir;
    lf::Pipeline p(cfg, std::cout);
    if (prepare->parsed()) p.prepare();
    else if (seg->parsed() && seg_action == "train") p.seg_train();
    else if (seg->parsed()) p.seg_apply();
    else if (train->parsed()) p.train();
    else if (evaluate->parsed()) p.evaluate();
    return 0;
  } catch (const lf::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    return 2;
  }
}

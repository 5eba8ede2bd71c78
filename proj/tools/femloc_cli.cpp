// femloc: preprocess | meta-train | meta-test | theory-probe | report
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime error.

#include <chrono>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "femloc/experiment.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kRuntime = 4 };

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::string> checkpoint;
  bool quiet = false;
};

femloc::ExperimentConfig load(const Options& o) {
  auto overrides = o.overrides;
  if (!o.out.empty()) overrides.push_back("output_dir=\"" + o.out + "\"");
  return femloc::load_experiment(o.config, overrides);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated meta-learning for RSSI fingerprint localization"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", opt.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("-s,--set", opt.overrides, "override a config key: key.path=value")->take_all();
    sub->add_option("-o,--out", opt.out, "output root (default $FEMLOC_OUT, then ./out)");
    sub->add_flag("-q,--quiet", opt.quiet, "no progress output");
  };
  auto* pre = app.add_subcommand("preprocess", "build per-task support/query bundles");
  auto* train = app.add_subcommand("meta-train", "federated meta-training; writes checkpoint and round log");
  auto* test = app.add_subcommand("meta-test", "RI vs MI fine-tuning on the test tasks");
  auto* theory = app.add_subcommand("theory-probe", "epsilon-accuracy, linearization and constant probes");
  auto* report = app.add_subcommand("report", "aggregate meta-test traces into a table");
  auto* show = app.add_subcommand("show-config", "print the resolved config");
  for (auto* s : {pre, train, test, theory, report, show}) add_common(s);
  for (auto* s : {test, theory}) s->add_option("--checkpoint", opt.checkpoint, "meta-model checkpoint")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  const auto t0 = std::chrono::steady_clock::now();
  femloc::ProgressFn progress;
  if (!opt.quiet) progress = [](const std::string& m) { std::cerr << m << '\n'; };
  try {
    const auto cfg = load(opt);
    std::optional<std::filesystem::path> ckpt;
    if (opt.checkpoint) ckpt = *opt.checkpoint;
    std::filesystem::path dir;
    if (*pre) dir = femloc::cmd_preprocess(cfg, progress);
    else if (*train) dir = femloc::cmd_meta_train(cfg, progress);
    else if (*test) dir = femloc::cmd_meta_test(cfg, ckpt, progress);
    else if (*theory) dir = femloc::cmd_theory_probe(cfg, ckpt, progress);
    else if (*report) dir = femloc::cmd_report(cfg, progress);
    else {
      std::cout << femloc::experiment_to_json(cfg).dump(2) << '\n';
      return kOk;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << dir.string() << '\n';
    if (!opt.quiet) std::cerr << "done in " << secs << " s\n";
    return kOk;
  } catch (const femloc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const femloc::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
}

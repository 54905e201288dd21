#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "sentinel/errors.hpp"
#include "sentinel/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kFloor = 1, kUsage = 2, kRuntime = 3 };

struct Flags {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool strict = false;
  std::optional<std::string> kind;
  std::optional<double> eps;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> n;
  std::optional<std::string> ood;
  std::optional<std::string> checkpoint;
  std::optional<std::string> detector;
  std::optional<std::string> report;
};

sentinel::RunConfig resolve(const Flags& f) {
  sentinel::Overrides o;
  o.seed = f.seed;
  if (f.out) o.out = *f.out;
  if (f.strict) o.strict = true;
  o.n_per_class = f.n;
  o.ood = f.ood;
  o.kind = f.kind;
  o.eps = f.eps;
  o.steps = f.steps;
  std::optional<std::filesystem::path> path;
  if (f.config) path = *f.config;
  return sentinel::resolve_config(path, o);
}

std::filesystem::path checkpoint_of(const Flags& f, const sentinel::RunConfig& c) {
  return f.checkpoint ? std::filesystem::path(*f.checkpoint) : c.checkpoint_path();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sentinel: Mahalanobis-score OOD and adversarial detection toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "Run configuration (JSON)");
  app.add_option("--seed", f.seed, "Seed for every stochastic step");
  app.add_option("--out", f.out, "Run directory");
  app.add_flag("--strict", f.strict, "Fail on unreadable images instead of skipping them");

  auto* train = app.add_subcommand("train", "Train the classifier");
  auto* fit = app.add_subcommand("fit-detector", "Fit Gaussian statistics, layer ensemble and threshold");
  auto* attack = app.add_subcommand("attack", "Craft adversarial batches and the FGSM contact sheet");
  auto* evaluate = app.add_subcommand("evaluate", "Score every detector against every abnormality source");
  auto* report = app.add_subcommand("report", "Re-render report.csv from report.json");
  auto* synth = app.add_subcommand("synth-data", "Write the synthetic datasets as image directories");

  for (auto* sub : {fit, attack, evaluate}) sub->add_option("--checkpoint", f.checkpoint, "Model checkpoint");
  for (auto* sub : {train, fit, attack, evaluate}) sub->add_option("--ood", f.ood, "OOD directory or \"self\"");
  for (auto* sub : {train, fit, attack, evaluate, synth}) sub->add_option("--n", f.n, "Synthetic images per class");
  evaluate->add_option("--detector", f.detector, "Directory of .det files");
  attack->add_option("--kind", f.kind, "fgsm | bim | deepfool | cw");
  attack->add_option("--eps", f.eps, "L-inf budget for FGSM/BIM");
  attack->add_option("--steps", f.steps, "BIM iterations");
  report->add_option("--report", f.report, "Path to report.json (default <out>/report.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (report->parsed()) {
      std::filesystem::path path;
      if (f.report) path = *f.report;
      else path = resolve(f).out / "report.json";
      std::cout << sentinel::cmd_report(path).string() << "\n";
      return kOk;
    }
    const sentinel::RunConfig config = resolve(f);
    if (train->parsed()) {
      std::cout << sentinel::cmd_train(config).string() << "\n";
    } else if (fit->parsed()) {
      std::cout << sentinel::cmd_fit_detector(config, checkpoint_of(f, config)).string() << "\n";
    } else if (attack->parsed()) {
      std::cout << sentinel::cmd_attack(config, checkpoint_of(f, config)).string() << "\n";
    } else if (evaluate->parsed()) {
      const auto detectors = f.detector ? std::filesystem::path(*f.detector) : config.detector_dir();
      const auto outcome = sentinel::cmd_evaluate(config, checkpoint_of(f, config), detectors);
      std::cout << outcome.json_path.string() << "\n" << outcome.csv_path.string() << "\n";
      for (const auto& v : outcome.violations) std::cerr << "floor violated: " << v << "\n";
      if (!outcome.violations.empty()) return kFloor;
    } else if (synth->parsed()) {
      std::cout << sentinel::cmd_synth_data(config).string() << "\n";
    }
    return kOk;
  } catch (const sentinel::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

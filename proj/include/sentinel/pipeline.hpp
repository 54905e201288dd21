#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "sentinel/attacks.hpp"
#include "sentinel/data.hpp"
#include "sentinel/detectors.hpp"
#include "sentinel/metrics.hpp"
#include "sentinel/model.hpp"

namespace sentinel {

inline constexpr std::size_t kDefaultCwSamples = 24;

struct AttackPlan {
  AttackConfig config;
  std::size_t max_samples = 0;  // 0 = every correctly classified input
};

/// One JSON document describing a whole run. Every object rejects unknown
/// keys; absent keys take the defaults below.
struct RunConfig {
  std::uint64_t seed = 7;
  std::filesystem::path out = "run";

  // Data. An empty `in_dist` means the synthetic generator. `ood` is empty
  // (synthetic OOD when in_dist is synthetic, none otherwise), a directory,
  // or "self" (the in-distribution test split scored against itself).
  std::string in_dist;
  std::string ood;
  bool strict = false;
  std::size_t image_size = kSynthDefaultSize;
  std::size_t synth_per_class = 300;
  std::size_t synth_ood_per_class = 100;
  SplitSpec split;
  double ood_validation_fraction = 0.25;

  TrainConfig train;

  std::vector<double> epsilon_grid = default_epsilon_grid();
  std::optional<double> shrinkage;
  std::size_t lid_k = kLidK;
  std::size_t lid_reference = kLidReferenceSize;
  double odin_temperature = kOdinTemperature;
  double odin_eps = kOdinEpsilon;

  std::vector<AttackPlan> attacks = default_attacks();
  std::vector<double> figure_eps{0.0, 0.1, 0.2, 0.3};
  std::vector<MetricFloor> floors;

  static std::vector<AttackPlan> default_attacks();

  /// Throws ConfigError naming the offending key.
  static RunConfig from_json(const nlohmann::json& doc);
  /// Complete document with every default filled in (round-trips through from_json).
  nlohmann::json to_json() const;
  void validate() const;
  /// SHA-256 of the canonical document without `out`, so relocated reruns share it.
  std::string digest() const;

  std::filesystem::path checkpoint_path() const { return out / "model.ckpt"; }
  std::filesystem::path detector_dir() const { return out / "detectors"; }
  std::filesystem::path attack_dir() const { return out / "attacks"; }
};

/// Flags > config file > defaults. Each optional is applied only when set.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<bool> strict;
  std::optional<std::size_t> n_per_class;
  std::optional<std::string> ood;
  std::optional<std::string> kind;
  std::optional<double> eps;
  std::optional<std::size_t> steps;
};

/// Reads `config_path` (if any), applies `overrides`, validates.
RunConfig resolve_config(const std::optional<std::filesystem::path>& config_path, const Overrides& overrides);

struct PreparedData {
  DatasetSplits splits;
  std::optional<LabeledDataset> ood_val;
  std::optional<LabeledDataset> ood_test;
  bool ood_is_self = false;
  std::vector<std::string> warnings;
};

PreparedData prepare_data(const RunConfig& config);

/// Source names: "OOD" (when configured) then each attack, config order.
std::vector<std::string> abnormality_sources(const RunConfig& config);

// ---- commands ------------------------------------------------------------------

/// Writes model.ckpt and history.json; returns the checkpoint path.
std::filesystem::path cmd_train(const RunConfig& config);

/// One .det per abnormality source in detector_dir(); returns the directory.
std::filesystem::path cmd_fit_detector(const RunConfig& config, const std::filesystem::path& checkpoint);

/// Adversarial batches for the test split plus the FGSM contact sheet.
std::filesystem::path cmd_attack(const RunConfig& config, const std::filesystem::path& checkpoint);

struct EvalOutcome {
  EvalReport report;
  std::vector<std::string> violations;
  std::filesystem::path json_path;
  std::filesystem::path csv_path;
};

EvalOutcome cmd_evaluate(const RunConfig& config, const std::filesystem::path& checkpoint,
                         const std::filesystem::path& detectors);

/// Re-renders report.csv next to `report_json`; returns the CSV path.
std::filesystem::path cmd_report(const std::filesystem::path& report_json);

/// Writes the synthetic in-distribution and OOD sets as image directories.
std::filesystem::path cmd_synth_data(const RunConfig& config);

}  // namespace sentinel

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace sentinel {

/// Higher score = more in-distribution; positive = in-distribution.
struct ScoredSample {
  double score = 0.0;
  bool is_positive = false;
};

std::vector<ScoredSample> make_samples(std::span<const double> positive_scores,
                                       std::span<const double> negative_scores);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

/// One point per distinct threshold (descending), from (0,0) to (1,1).
/// Throws std::invalid_argument unless both classes are present.
std::vector<RocPoint> roc_points(std::span<const ScoredSample> samples);

/// Trapezoidal area under roc_points: P(pos > neg) + P(pos == neg) / 2.
double auroc(std::span<const ScoredSample> samples);

/// TNR at the highest threshold t with TPR(t) >= target (positive iff score >= t).
double tnr_at_tpr(std::span<const ScoredSample> samples, double tpr_target = 0.95);

enum class PositiveClass { In, Out };

/// Average precision over a descending sweep; for Out, scores are negated
/// and labels flipped.
double aupr(std::span<const ScoredSample> samples, PositiveClass positive);

/// max over thresholds of (TPR + TNR) / 2.
double detection_accuracy(std::span<const ScoredSample> samples);

struct MetricSet {
  double tnr_at_tpr95 = 0.0;
  double auroc = 0.0;
  double aupr_in = 0.0;
  double aupr_out = 0.0;
  double detection_accuracy = 0.0;
  std::size_t n_positive = 0;
  std::size_t n_negative = 0;
};

MetricSet compute_metrics(std::span<const ScoredSample> samples);

// ---- reports ---------------------------------------------------------------

struct ReportRow {
  std::string model;
  std::string detector;
  std::string source;
  MetricSet metrics;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::string config_digest;
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();
};

/// Attack columns always rendered for every detector block, in this order.
inline const std::vector<std::string>& table_attack_columns() {
  static const std::vector<std::string> cols{"FGSM", "BIM", "DeepFool", "CW"};
  return cols;
}

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& doc);
/// Canonical text: sorted keys, two-space indent, trailing newline.
std::string render_json(const EvalReport& report);
/// Models outer, metrics inner; one column block per detector with the
/// attack columns first and any other sources after. Percent, 2 decimals.
std::string render_csv(const EvalReport& report);

/// A lower bound on one metric of one (detector, source) row.
struct MetricFloor {
  std::string detector;
  std::string source;
  std::string metric;  // tnr_at_tpr95 | auroc | aupr_in | aupr_out | detection_accuracy
  double min = 0.0;
};

/// Human-readable violations; rows absent from the report count as violations.
std::vector<std::string> check_floors(const EvalReport& report, std::span<const MetricFloor> floors);

}  // namespace sentinel

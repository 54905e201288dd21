#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "sentinel/autodiff.hpp"
#include "sentinel/gaussian.hpp"
#include "sentinel/model.hpp"
#include "sentinel/tensor.hpp"

namespace sentinel {

/// Preprocessing magnitudes searched by fit_ensemble.
inline const std::vector<double>& default_epsilon_grid() {
  static const std::vector<double> grid{0.0, 0.0005, 0.001, 0.0014, 0.002, 0.005, 0.01};
  return grid;
}

inline constexpr double kEnsembleL2 = 1e-3;

// ---- Mahalanobis confidence ----------------------------------------------------

/// One ClassGaussianStats per tap of `model`, fitted on `train` features.
std::vector<ClassGaussianStats> fit_layer_stats(const SmallCNN& model, const LabeledDataset& train,
                                                std::optional<double> shrinkage = std::nullopt);

/// sum_n mahalanobis_sq(features[n], classes[n]) recorded on the tape;
/// `stats` must outlive the tape.
Var mahalanobis_sq_sum(Var features, const ClassGaussianStats& stats, std::span<const std::size_t> classes);

/// Gradient w.r.t. the input batch of sum_n d_{c_n}(f(x_n)), where c_n is the
/// closest class of the unperturbed feature.
Tensor mahalanobis_input_gradient(const SmallCNN& model, const ClassGaussianStats& stats, std::size_t tap,
                                  const Tensor& x);

/// clamp(x - eps * sign(grad), 0, 1) with |x~ - x| <= eps exactly; eps = 0
/// returns x unchanged.
Tensor preprocess_input(const SmallCNN& model, const ClassGaussianStats& stats, std::size_t tap, const Tensor& x,
                        double eps);

/// M_l for every sample of `x` (after preprocessing with `eps`).
std::vector<double> layer_confidence(const SmallCNN& model, const ClassGaussianStats& stats, std::size_t tap,
                                     const Tensor& x, double eps);

/// [N][L] matrix of layer confidences, one column per stats entry, each read
/// at the tap given by its layer().
using ScoreMatrix = std::vector<std::vector<double>>;
ScoreMatrix layer_score_matrix(const SmallCNN& model, std::span<const ClassGaussianStats> layers, const Tensor& x,
                               double eps, std::size_t chunk = 64);

// ---- logistic fuser ------------------------------------------------------------

struct LogisticModel {
  std::vector<double> alpha;
  double bias = 0.0;
  std::size_t iterations = 0;

  double apply(std::span<const double> features) const;
};

/// Binary logistic regression (label 1 = in-distribution) by full-batch
/// gradient descent. Features are standardised internally and the L2 penalty
/// applies to the standardised weights; the result is mapped back to raw
/// features. Throws NumericError naming the column when one is constant
/// (`column_names` optional).
LogisticModel fit_logistic(const ScoreMatrix& features, std::span<const int> labels, double l2 = kEnsembleL2,
                           std::span<const std::string> column_names = {});

struct EnsembleFit {
  double epsilon = 0.0;
  LogisticModel fuser;
  double validation_auroc = 0.0;
  std::vector<double> grid_auroc;  // one per grid entry
};

/// Selection over precomputed scores: positives[i] / negatives[i] hold the
/// validation score matrices for eps_grid[i]. Ties keep the earlier entry.
EnsembleFit select_ensemble(std::span<const double> eps_grid, std::span<const ScoreMatrix> positives,
                            std::span<const ScoreMatrix> negatives, std::span<const std::string> column_names = {});

EnsembleFit fit_ensemble(const SmallCNN& model, std::span<const ClassGaussianStats> layers, const Tensor& validation_pos,
                         const Tensor& validation_neg, std::span<const double> eps_grid = default_epsilon_grid());

// ---- threshold -----------------------------------------------------------------

inline constexpr std::size_t kMinCalibrationSamples = 20;

/// Lower 5th percentile by linear interpolation at rank 0.05 * (n - 1),
/// lowered if needed to the order statistic that keeps TPR >= 0.95 on
/// `scores` themselves.
double calibrate_threshold(std::span<const double> scores);

// ---- baselines -----------------------------------------------------------------

inline constexpr double kOdinTemperature = 1000.0;
inline constexpr double kOdinEpsilon = 0.0014;

/// max softmax(logits / temperature) per row, computed in double.
std::vector<double> max_softmax(const Tensor& logits, double temperature = 1.0);

std::vector<double> msp_score(const Classifier& model, const Tensor& x);

/// Gradient w.r.t. x of sum_n log softmax(z_n / T)[argmax z_n].
Tensor odin_input_gradient(const Classifier& model, const Tensor& x, double temperature);

std::vector<double> odin_score(const Classifier& model, const Tensor& x, double temperature = kOdinTemperature,
                               double eps = kOdinEpsilon);

inline constexpr std::size_t kLidK = 20;
inline constexpr std::size_t kLidReferenceSize = 100;
inline constexpr double kLidDistanceFloor = 1e-12;
/// Stand-in for an infinite estimate when LID values feed the fuser.
inline constexpr double kLidCap = 1e6;

/// -((1/k) sum ln(r_i / r_k))^-1 over ascending distances r_1..r_k (floored at
/// kLidDistanceFloor). Returns +inf when every r_i equals r_k.
double lid_from_distances(std::span<const double> sorted_distances);

/// LID of each row of `x` ([N,d]) against `reference` ([M,d]), M > k >= 2.
std::vector<double> lid_score(const Tensor& reference, const Tensor& x, std::size_t k = kLidK);

struct LidDetector {
  std::size_t k = kLidK;
  std::vector<Tensor> references;  // one [M,d] batch per tap
  LogisticModel fuser;

  /// [N][L] LID features, infinite estimates replaced by kLidCap.
  ScoreMatrix features(const SmallCNN& model, const Tensor& x) const;
  std::vector<double> score(const SmallCNN& model, const Tensor& x) const;
};

/// References are the first `reference_size` items of `train` after a seeded
/// shuffle; the fuser is trained on the validation sets.
LidDetector fit_lid(const SmallCNN& model, const LabeledDataset& train, const Tensor& validation_pos,
                    const Tensor& validation_neg, std::uint64_t seed, std::size_t k = kLidK,
                    std::size_t reference_size = kLidReferenceSize);

// ---- detector artifact ---------------------------------------------------------

struct ScoreRecord {
  std::vector<double> layer_scores;
  double ensemble = 0.0;
  bool in_distribution = false;
  double wall_ms = 0.0;
};

struct DetectorModel {
  std::vector<ClassGaussianStats> layers;
  std::vector<TapInfo> taps;
  double epsilon = 0.0;
  LogisticModel fuser;
  double threshold = 0.0;
  std::string model_digest;
  std::uint64_t seed = 0;
  nlohmann::json provenance = nlohmann::json::object();
  std::optional<LidDetector> lid;

  void validate() const;
  double ensemble(std::span<const double> layer_scores) const { return fuser.apply(layer_scores); }
  bool decide(double ensemble_score) const { return ensemble_score >= threshold; }
};

/// Throws ConfigError when `model` is not the network the detector was fitted on.
void check_model(const DetectorModel& detector, const SmallCNN& model);

std::vector<ScoreRecord> score(const DetectorModel& detector, const SmallCNN& model, const Tensor& x);

/// Ensemble scores only (no timing), for evaluation.
std::vector<double> ensemble_scores(const DetectorModel& detector, const SmallCNN& model, const Tensor& x);

/// Sets detector.threshold from in-distribution validation images; returns it.
double calibrate_threshold(DetectorModel& detector, const SmallCNN& model, const Tensor& in_dist_validation);

// "SNTLDET", version u8, u32 JSON length, JSON header, u32 section count,
// sections (u16 name length, name, u32 length, ".ten" bytes), CRC-32 u32 over
// everything before it.
inline constexpr std::uint8_t kDetectorVersion = 1;

std::string encode_detector(const DetectorModel& detector);
DetectorModel decode_detector(std::string_view bytes);
void save_detector(const std::filesystem::path& path, const DetectorModel& detector);
DetectorModel load_detector(const std::filesystem::path& path);

}  // namespace sentinel

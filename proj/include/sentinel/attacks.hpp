#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "sentinel/data.hpp"
#include "sentinel/model.hpp"
#include "sentinel/tensor.hpp"

namespace sentinel {

enum class AttackKind { FGSM, BIM, DeepFool, CW };

/// Table-style name: "FGSM", "BIM", "DeepFool", "CW".
std::string attack_name(AttackKind kind);
/// Accepts any case of fgsm / bim / deepfool / cw.
AttackKind parse_attack_kind(std::string_view text);

struct AttackConfig {
  AttackKind kind = AttackKind::FGSM;
  float eps = 0.1f;  // L-inf budget (FGSM, BIM)
  std::size_t steps = 10;
  float step_size = 0.02f;
  std::size_t max_iter = 50;  // DeepFool
  double overshoot = 0.02;
  std::size_t c_search_steps = 5;  // CW
  double kappa = 0.0;
  double learning_rate = 0.01;
  std::size_t iterations = 100;
  double initial_const = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Clips `candidate` into the L-inf ball of radius `eps` around `origin`,
/// then into [0,1]. The bound holds exactly: float rounding of origin +/- eps
/// is corrected so |out - origin| <= eps in real arithmetic.
Tensor project_linf(const Tensor& origin, const Tensor& candidate, double eps);

/// x + eps * sign(grad_x CE(x, y)), projected.
Tensor fgsm(const Classifier& model, const Tensor& x, std::span<const int> labels, float eps);

/// Iterated signed-gradient steps with projection after every step.
/// bim(..., eps, 1, eps) is the same computation as fgsm(..., eps).
Tensor bim(const Classifier& model, const Tensor& x, std::span<const int> labels, float eps, std::size_t steps,
           float step_size);

struct DeepFoolResult {
  Tensor adversarial;
  std::vector<std::size_t> iterations;
  std::vector<bool> fooled;
  std::vector<bool> zero_gradient;  // aborted: boundary normal vanished
};

/// Multi-class linearisation loop; x_adv = clamp(x + (1 + overshoot) * r_total).
/// With `labels`, samples already misclassified are returned untouched.
DeepFoolResult deepfool(const Classifier& model, const Tensor& x, std::size_t max_iter, double overshoot,
                        std::span<const int> labels = {});

struct CwResult {
  Tensor adversarial;
  std::vector<bool> success;
  std::vector<double> l2;
  std::vector<bool> aborted;  // non-finite objective
};

/// CW-L2 in tanh space, plain fixed-step gradient descent, binary search on c.
/// Keeps the smallest-L2 successful iterate; otherwise the input itself.
CwResult cw_l2(const Classifier& model, const Tensor& x, std::span<const int> labels, const AttackConfig& config);

struct AdversarialBatch {
  AttackConfig config;
  std::vector<std::size_t> source_indices;  // positions in the attacked dataset
  Tensor original;
  Tensor perturbed;
  std::vector<int> true_labels;
  std::vector<int> original_pred;
  std::vector<int> adversarial_pred;
  std::vector<bool> success;
  std::vector<double> l2;
  std::vector<double> linf;

  std::size_t size() const { return true_labels.size(); }
  double success_rate() const;
  /// Images of successful samples only.
  Tensor successful_perturbed() const;
  Tensor successful_original() const;
};

/// Attacks the correctly classified items of `data` (at most `max_samples`
/// of them, in order; 0 = all). Norms are measured in double on the stored
/// float tensors.
AdversarialBatch run_attack(const Classifier& model, const LabeledDataset& data, const AttackConfig& config,
                            std::size_t max_samples = 0);

/// `dir/original.ten`, `dir/adversarial.ten`, `dir/manifest.json`.
void save_adversarial_batch(const std::filesystem::path& dir, const AdversarialBatch& batch,
                            const nlohmann::json& provenance = nlohmann::json::object());
AdversarialBatch load_adversarial_batch(const std::filesystem::path& dir);

/// Panel grid: one row per class, one column per eps, each panel captioned
/// with the predicted-class probability.
struct ContactSheet {
  Tensor image;  // [3,H,W]
  std::vector<double> eps;
  std::vector<std::string> row_labels;
  std::vector<std::vector<double>> probability;      // [row][col]
  std::vector<int> predicted;                        // row-major [row][col]
  std::vector<std::vector<double>> mean_abs_delta;   // [row][col], vs. the eps=0 input
};

/// FGSM sweep over `eps` for `examples` (one image per row, label = row class).
ContactSheet fgsm_contact_sheet(const Classifier& model, const LabeledDataset& examples, std::span<const double> eps,
                                std::size_t panel_scale = 3);

}  // namespace sentinel

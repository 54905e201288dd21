#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "sentinel/tensor.hpp"

namespace sentinel {

/// Class-conditional Gaussians with one tied covariance, for one feature layer.
///
/// All distances use the shrunk covariance S = cov + shrinkage * I through
/// its lower Cholesky factor; the inverse is never formed. Means and
/// covariance are rounded to float32 when fitted so that a persisted copy
/// (stored as .ten float32 sections) reproduces every distance bit for bit.
class ClassGaussianStats {
 public:
  /// Relative shrinkage when none is given: 1e-3 * trace(cov) / d,
  /// floored at kMinShrinkage so degenerate fits still factor.
  static constexpr double kRelativeShrinkage = 1e-3;
  static constexpr double kMinShrinkage = 1e-8;

  /// `features` is [N,d]. Covariance is pooled over class-centred residuals
  /// with divisor N. Throws ConfigError for an empty class, NumericError if
  /// S is not positive definite.
  static ClassGaussianStats fit(const Tensor& features, std::span<const int> labels, std::size_t num_classes,
                                std::optional<double> shrinkage = std::nullopt, std::size_t layer = 0);

  /// From explicit parameters (`covariance` is d*d row-major).
  static ClassGaussianStats from_parameters(std::vector<std::vector<double>> means, std::vector<double> covariance,
                                            double shrinkage, std::vector<std::size_t> counts = {},
                                            std::size_t layer = 0);

  std::size_t layer() const { return layer_; }
  std::size_t dim() const { return dim_; }
  std::size_t num_classes() const { return means_.size(); }
  double shrinkage() const { return shrinkage_; }
  const std::vector<std::vector<double>>& means() const { return means_; }
  const std::vector<double>& covariance() const { return covariance_; }
  /// Lower Cholesky factor of cov + shrinkage * I, row-major d*d.
  const std::vector<double>& cholesky_factor() const { return chol_; }
  const std::vector<std::size_t>& counts() const { return counts_; }

  /// (x - mu_c)^T S^-1 (x - mu_c).
  double mahalanobis_sq(std::span<const double> x, std::size_t c) const;
  double mahalanobis_sq(std::span<const float> x, std::size_t c) const;

  /// argmin_c mahalanobis_sq; ties go to the smallest index.
  std::size_t closest_class(std::span<const double> x) const;
  std::size_t closest_class(std::span<const float> x) const;

  /// max_c -mahalanobis_sq(x, c); never positive.
  double confidence(std::span<const float> x) const;

  /// S^-1 v by forward then backward substitution.
  std::vector<double> solve(std::span<const double> v) const;

  /// d/dx of mahalanobis_sq(x, c) = 2 S^-1 (x - mu_c).
  std::vector<double> gradient(std::span<const float> x, std::size_t c) const;

 private:
  ClassGaussianStats() = default;
  void factor();
  void check_dim(std::size_t n) const;

  std::size_t layer_ = 0;
  std::size_t dim_ = 0;
  std::vector<std::vector<double>> means_;
  std::vector<double> covariance_;
  std::vector<double> chol_;
  double shrinkage_ = 0.0;
  std::vector<std::size_t> counts_;
};

}  // namespace sentinel

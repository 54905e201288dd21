#include "sentinel/gaussian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "sentinel/errors.hpp"

namespace sentinel {

namespace {

double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

ClassGaussianStats ClassGaussianStats::fit(const Tensor& features, std::span<const int> labels,
                                           std::size_t num_classes, std::optional<double> shrinkage,
                                           std::size_t layer) {
  if (features.rank() != 2) throw ShapeError("fit: features must be [N,d], got " + shape_to_string(features.shape()));
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (labels.size() != n) {
    throw ShapeError("fit: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " samples");
  }
  if (num_classes == 0) throw ConfigError("fit: need at least one class");

  std::vector<std::vector<double>> sums(num_classes, std::vector<double>(d, 0.0));
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ConfigError("fit: label " + std::to_string(y) + " out of range");
    }
    const auto c = static_cast<std::size_t>(y);
    ++counts[c];
    for (std::size_t j = 0; j < d; ++j) sums[c][j] += features[i * d + j];
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) throw ConfigError("fit: class " + std::to_string(c) + " has no samples");
    for (double& v : sums[c]) v = round_to_float(v / static_cast<double>(counts[c]));
  }

  std::vector<double> cov(d * d, 0.0);
  std::vector<double> r(d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& mu = sums[static_cast<std::size_t>(labels[i])];
    for (std::size_t j = 0; j < d; ++j) r[j] = features[i * d + j] - mu[j];
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b <= a; ++b) cov[a * d + b] += r[a] * r[b];
    }
  }
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b <= a; ++b) {
      const double v = round_to_float(cov[a * d + b] / static_cast<double>(n));
      cov[a * d + b] = v;
      cov[b * d + a] = v;
    }
  }

  double lambda = 0.0;
  if (shrinkage) {
    lambda = *shrinkage;
  } else {
    double trace = 0.0;
    for (std::size_t a = 0; a < d; ++a) trace += cov[a * d + a];
    lambda = std::max(kRelativeShrinkage * trace / static_cast<double>(d), kMinShrinkage);
  }
  return from_parameters(std::move(sums), std::move(cov), lambda, std::move(counts), layer);
}

ClassGaussianStats ClassGaussianStats::from_parameters(std::vector<std::vector<double>> means,
                                                       std::vector<double> covariance, double shrinkage,
                                                       std::vector<std::size_t> counts, std::size_t layer) {
  if (means.empty()) throw ConfigError("gaussian stats need at least one class mean");
  const std::size_t d = means.front().size();
  if (d == 0) throw ShapeError("gaussian stats need dimension >= 1");
  for (const auto& m : means) {
    if (m.size() != d) throw ShapeError("class means have differing dimensions");
    for (double v : m) {
      if (!std::isfinite(v)) throw NumericError("class mean is not finite");
    }
  }
  if (covariance.size() != d * d) throw ShapeError("covariance must be d*d");
  if (!(shrinkage >= 0.0) || !std::isfinite(shrinkage)) throw ConfigError("shrinkage must be finite and >= 0");
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b < a; ++b) {
      const double x = covariance[a * d + b], y = covariance[b * d + a];
      if (std::abs(x - y) > 1e-6 * std::max({1.0, std::abs(x), std::abs(y)})) {
        throw NumericError("covariance is not symmetric");
      }
    }
  }
  if (counts.empty()) counts.assign(means.size(), 0);
  if (counts.size() != means.size()) throw ShapeError("counts/means size mismatch");

  ClassGaussianStats s;
  s.layer_ = layer;
  s.dim_ = d;
  s.means_ = std::move(means);
  s.covariance_ = std::move(covariance);
  s.shrinkage_ = shrinkage;
  s.counts_ = std::move(counts);
  s.factor();
  return s;
}

void ClassGaussianStats::factor() {
  const std::size_t d = dim_;
  chol_.assign(d * d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double diag = covariance_[j * d + j] + shrinkage_;
    for (std::size_t k = 0; k < j; ++k) diag -= chol_[j * d + k] * chol_[j * d + k];
    if (!(diag > 0.0) || !std::isfinite(diag)) {
      std::ostringstream ss;
      ss << "layer " << layer_ << ": covariance + " << shrinkage_
         << " * I is not positive definite (pivot " << j << " = " << diag << "); increase the shrinkage";
      throw NumericError(ss.str());
    }
    const double ljj = std::sqrt(diag);
    chol_[j * d + j] = ljj;
    for (std::size_t i = j + 1; i < d; ++i) {
      double v = covariance_[i * d + j];
      for (std::size_t k = 0; k < j; ++k) v -= chol_[i * d + k] * chol_[j * d + k];
      chol_[i * d + j] = v / ljj;
    }
  }
}

void ClassGaussianStats::check_dim(std::size_t n) const {
  if (n != dim_) {
    throw ShapeError("feature has dimension " + std::to_string(n) + ", stats for layer " + std::to_string(layer_) +
                     " expect " + std::to_string(dim_));
  }
}

std::vector<double> ClassGaussianStats::solve(std::span<const double> v) const {
  check_dim(v.size());
  const std::size_t d = dim_;
  std::vector<double> y(v.begin(), v.end());
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t k = 0; k < i; ++k) y[i] -= chol_[i * d + k] * y[k];
    y[i] /= chol_[i * d + i];
  }
  for (std::size_t i = d; i-- > 0;) {
    for (std::size_t k = i + 1; k < d; ++k) y[i] -= chol_[k * d + i] * y[k];
    y[i] /= chol_[i * d + i];
  }
  return y;
}

double ClassGaussianStats::mahalanobis_sq(std::span<const double> x, std::size_t c) const {
  check_dim(x.size());
  const auto& mu = means_.at(c);
  const std::size_t d = dim_;
  // ||L^-1 (x - mu)||^2 equals the quadratic form and is non-negative by construction.
  std::vector<double> y(d);
  double acc = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double v = x[i] - mu[i];
    for (std::size_t k = 0; k < i; ++k) v -= chol_[i * d + k] * y[k];
    y[i] = v / chol_[i * d + i];
    acc += y[i] * y[i];
  }
  return acc;
}

double ClassGaussianStats::mahalanobis_sq(std::span<const float> x, std::size_t c) const {
  const std::vector<double> xd(x.begin(), x.end());
  return mahalanobis_sq(xd, c);
}

std::size_t ClassGaussianStats::closest_class(std::span<const double> x) const {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < means_.size(); ++c) {
    const double dist = mahalanobis_sq(x, c);
    if (dist < best_d) {
      best_d = dist;
      best = c;
    }
  }
  return best;
}

std::size_t ClassGaussianStats::closest_class(std::span<const float> x) const {
  const std::vector<double> xd(x.begin(), x.end());
  return closest_class(xd);
}

double ClassGaussianStats::confidence(std::span<const float> x) const {
  const std::vector<double> xd(x.begin(), x.end());
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < means_.size(); ++c) best = std::min(best, mahalanobis_sq(xd, c));
  return -best;
}

std::vector<double> ClassGaussianStats::gradient(std::span<const float> x, std::size_t c) const {
  check_dim(x.size());
  const auto& mu = means_.at(c);
  std::vector<double> diff(dim_);
  for (std::size_t i = 0; i < dim_; ++i) diff[i] = x[i] - mu[i];
  auto g = solve(diff);
  for (double& v : g) v *= 2.0;
  return g;
}

}  // namespace sentinel

#include "sentinel/detectors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "sentinel/attacks.hpp"
#include "sentinel/errors.hpp"
#include "sentinel/io.hpp"
#include "sentinel/metrics.hpp"

namespace sentinel {

using nlohmann::json;

namespace {

std::span<const float> row_span(const Tensor& t, std::size_t i) {
  const std::size_t d = t.numel() / t.dim(0);
  return {t.data().data() + i * d, d};
}

std::string column_name(std::span<const std::string> names, std::size_t j) {
  return j < names.size() ? names[j] : "column " + std::to_string(j);
}

}  // namespace

// ---- Mahalanobis confidence ----------------------------------------------------

std::vector<ClassGaussianStats> fit_layer_stats(const SmallCNN& model, const LabeledDataset& train,
                                                std::optional<double> shrinkage) {
  if (train.empty()) throw ConfigError("fit_layer_stats: empty training set");
  const auto inf = model.infer(train.batch(0, train.size()));
  const auto labels = train.labels();
  std::vector<ClassGaussianStats> layers;
  for (std::size_t t = 0; t < inf.features.size(); ++t) {
    layers.push_back(ClassGaussianStats::fit(inf.features[t], labels, model.num_classes(), shrinkage, t));
  }
  return layers;
}

Var mahalanobis_sq_sum(Var features, const ClassGaussianStats& stats, std::span<const std::size_t> classes) {
  const Tensor& f = features.value();
  if (f.rank() != 2 || f.dim(1) != stats.dim() || f.dim(0) != classes.size()) {
    throw ShapeError("mahalanobis_sq_sum: features " + shape_to_string(f.shape()) + " vs dim " +
                     std::to_string(stats.dim()) + " and " + std::to_string(classes.size()) + " classes");
  }
  double total = 0.0;
  for (std::size_t n = 0; n < classes.size(); ++n) total += stats.mahalanobis_sq(row_span(f, n), classes[n]);
  std::vector<std::size_t> cls(classes.begin(), classes.end());
  return features.tape().record(
      Tensor::scalar(static_cast<float>(total)), {features},
      [features, &stats, cls](const Tensor&, const Tensor& gout, Tape& tape) {
        const Tensor& fv = features.value();
        const std::size_t d = fv.dim(1);
        Tensor g(fv.shape(), 0.0f);
        for (std::size_t n = 0; n < cls.size(); ++n) {
          const auto grad = stats.gradient(row_span(fv, n), cls[n]);
          for (std::size_t j = 0; j < d; ++j) g[n * d + j] = static_cast<float>(grad[j] * gout[0]);
        }
        tape.accumulate(features, g);
      },
      "mahalanobis_sq_sum");
}

Tensor mahalanobis_input_gradient(const SmallCNN& model, const ClassGaussianStats& stats, std::size_t tap,
                                  const Tensor& x) {
  Tape tape;
  const Var in = tape.leaf(x, true);
  const Var f = model.tap_feature(tape, in, tap);
  std::vector<std::size_t> classes(x.dim(0));
  for (std::size_t n = 0; n < classes.size(); ++n) classes[n] = stats.closest_class(row_span(f.value(), n));
  tape.backward(mahalanobis_sq_sum(f, stats, classes));
  return tape.grad(in);
}

Tensor preprocess_input(const SmallCNN& model, const ClassGaussianStats& stats, std::size_t tap, const Tensor& x,
                        double eps) {
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw ConfigError("preprocessing eps must be finite and >= 0");
  if (eps == 0.0) return x;
  const Tensor g = mahalanobis_input_gradient(model, stats, tap, x);
  Tensor moved = x;
  const auto e = static_cast<float>(eps);
  for (std::size_t i = 0; i < moved.numel(); ++i) {
    if (g[i] > 0.0f) moved[i] = x[i] - e;
    else if (g[i] < 0.0f) moved[i] = x[i] + e;
  }
  return project_linf(x, moved, eps);
}

std::vector<double> layer_confidence(const SmallCNN& model, const ClassGaussianStats& stats, std::size_t tap,
                                     const Tensor& x, double eps) {
  const Tensor xt = preprocess_input(model, stats, tap, x, eps);
  Tape tape;
  const Tensor f = model.tap_feature(tape, tape.constant(xt), tap).value();
  std::vector<double> out(f.dim(0));
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = stats.confidence(row_span(f, n));
  return out;
}

ScoreMatrix layer_score_matrix(const SmallCNN& model, std::span<const ClassGaussianStats> layers, const Tensor& x,
                               double eps, std::size_t chunk) {
  for (const auto& st : layers) {
    if (st.layer() >= model.num_taps()) {
      throw ShapeError("layer_score_matrix: stats for tap " + std::to_string(st.layer()) + " but the model has " +
                       std::to_string(model.num_taps()) + " taps");
    }
  }
  ScoreMatrix out(x.dim(0), std::vector<double>(layers.size()));
  for (std::size_t begin = 0; begin < x.dim(0); begin += chunk) {
    const std::size_t end = std::min(x.dim(0), begin + chunk);
    const Tensor part = x.rows(begin, end);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto m = layer_confidence(model, layers[l], layers[l].layer(), part, eps);
      for (std::size_t n = begin; n < end; ++n) out[n][l] = m[n - begin];
    }
  }
  return out;
}

// ---- logistic fuser ------------------------------------------------------------

double LogisticModel::apply(std::span<const double> features) const {
  if (features.size() != alpha.size()) {
    throw ShapeError("fuser expects " + std::to_string(alpha.size()) + " scores, got " +
                     std::to_string(features.size()));
  }
  double s = bias;
  for (std::size_t j = 0; j < alpha.size(); ++j) s += alpha[j] * features[j];
  return s;
}

LogisticModel fit_logistic(const ScoreMatrix& features, std::span<const int> labels, double l2,
                           std::span<const std::string> column_names) {
  const std::size_t n = features.size();
  if (n == 0 || labels.size() != n) throw ShapeError("fit_logistic: need one label per feature row");
  const std::size_t L = features[0].size();
  if (L == 0) throw ShapeError("fit_logistic: no feature columns");
  bool has_pos = false, has_neg = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (features[i].size() != L) throw ShapeError("fit_logistic: ragged feature rows");
    for (double v : features[i]) {
      if (!std::isfinite(v)) throw NumericError("fit_logistic: non-finite feature in row " + std::to_string(i));
    }
    (labels[i] ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) throw ConfigError("fit_logistic: both classes must be present");

  std::vector<double> mean(L, 0.0), sd(L, 0.0);
  for (const auto& row : features) {
    for (std::size_t j = 0; j < L; ++j) mean[j] += row[j];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  for (const auto& row : features) {
    for (std::size_t j = 0; j < L; ++j) sd[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
  }
  for (std::size_t j = 0; j < L; ++j) {
    sd[j] = std::sqrt(sd[j] / static_cast<double>(n));
    if (!(sd[j] > 1e-12 * std::max(1.0, std::abs(mean[j])))) {
      throw NumericError("degenerate scores for " + column_name(column_names, j) +
                         ": every validation sample has the same value");
    }
  }
  std::vector<std::vector<double>> z(n, std::vector<double>(L));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < L; ++j) z[i][j] = (features[i][j] - mean[j]) / sd[j];
  }

  // Standardised columns have unit second moment, so the logistic Hessian is
  // bounded by (L + 1) / 4.
  const double step = 1.0 / (0.25 * static_cast<double>(L + 1) + l2);
  constexpr std::size_t kMaxIter = 200000;
  constexpr double kTol = 1e-10;
  std::vector<double> w(L, 0.0), gw(L);
  double b = 0.0;
  LogisticModel out;
  for (std::size_t it = 0; it < kMaxIter; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = b;
      for (std::size_t j = 0; j < L; ++j) s += w[j] * z[i][j];
      const double p = 1.0 / (1.0 + std::exp(-s));
      const double r = p - (labels[i] ? 1.0 : 0.0);
      for (std::size_t j = 0; j < L; ++j) gw[j] += r * z[i][j];
      gb += r;
    }
    double norm2 = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
      gw[j] = gw[j] / static_cast<double>(n) + l2 * w[j];
      norm2 += gw[j] * gw[j];
    }
    gb /= static_cast<double>(n);
    norm2 += gb * gb;
    out.iterations = it;
    if (std::sqrt(norm2) < kTol) break;
    for (std::size_t j = 0; j < L; ++j) w[j] -= step * gw[j];
    b -= step * gb;
  }
  out.alpha.resize(L);
  out.bias = b;
  for (std::size_t j = 0; j < L; ++j) {
    out.alpha[j] = w[j] / sd[j];
    out.bias -= w[j] * mean[j] / sd[j];
  }
  return out;
}

EnsembleFit select_ensemble(std::span<const double> eps_grid, std::span<const ScoreMatrix> positives,
                            std::span<const ScoreMatrix> negatives, std::span<const std::string> column_names) {
  if (eps_grid.empty()) throw ConfigError("epsilon grid is empty");
  if (positives.size() != eps_grid.size() || negatives.size() != eps_grid.size()) {
    throw ShapeError("select_ensemble: one score matrix pair per grid entry");
  }
  EnsembleFit best;
  bool have = false;
  for (std::size_t g = 0; g < eps_grid.size(); ++g) {
    if (positives[g].empty() || negatives[g].empty()) throw ConfigError("validation sets must be non-empty");
    ScoreMatrix x = positives[g];
    x.insert(x.end(), negatives[g].begin(), negatives[g].end());
    std::vector<int> y(x.size(), 0);
    std::fill_n(y.begin(), positives[g].size(), 1);
    const LogisticModel fuser = fit_logistic(x, y, kEnsembleL2, column_names);
    std::vector<double> pos, neg;
    for (const auto& row : positives[g]) pos.push_back(fuser.apply(row));
    for (const auto& row : negatives[g]) neg.push_back(fuser.apply(row));
    const auto samples = make_samples(pos, neg);
    const double a = auroc(samples);
    best.grid_auroc.push_back(a);
    if (!have || a > best.validation_auroc) {
      have = true;
      best.epsilon = eps_grid[g];
      best.fuser = fuser;
      best.validation_auroc = a;
    }
  }
  return best;
}

EnsembleFit fit_ensemble(const SmallCNN& model, std::span<const ClassGaussianStats> layers, const Tensor& validation_pos,
                         const Tensor& validation_neg, std::span<const double> eps_grid) {
  if (validation_pos.numel() == 0 || validation_neg.numel() == 0) {
    throw ConfigError("fit_ensemble: validation sets must be non-empty");
  }
  std::vector<ScoreMatrix> pos, neg;
  for (double eps : eps_grid) {
    pos.push_back(layer_score_matrix(model, layers, validation_pos, eps));
    neg.push_back(layer_score_matrix(model, layers, validation_neg, eps));
  }
  std::vector<std::string> names;
  for (const auto& t : model.tap_manifest()) names.push_back("layer '" + t.name + "'");
  return select_ensemble(eps_grid, pos, neg, names);
}

// ---- threshold -----------------------------------------------------------------

double calibrate_threshold(std::span<const double> scores) {
  const std::size_t n = scores.size();
  if (n < kMinCalibrationSamples) {
    throw ConfigError("threshold calibration needs at least " + std::to_string(kMinCalibrationSamples) +
                      " samples, got " + std::to_string(n));
  }
  std::vector<double> s(scores.begin(), scores.end());
  for (double v : s) {
    if (!std::isfinite(v)) throw NumericError("threshold calibration: non-finite score");
  }
  std::sort(s.begin(), s.end());
  const double pos = 0.05 * static_cast<double>(n - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  const double interp = lo + 1 < n ? s[lo] + frac * (s[lo + 1] - s[lo]) : s[lo];
  const std::size_t needed = (95 * n + 99) / 100;  // ceil(0.95 n)
  return std::min(interp, s[n - needed]);
}

// ---- baselines -----------------------------------------------------------------

std::vector<double> max_softmax(const Tensor& logits, double temperature) {
  if (logits.rank() != 2) throw ShapeError("max_softmax: logits must be [N,C], got " + shape_to_string(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    const float* z = logits.data().data() + s * c;
    const double top = *std::max_element(z, z + c) / temperature;
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(z[j] / temperature - top);
    out[s] = 1.0 / denom;
  }
  return out;
}

std::vector<double> msp_score(const Classifier& model, const Tensor& x) {
  return max_softmax(model.predict_logits(x), 1.0);
}

Tensor odin_input_gradient(const Classifier& model, const Tensor& x, double temperature) {
  if (!(temperature >= 1.0)) throw ConfigError("ODIN temperature must be >= 1");
  Tape tape;
  const Var in = tape.leaf(x, true);
  const Var z = model.logits(tape, in);
  const std::size_t n = z.value().dim(0), c = z.value().dim(1);
  Tensor pick(z.shape(), 0.0f);
  for (std::size_t s = 0; s < n; ++s) {
    const float* row = z.value().data().data() + s * c;
    pick[s * c + static_cast<std::size_t>(std::max_element(row, row + c) - row)] = 1.0f;
  }
  tape.backward(dot_const(log_softmax(scale(z, static_cast<float>(1.0 / temperature))), pick));
  return tape.grad(in);
}

std::vector<double> odin_score(const Classifier& model, const Tensor& x, double temperature, double eps) {
  if (!(temperature >= 1.0)) throw ConfigError("ODIN temperature must be >= 1");
  if (!(eps >= 0.0)) throw ConfigError("ODIN eps must be >= 0");
  if (eps == 0.0) return max_softmax(model.predict_logits(x), temperature);
  const Tensor g = odin_input_gradient(model, x, temperature);
  Tensor moved = x;
  const auto e = static_cast<float>(eps);
  for (std::size_t i = 0; i < moved.numel(); ++i) {
    // x - eps * sign(-grad log S)
    if (g[i] > 0.0f) moved[i] = x[i] + e;
    else if (g[i] < 0.0f) moved[i] = x[i] - e;
  }
  return max_softmax(model.predict_logits(project_linf(x, moved, eps)), temperature);
}

double lid_from_distances(std::span<const double> sorted_distances) {
  const std::size_t k = sorted_distances.size();
  if (k < 2) throw ConfigError("LID needs k >= 2");
  const double rk = std::max(sorted_distances[k - 1], kLidDistanceFloor);
  double s = 0.0;
  for (double r : sorted_distances) s += std::log(std::max(r, kLidDistanceFloor) / rk);
  s /= static_cast<double>(k);
  if (s == 0.0) return std::numeric_limits<double>::infinity();
  return -1.0 / s;
}

std::vector<double> lid_score(const Tensor& reference, const Tensor& x, std::size_t k) {
  if (reference.rank() != 2 || x.rank() != 2 || reference.dim(1) != x.dim(1)) {
    throw ShapeError("lid_score: reference " + shape_to_string(reference.shape()) + " vs queries " +
                     shape_to_string(x.shape()));
  }
  if (k < 2 || k >= reference.dim(0)) {
    throw ConfigError("LID needs 2 <= k < reference batch size (k=" + std::to_string(k) +
                      ", batch=" + std::to_string(reference.dim(0)) + ")");
  }
  const std::size_t m = reference.dim(0), d = x.dim(1);
  std::vector<double> out(x.dim(0)), dist(m);
  for (std::size_t q = 0; q < x.dim(0); ++q) {
    for (std::size_t r = 0; r < m; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(x[q * d + j]) - reference[r * d + j];
        s += diff * diff;
      }
      dist[r] = std::sqrt(s);
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    out[q] = lid_from_distances(std::span<const double>(dist.data(), k));
  }
  return out;
}

ScoreMatrix LidDetector::features(const SmallCNN& model, const Tensor& x) const {
  if (references.size() != model.num_taps()) throw ShapeError("LID references do not match the model taps");
  const auto inf = model.infer(x);
  ScoreMatrix out(x.dim(0), std::vector<double>(references.size()));
  for (std::size_t l = 0; l < references.size(); ++l) {
    const auto lid = lid_score(references[l], inf.features[l], k);
    for (std::size_t n = 0; n < lid.size(); ++n) out[n][l] = std::isfinite(lid[n]) ? lid[n] : kLidCap;
  }
  return out;
}

std::vector<double> LidDetector::score(const SmallCNN& model, const Tensor& x) const {
  std::vector<double> out;
  for (const auto& row : features(model, x)) out.push_back(fuser.apply(row));
  return out;
}

LidDetector fit_lid(const SmallCNN& model, const LabeledDataset& train, const Tensor& validation_pos,
                    const Tensor& validation_neg, std::uint64_t seed, std::size_t k, std::size_t reference_size) {
  if (train.size() <= k) throw ConfigError("LID reference batch must be larger than k");
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(reference_size, train.size()));
  if (idx.size() <= k) throw ConfigError("LID reference batch must be larger than k");

  LidDetector lid;
  lid.k = k;
  lid.references = model.infer(train.batch(idx)).features;
  ScoreMatrix x = lid.features(model, validation_pos);
  const std::size_t n_pos = x.size();
  const ScoreMatrix neg = lid.features(model, validation_neg);
  x.insert(x.end(), neg.begin(), neg.end());
  std::vector<int> y(x.size(), 0);
  std::fill_n(y.begin(), n_pos, 1);
  std::vector<std::string> names;
  for (const auto& t : model.tap_manifest()) names.push_back("LID layer '" + t.name + "'");
  lid.fuser = fit_logistic(x, y, kEnsembleL2, names);
  return lid;
}

// ---- detector ------------------------------------------------------------------

void DetectorModel::validate() const {
  if (layers.empty()) throw ConfigError("detector has no layers");
  if (taps.size() != layers.size() || fuser.alpha.size() != layers.size()) {
    throw ConfigError("detector layer, tap and weight counts disagree");
  }
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("detector epsilon must be finite and >= 0");
  for (double a : fuser.alpha) {
    if (!std::isfinite(a)) throw ConfigError("detector weights must be finite");
  }
  if (!std::isfinite(fuser.bias) || !std::isfinite(threshold)) throw ConfigError("detector bias/threshold must be finite");
}

void check_model(const DetectorModel& detector, const SmallCNN& model) {
  if (model.digest() != detector.model_digest) {
    throw ConfigError("detector was fitted on model " + detector.model_digest.substr(0, 12) +
                      "..., but the given model is " + model.digest().substr(0, 12) + "...");
  }
}

std::vector<double> ensemble_scores(const DetectorModel& detector, const SmallCNN& model, const Tensor& x) {
  check_model(detector, model);
  std::vector<double> out;
  for (const auto& row : layer_score_matrix(model, detector.layers, x, detector.epsilon)) {
    out.push_back(detector.ensemble(row));
  }
  return out;
}

std::vector<ScoreRecord> score(const DetectorModel& detector, const SmallCNN& model, const Tensor& x) {
  check_model(detector, model);
  const auto start = std::chrono::steady_clock::now();
  const ScoreMatrix m = layer_score_matrix(model, detector.layers, x, detector.epsilon);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  std::vector<ScoreRecord> out;
  for (const auto& row : m) {
    ScoreRecord r;
    r.layer_scores = row;
    r.ensemble = detector.ensemble(row);
    r.in_distribution = detector.decide(r.ensemble);
    r.wall_ms = ms / static_cast<double>(m.size());
    out.push_back(std::move(r));
  }
  return out;
}

double calibrate_threshold(DetectorModel& detector, const SmallCNN& model, const Tensor& in_dist_validation) {
  const auto s = ensemble_scores(detector, model, in_dist_validation);
  detector.threshold = calibrate_threshold(s);
  return detector.threshold;
}

namespace {

void put_section(std::string& out, const std::string& name, const Tensor& t) {
  io::put_u16(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  const std::string ten = encode_ten(t);
  io::put_u32(out, static_cast<std::uint32_t>(ten.size()));
  out += ten;
}

json fuser_json(const LogisticModel& m) { return {{"alpha", m.alpha}, {"bias", m.bias}, {"iterations", m.iterations}}; }

LogisticModel fuser_from_json(const json& j) {
  LogisticModel m;
  m.alpha = j.at("alpha").get<std::vector<double>>();
  m.bias = j.at("bias").get<double>();
  m.iterations = j.value("iterations", std::size_t{0});
  return m;
}

}  // namespace

std::string encode_detector(const DetectorModel& detector) {
  detector.validate();
  json header;
  header["epsilon"] = detector.epsilon;
  header["fuser"] = fuser_json(detector.fuser);
  header["threshold"] = detector.threshold;
  header["model_digest"] = detector.model_digest;
  header["seed"] = detector.seed;
  header["provenance"] = detector.provenance;
  json layers = json::array();
  for (std::size_t l = 0; l < detector.layers.size(); ++l) {
    const auto& s = detector.layers[l];
    layers.push_back({{"tap", detector.taps[l].name},
                      {"index", s.layer()},
                      {"dim", s.dim()},
                      {"classes", s.num_classes()},
                      {"shrinkage", s.shrinkage()},
                      {"counts", s.counts()}});
  }
  header["layers"] = layers;
  if (detector.lid) header["lid"] = {{"k", detector.lid->k}, {"fuser", fuser_json(detector.lid->fuser)}};

  std::string out = "SNTLDET";
  io::put_u8(out, kDetectorVersion);
  const std::string text = header.dump();
  io::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  const std::size_t count = 2 * detector.layers.size() + (detector.lid ? detector.lid->references.size() : 0);
  io::put_u32(out, static_cast<std::uint32_t>(count));
  for (std::size_t l = 0; l < detector.layers.size(); ++l) {
    const auto& s = detector.layers[l];
    const std::size_t d = s.dim(), c = s.num_classes();
    Tensor means({c, d});
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t j = 0; j < d; ++j) means[k * d + j] = static_cast<float>(s.means()[k][j]);
    }
    Tensor cov({d, d});
    for (std::size_t i = 0; i < d * d; ++i) cov[i] = static_cast<float>(s.covariance()[i]);
    put_section(out, "layer" + std::to_string(l) + ".means", means);
    put_section(out, "layer" + std::to_string(l) + ".covariance", cov);
  }
  if (detector.lid) {
    for (std::size_t l = 0; l < detector.lid->references.size(); ++l) {
      put_section(out, "lid" + std::to_string(l) + ".reference", detector.lid->references[l]);
    }
  }
  io::put_u32(out, io::crc32(out));
  return out;
}

DetectorModel decode_detector(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 7) != "SNTLDET") throw FormatError("detector: bad magic");
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  io::ByteReader tail(bytes.substr(bytes.size() - 4));
  if (io::crc32(body) != tail.u32()) throw FormatError("detector: checksum mismatch (file is corrupt)");
  io::ByteReader r(body);
  r.take(7);
  const auto version = r.u8();
  if (version != kDetectorVersion) {
    throw FormatError("detector: version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kDetectorVersion) + ")");
  }
  json header;
  try {
    header = json::parse(r.take(r.u32()));
  } catch (const json::exception& e) {
    throw FormatError(std::string("detector: bad header: ") + e.what());
  }
  std::vector<std::pair<std::string, Tensor>> sections;
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.take(r.u16()));
    const auto len = r.u32();
    sections.emplace_back(std::move(name), decode_ten(r.take(len)));
  }
  if (r.remaining() != 0) throw FormatError("detector: trailing bytes");
  auto section = [&](const std::string& name) -> const Tensor& {
    for (const auto& [n, t] : sections) {
      if (n == name) return t;
    }
    throw FormatError("detector: missing section '" + name + "'");
  };

  try {
    DetectorModel det;
    det.epsilon = header.at("epsilon").get<double>();
    det.fuser = fuser_from_json(header.at("fuser"));
    det.threshold = header.at("threshold").get<double>();
    det.model_digest = header.at("model_digest").get<std::string>();
    det.seed = header.at("seed").get<std::uint64_t>();
    det.provenance = header.at("provenance");
    const auto& layers = header.at("layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& h = layers[l];
      const auto d = h.at("dim").get<std::size_t>(), c = h.at("classes").get<std::size_t>();
      const Tensor& means = section("layer" + std::to_string(l) + ".means");
      const Tensor& cov = section("layer" + std::to_string(l) + ".covariance");
      if (means.shape() != Shape{c, d} || cov.shape() != Shape{d, d}) {
        throw FormatError("detector: layer " + std::to_string(l) + " sections have the wrong shape");
      }
      std::vector<std::vector<double>> mu(c, std::vector<double>(d));
      for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t j = 0; j < d; ++j) mu[k][j] = means[k * d + j];
      }
      std::vector<double> sigma(cov.data().begin(), cov.data().end());
      det.layers.push_back(ClassGaussianStats::from_parameters(std::move(mu), std::move(sigma),
                                                               h.at("shrinkage").get<double>(),
                                                               h.at("counts").get<std::vector<std::size_t>>(),
                                                               h.at("index").get<std::size_t>()));
      det.taps.push_back({h.at("tap").get<std::string>(), d});
    }
    if (header.contains("lid")) {
      LidDetector lid;
      lid.k = header["lid"].at("k").get<std::size_t>();
      lid.fuser = fuser_from_json(header["lid"].at("fuser"));
      for (std::size_t l = 0; l < det.layers.size(); ++l) lid.references.push_back(section("lid" + std::to_string(l) + ".reference"));
      det.lid = std::move(lid);
    }
    det.validate();
    return det;
  } catch (const json::exception& e) {
    throw FormatError(std::string("detector: bad header: ") + e.what());
  }
}

void save_detector(const std::filesystem::path& path, const DetectorModel& detector) {
  io::write_file_atomic(path, encode_detector(detector));
}

DetectorModel load_detector(const std::filesystem::path& path) { return decode_detector(io::read_file(path)); }

}  // namespace sentinel

#include "sentinel/attacks.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <limits>

#include "sentinel/errors.hpp"
#include "sentinel/io.hpp"

namespace sentinel {

using nlohmann::json;

std::string attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::FGSM: return "FGSM";
    case AttackKind::BIM: return "BIM";
    case AttackKind::DeepFool: return "DeepFool";
    case AttackKind::CW: return "CW";
  }
  return "?";
}

AttackKind parse_attack_kind(std::string_view text) {
  std::string t(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "fgsm") return AttackKind::FGSM;
  if (t == "bim") return AttackKind::BIM;
  if (t == "deepfool") return AttackKind::DeepFool;
  if (t == "cw" || t == "cw_l2" || t == "cw-l2") return AttackKind::CW;
  throw ConfigError("unknown attack kind '" + std::string(text) + "' (expected fgsm, bim, deepfool or cw)");
}

void AttackConfig::validate() const {
  if (!(eps >= 0.0f) || !(step_size >= 0.0f) || !(overshoot >= 0.0) || !(kappa >= 0.0) || !(learning_rate >= 0.0) ||
      !(initial_const > 0.0)) {
    throw ConfigError("attack magnitudes must be non-negative (initial_const positive)");
  }
  if (eps > 1.0f) throw ConfigError("attack eps exceeds the [0,1] pixel range");
  if (kind == AttackKind::BIM && steps == 0) throw ConfigError("BIM needs steps >= 1");
  if (kind == AttackKind::CW && (iterations == 0 || c_search_steps == 0)) {
    throw ConfigError("CW needs iterations >= 1 and c_search_steps >= 1");
  }
}

json AttackConfig::to_json() const {
  json j{{"kind", attack_name(kind)}, {"seed", seed}};
  switch (kind) {
    case AttackKind::FGSM: j["eps"] = eps; break;
    case AttackKind::BIM:
      j["eps"] = eps;
      j["steps"] = steps;
      j["step_size"] = step_size;
      break;
    case AttackKind::DeepFool:
      j["max_iter"] = max_iter;
      j["overshoot"] = overshoot;
      break;
    case AttackKind::CW:
      j["c_search_steps"] = c_search_steps;
      j["kappa"] = kappa;
      j["learning_rate"] = learning_rate;
      j["iterations"] = iterations;
      j["initial_const"] = initial_const;
      break;
  }
  return j;
}

Tensor project_linf(const Tensor& origin, const Tensor& candidate, double eps) {
  if (origin.shape() != candidate.shape()) {
    throw ShapeError("project_linf: " + shape_to_string(origin.shape()) + " vs " +
                     shape_to_string(candidate.shape()));
  }
  Tensor out = candidate;
  const double e = eps;
  const auto ef = static_cast<float>(eps);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const float x = origin[i];
    float hi = x + ef;
    while (static_cast<double>(hi) - x > e) hi = std::nextafter(hi, -std::numeric_limits<float>::infinity());
    float lo = x - ef;
    while (static_cast<double>(x) - lo > e) lo = std::nextafter(lo, std::numeric_limits<float>::infinity());
    out[i] = std::clamp(std::clamp(out[i], lo, hi), 0.0f, 1.0f);
  }
  return out;
}

namespace {

Tensor input_gradient(const Classifier& model, const Tensor& x, const std::function<Var(Var)>& objective) {
  Tape tape;
  const Var in = tape.leaf(x, true);
  const Var z = model.logits(tape, in);
  tape.backward(objective(z));
  return tape.grad(in);
}

std::vector<int> argmax_rows(const Tensor& z) {
  const std::size_t n = z.dim(0), c = z.dim(1);
  std::vector<int> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    const float* row = z.data().data() + s * c;
    out[s] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

std::size_t per_sample(const Tensor& x) { return x.numel() / x.dim(0); }

}  // namespace

Tensor bim(const Classifier& model, const Tensor& x, std::span<const int> labels, float eps, std::size_t steps,
           float step_size) {
  if (steps == 0) throw ConfigError("bim: steps must be >= 1");
  if (!(eps >= 0.0f) || !(step_size >= 0.0f)) throw ConfigError("bim: eps and step_size must be >= 0");
  const auto n = static_cast<float>(x.dim(0));
  Tensor current = x;
  for (std::size_t s = 0; s < steps; ++s) {
    // Summed (not mean) loss so each sample's gradient is its own.
    const Tensor g = input_gradient(model, current, [&](Var z) { return scale(cross_entropy_loss(z, labels), n); });
    Tensor next = current;
    for (std::size_t i = 0; i < next.numel(); ++i) {
      const float sg = g[i] > 0.0f ? 1.0f : (g[i] < 0.0f ? -1.0f : 0.0f);
      next[i] = current[i] + step_size * sg;
    }
    current = project_linf(x, next, eps);
  }
  return current;
}

Tensor fgsm(const Classifier& model, const Tensor& x, std::span<const int> labels, float eps) {
  return bim(model, x, labels, eps, 1, eps);
}

DeepFoolResult deepfool(const Classifier& model, const Tensor& x, std::size_t max_iter, double overshoot,
                        std::span<const int> labels) {
  const std::size_t n = x.dim(0), d = per_sample(x), classes = model.num_classes();
  if (!labels.empty() && labels.size() != n) throw ShapeError("deepfool: label count does not match batch");
  DeepFoolResult res{x, std::vector<std::size_t>(n, 0), std::vector<bool>(n, false), std::vector<bool>(n, false)};
  const std::vector<int> k0 = argmax_rows(model.predict_logits(x));
  std::vector<double> r_total(x.numel(), 0.0);
  std::vector<bool> active(n, true);
  for (std::size_t s = 0; s < n; ++s) {
    if (!labels.empty() && k0[s] != labels[s]) active[s] = false;
  }

  for (std::size_t iter = 0;; ++iter) {
    Tape tape;
    const Var in = tape.leaf(res.adversarial, true);
    const Var z = model.logits(tape, in);
    const std::vector<int> k_now = argmax_rows(z.value());
    bool any = false;
    for (std::size_t s = 0; s < n; ++s) {
      if (!active[s]) continue;
      if (k_now[s] != k0[s]) {
        res.fooled[s] = true;
        active[s] = false;
      } else if (iter == max_iter) {
        active[s] = false;
      } else {
        any = true;
      }
    }
    if (!any) break;

    // Per class k: f_k = Z_k - Z_k0, w_k = grad f_k (all samples in one backward).
    std::vector<double> best_ratio(n, std::numeric_limits<double>::infinity());
    std::vector<double> best_f(n, 0.0);
    std::vector<std::vector<double>> best_w(n);
    for (std::size_t k = 0; k < classes; ++k) {
      Tensor coeff(z.shape(), 0.0f);
      for (std::size_t s = 0; s < n; ++s) {
        if (!active[s] || static_cast<std::size_t>(k0[s]) == k) continue;
        coeff[s * classes + k] = 1.0f;
        coeff[s * classes + static_cast<std::size_t>(k0[s])] = -1.0f;
      }
      tape.clear_grads();
      tape.backward(dot_const(z, coeff));
      const Tensor& g = tape.grad(in);
      for (std::size_t s = 0; s < n; ++s) {
        if (!active[s] || static_cast<std::size_t>(k0[s]) == k) continue;
        const double f = static_cast<double>(z.value()[s * classes + k]) - z.value()[s * classes + k0[s]];
        double norm2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) norm2 += static_cast<double>(g[s * d + i]) * g[s * d + i];
        const double ratio = norm2 > 0.0 ? std::abs(f) / std::sqrt(norm2) : std::numeric_limits<double>::infinity();
        if (ratio < best_ratio[s] || best_w[s].empty()) {
          best_ratio[s] = ratio;
          best_f[s] = f;
          best_w[s].assign(g.data().begin() + static_cast<std::ptrdiff_t>(s * d),
                           g.data().begin() + static_cast<std::ptrdiff_t>((s + 1) * d));
        }
      }
    }
    for (std::size_t s = 0; s < n; ++s) {
      if (!active[s]) continue;
      double norm2 = 0.0;
      for (double v : best_w[s]) norm2 += v * v;
      if (!(norm2 > 0.0)) {
        res.zero_gradient[s] = true;
        active[s] = false;
        continue;
      }
      const double step = std::abs(best_f[s]) / norm2;
      for (std::size_t i = 0; i < d; ++i) r_total[s * d + i] += step * best_w[s][i];
      for (std::size_t i = 0; i < d; ++i) {
        const double v = x[s * d + i] + (1.0 + overshoot) * r_total[s * d + i];
        res.adversarial[s * d + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      res.iterations[s] = iter + 1;
    }
  }
  return res;
}

namespace {

// sum_n c_n * max(Z_true - max_{j != true} Z_j, -kappa)
Var cw_margin(Var logits, std::span<const int> labels, std::span<const double> consts, double kappa) {
  const Tensor& z = logits.value();
  const std::size_t n = z.dim(0), c = z.dim(1);
  std::vector<int> other(n);
  std::vector<bool> live(n);
  double total = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    const auto t = static_cast<std::size_t>(labels[s]);
    std::size_t best = t == 0 ? 1 : 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (j != t && z[s * c + j] > z[s * c + best]) best = j;
    }
    other[s] = static_cast<int>(best);
    const double margin = static_cast<double>(z[s * c + t]) - z[s * c + best];
    live[s] = margin > -kappa;
    total += consts[s] * std::max(margin, -kappa);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<double> cs(consts.begin(), consts.end());
  return logits.tape().record(
      Tensor::scalar(static_cast<float>(total)), {logits},
      [logits, lab, cs, other, live, n, c](const Tensor&, const Tensor& gout, Tape& tape) {
        Tensor g(logits.shape(), 0.0f);
        for (std::size_t s = 0; s < n; ++s) {
          if (!live[s]) continue;
          const auto v = static_cast<float>(cs[s] * gout[0]);
          g[s * c + static_cast<std::size_t>(lab[s])] += v;
          g[s * c + static_cast<std::size_t>(other[s])] -= v;
        }
        tape.accumulate(logits, g);
      },
      "cw_margin");
}

CwResult cw_chunk(const Classifier& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
  const std::size_t n = x.dim(0), d = per_sample(x);
  constexpr double kUpper = 1e10;
  CwResult res{x, std::vector<bool>(n, false), std::vector<double>(n, 0.0), std::vector<bool>(n, false)};
  std::vector<double> best_l2(n, std::numeric_limits<double>::infinity());
  std::vector<double> lo(n, 0.0), hi(n, kUpper), c(n, cfg.initial_const);

  Tensor w0 = x;
  for (float& v : w0.data()) v = static_cast<float>(std::atanh((2.0 * v - 1.0) * (1.0 - 1e-6)));
  const Tensor ones(x.shape(), 1.0f);

  for (std::size_t search = 0; search < cfg.c_search_steps; ++search) {
    Tensor w = w0;
    std::vector<bool> hit(n, false);
    for (std::size_t it = 0; it <= cfg.iterations; ++it) {
      Tape tape;
      const Var wv = tape.leaf(w, true);
      const Var xa = scale(add(tanh(wv), tape.constant(ones)), 0.5f);
      const Var delta = sub(xa, tape.constant(x));
      const Var z = model.logits(tape, xa);
      const Var objective = add(sum(mul(delta, delta)), cw_margin(z, labels, c, cfg.kappa));
      const auto pred = argmax_rows(z.value());
      for (std::size_t s = 0; s < n; ++s) {
        if (pred[s] == labels[s]) continue;
        hit[s] = true;
        double l2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          const double dv = static_cast<double>(xa.value()[s * d + i]) - x[s * d + i];
          l2 += dv * dv;
        }
        if (l2 < best_l2[s]) {
          best_l2[s] = l2;
          std::copy_n(xa.value().data().begin() + static_cast<std::ptrdiff_t>(s * d), d,
                      res.adversarial.data().begin() + static_cast<std::ptrdiff_t>(s * d));
        }
      }
      if (it == cfg.iterations) break;
      tape.backward(objective);
      const Tensor& g = tape.grad(wv);
      for (std::size_t i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(w[i] - cfg.learning_rate * g[i]);
    }
    for (std::size_t s = 0; s < n; ++s) {
      if (hit[s]) {
        hi[s] = std::min(hi[s], c[s]);
        c[s] = (lo[s] + hi[s]) / 2.0;
      } else {
        lo[s] = std::max(lo[s], c[s]);
        c[s] = hi[s] < kUpper ? (lo[s] + hi[s]) / 2.0 : c[s] * 10.0;
      }
    }
  }
  for (std::size_t s = 0; s < n; ++s) {
    res.success[s] = std::isfinite(best_l2[s]);
    res.l2[s] = res.success[s] ? std::sqrt(best_l2[s]) : 0.0;
  }
  return res;
}

}  // namespace

CwResult cw_l2(const Classifier& model, const Tensor& x, std::span<const int> labels, const AttackConfig& config) {
  if (config.iterations == 0 || config.c_search_steps == 0) throw ConfigError("cw: iterations and c_search_steps >= 1");
  if (labels.size() != x.dim(0)) throw ShapeError("cw: label count does not match batch");
  try {
    return cw_chunk(model, x, labels, config);
  } catch (const NumericError&) {
    // Isolate the offending samples and keep the rest.
  }
  const std::size_t n = x.dim(0);
  CwResult res{x, std::vector<bool>(n, false), std::vector<double>(n, 0.0), std::vector<bool>(n, false)};
  const std::size_t d = per_sample(x);
  for (std::size_t s = 0; s < n; ++s) {
    try {
      const CwResult one = cw_chunk(model, x.rows(s, s + 1), labels.subspan(s, 1), config);
      std::copy_n(one.adversarial.data().begin(), d, res.adversarial.data().begin() + static_cast<std::ptrdiff_t>(s * d));
      res.success[s] = one.success[0];
      res.l2[s] = one.l2[0];
    } catch (const NumericError&) {
      res.aborted[s] = true;
    }
  }
  return res;
}

// ---- batches -------------------------------------------------------------------

double AdversarialBatch::success_rate() const {
  if (success.empty()) return 0.0;
  return static_cast<double>(std::count(success.begin(), success.end(), true)) /
         static_cast<double>(success.size());
}

namespace {

Tensor select_rows(const Tensor& t, const std::vector<bool>& keep) {
  std::vector<Tensor> rows;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) rows.push_back(t.row(i));
  }
  if (rows.empty()) return Tensor{};
  return stack(rows);
}

}  // namespace

Tensor AdversarialBatch::successful_perturbed() const { return select_rows(perturbed, success); }
Tensor AdversarialBatch::successful_original() const { return select_rows(original, success); }

AdversarialBatch run_attack(const Classifier& model, const LabeledDataset& data, const AttackConfig& config,
                            std::size_t max_samples) {
  config.validate();
  AdversarialBatch batch;
  batch.config = config;
  constexpr std::size_t kChunk = 32;
  for (std::size_t begin = 0; begin < data.size(); begin += kChunk) {
    const std::size_t end = std::min(data.size(), begin + kChunk);
    const auto pred = model.predict(data.batch(begin, end));
    for (std::size_t i = begin; i < end; ++i) {
      if (pred[i - begin] == data.items[i].label) batch.source_indices.push_back(i);
      if (max_samples && batch.source_indices.size() == max_samples) break;
    }
    if (max_samples && batch.source_indices.size() == max_samples) break;
  }
  if (batch.source_indices.empty()) return batch;

  std::vector<Tensor> adv_parts;
  for (std::size_t begin = 0; begin < batch.source_indices.size(); begin += kChunk) {
    const std::size_t end = std::min(batch.source_indices.size(), begin + kChunk);
    const std::span<const std::size_t> idx(batch.source_indices.data() + begin, end - begin);
    const Tensor x = data.batch(idx);
    std::vector<int> y;
    for (auto i : idx) y.push_back(data.items[i].label);
    switch (config.kind) {
      case AttackKind::FGSM: adv_parts.push_back(fgsm(model, x, y, config.eps)); break;
      case AttackKind::BIM: adv_parts.push_back(bim(model, x, y, config.eps, config.steps, config.step_size)); break;
      case AttackKind::DeepFool: adv_parts.push_back(deepfool(model, x, config.max_iter, config.overshoot, y).adversarial); break;
      case AttackKind::CW: adv_parts.push_back(cw_l2(model, x, y, config).adversarial); break;
    }
  }
  batch.original = data.batch(batch.source_indices);
  batch.perturbed = concat_rows(adv_parts);
  for (auto i : batch.source_indices) batch.true_labels.push_back(data.items[i].label);
  batch.original_pred = batch.true_labels;  // only correctly classified inputs are attacked
  for (std::size_t begin = 0; begin < batch.size(); begin += kChunk) {
    const std::size_t end = std::min(batch.size(), begin + kChunk);
    const auto p = model.predict(batch.perturbed.rows(begin, end));
    batch.adversarial_pred.insert(batch.adversarial_pred.end(), p.begin(), p.end());
  }
  const std::size_t d = per_sample(batch.original);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    batch.success.push_back(batch.adversarial_pred[s] != batch.original_pred[s]);
    double l2 = 0.0, linf = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double dv = static_cast<double>(batch.perturbed[s * d + i]) - batch.original[s * d + i];
      l2 += dv * dv;
      linf = std::max(linf, std::abs(dv));
    }
    batch.l2.push_back(std::sqrt(l2));
    batch.linf.push_back(linf);
  }
  return batch;
}

void save_adversarial_batch(const std::filesystem::path& dir, const AdversarialBatch& batch,
                            const json& provenance) {
  std::filesystem::create_directories(dir);
  json samples = json::array();
  for (std::size_t s = 0; s < batch.size(); ++s) {
    samples.push_back({{"index", batch.source_indices[s]},
                       {"true_label", batch.true_labels[s]},
                       {"original_pred", batch.original_pred[s]},
                       {"adversarial_pred", batch.adversarial_pred[s]},
                       {"success", static_cast<bool>(batch.success[s])},
                       {"l2", batch.l2[s]},
                       {"linf", batch.linf[s]}});
  }
  const json manifest{{"attack", batch.config.to_json()},
                      {"count", batch.size()},
                      {"success_rate", batch.success_rate()},
                      {"samples", samples},
                      {"provenance", provenance}};
  if (batch.size() > 0) {
    save_ten(dir / "original.ten", batch.original);
    save_ten(dir / "adversarial.ten", batch.perturbed);
  }
  io::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

AdversarialBatch load_adversarial_batch(const std::filesystem::path& dir) {
  const json manifest = json::parse(io::read_file(dir / "manifest.json"));
  AdversarialBatch batch;
  const auto& a = manifest.at("attack");
  batch.config.kind = parse_attack_kind(a.at("kind").get<std::string>());
  batch.config.seed = a.value("seed", std::uint64_t{0});
  if (a.contains("eps")) batch.config.eps = a.at("eps").get<float>();
  if (a.contains("steps")) batch.config.steps = a.at("steps").get<std::size_t>();
  if (a.contains("step_size")) batch.config.step_size = a.at("step_size").get<float>();
  if (a.contains("max_iter")) batch.config.max_iter = a.at("max_iter").get<std::size_t>();
  if (a.contains("overshoot")) batch.config.overshoot = a.at("overshoot").get<double>();
  if (a.contains("c_search_steps")) batch.config.c_search_steps = a.at("c_search_steps").get<std::size_t>();
  if (a.contains("kappa")) batch.config.kappa = a.at("kappa").get<double>();
  if (a.contains("learning_rate")) batch.config.learning_rate = a.at("learning_rate").get<double>();
  if (a.contains("iterations")) batch.config.iterations = a.at("iterations").get<std::size_t>();
  if (a.contains("initial_const")) batch.config.initial_const = a.at("initial_const").get<double>();
  for (const auto& s : manifest.at("samples")) {
    batch.source_indices.push_back(s.at("index").get<std::size_t>());
    batch.true_labels.push_back(s.at("true_label").get<int>());
    batch.original_pred.push_back(s.at("original_pred").get<int>());
    batch.adversarial_pred.push_back(s.at("adversarial_pred").get<int>());
    batch.success.push_back(s.at("success").get<bool>());
    batch.l2.push_back(s.at("l2").get<double>());
    batch.linf.push_back(s.at("linf").get<double>());
  }
  if (batch.size() > 0) {
    batch.original = load_ten(dir / "original.ten");
    batch.perturbed = load_ten(dir / "adversarial.ten");
    if (batch.original.dim(0) != batch.size() || batch.perturbed.shape() != batch.original.shape()) {
      throw FormatError(dir.string() + ": tensors disagree with manifest");
    }
  }
  return batch;
}

}  // namespace sentinel

#include "sentinel/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <tuple>

namespace sentinel {

using nlohmann::json;

std::vector<ScoredSample> make_samples(std::span<const double> positive_scores,
                                       std::span<const double> negative_scores) {
  std::vector<ScoredSample> out;
  out.reserve(positive_scores.size() + negative_scores.size());
  for (double s : positive_scores) out.push_back({s, true});
  for (double s : negative_scores) out.push_back({s, false});
  return out;
}

namespace {

// Cumulative counts after each group of tied scores, highest score first.
struct Step {
  double threshold;
  std::size_t tp;
  std::size_t fp;
};

struct Sweep {
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::vector<Step> steps;
};

Sweep sweep(std::span<const ScoredSample> samples) {
  Sweep sw;
  for (const auto& s : samples) {
    if (!std::isfinite(s.score)) throw std::invalid_argument("metric input contains a non-finite score");
    (s.is_positive ? sw.positives : sw.negatives) += 1;
  }
  if (sw.positives == 0 || sw.negatives == 0) {
    throw std::invalid_argument("metrics need at least one positive and one negative sample");
  }
  std::vector<ScoredSample> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double t = sorted[i].score;
    while (i < sorted.size() && sorted[i].score == t) {
      (sorted[i].is_positive ? tp : fp) += 1;
      ++i;
    }
    sw.steps.push_back({t, tp, fp});
  }
  return sw;
}

}  // namespace

std::vector<RocPoint> roc_points(std::span<const ScoredSample> samples) {
  const Sweep sw = sweep(samples);
  const auto p = static_cast<double>(sw.positives), n = static_cast<double>(sw.negatives);
  std::vector<RocPoint> pts{{0.0, 0.0}};
  for (const auto& st : sw.steps) pts.push_back({static_cast<double>(st.fp) / n, static_cast<double>(st.tp) / p});
  return pts;
}

double auroc(std::span<const ScoredSample> samples) {
  const auto pts = roc_points(samples);
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    area += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) / 2.0;
  }
  return area;
}

double tnr_at_tpr(std::span<const ScoredSample> samples, double tpr_target) {
  if (!(tpr_target > 0.0 && tpr_target <= 1.0)) throw std::invalid_argument("tpr_target must be in (0,1]");
  const Sweep sw = sweep(samples);
  // Smallest TP count meeting the target, robust to rounding of target * P.
  const auto needed = static_cast<std::size_t>(std::ceil(tpr_target * static_cast<double>(sw.positives) - 1e-9));
  for (const auto& st : sw.steps) {
    if (st.tp >= needed) {
      return 1.0 - static_cast<double>(st.fp) / static_cast<double>(sw.negatives);
    }
  }
  return 0.0;  // unreachable: the last step has tp == positives
}

double aupr(std::span<const ScoredSample> samples, PositiveClass positive) {
  std::vector<ScoredSample> oriented(samples.begin(), samples.end());
  if (positive == PositiveClass::Out) {
    for (auto& s : oriented) {
      s.score = -s.score;
      s.is_positive = !s.is_positive;
    }
  }
  const Sweep sw = sweep(oriented);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (const auto& st : sw.steps) {
    const double recall = static_cast<double>(st.tp) / static_cast<double>(sw.positives);
    const double precision = static_cast<double>(st.tp) / static_cast<double>(st.tp + st.fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

double detection_accuracy(std::span<const ScoredSample> samples) {
  const Sweep sw = sweep(samples);
  double best = 0.5;  // threshold above every score: TPR 0, TNR 1
  for (const auto& st : sw.steps) {
    const double tpr = static_cast<double>(st.tp) / static_cast<double>(sw.positives);
    const double tnr = 1.0 - static_cast<double>(st.fp) / static_cast<double>(sw.negatives);
    best = std::max(best, 0.5 * (tpr + tnr));
  }
  return best;
}

MetricSet compute_metrics(std::span<const ScoredSample> samples) {
  MetricSet m;
  m.tnr_at_tpr95 = tnr_at_tpr(samples, 0.95);
  m.auroc = auroc(samples);
  m.aupr_in = aupr(samples, PositiveClass::In);
  m.aupr_out = aupr(samples, PositiveClass::Out);
  m.detection_accuracy = detection_accuracy(samples);
  for (const auto& s : samples) (s.is_positive ? m.n_positive : m.n_negative) += 1;
  return m;
}

// ---- reports -----------------------------------------------------------------

json report_to_json(const EvalReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"model", r.model},
                    {"detector", r.detector},
                    {"source", r.source},
                    {"tnr_at_tpr95", r.metrics.tnr_at_tpr95},
                    {"auroc", r.metrics.auroc},
                    {"aupr_in", r.metrics.aupr_in},
                    {"aupr_out", r.metrics.aupr_out},
                    {"detection_accuracy", r.metrics.detection_accuracy},
                    {"n_positive", r.metrics.n_positive},
                    {"n_negative", r.metrics.n_negative}});
  }
  return {{"rows", rows}, {"config_digest", report.config_digest}, {"seed", report.seed}, {"config", report.config}};
}

EvalReport report_from_json(const json& doc) {
  EvalReport rep;
  rep.config_digest = doc.at("config_digest").get<std::string>();
  rep.seed = doc.at("seed").get<std::uint64_t>();
  rep.config = doc.value("config", json::object());
  for (const auto& r : doc.at("rows")) {
    ReportRow row;
    row.model = r.at("model").get<std::string>();
    row.detector = r.at("detector").get<std::string>();
    row.source = r.at("source").get<std::string>();
    row.metrics.tnr_at_tpr95 = r.at("tnr_at_tpr95").get<double>();
    row.metrics.auroc = r.at("auroc").get<double>();
    row.metrics.aupr_in = r.at("aupr_in").get<double>();
    row.metrics.aupr_out = r.at("aupr_out").get<double>();
    row.metrics.detection_accuracy = r.at("detection_accuracy").get<double>();
    row.metrics.n_positive = r.at("n_positive").get<std::size_t>();
    row.metrics.n_negative = r.at("n_negative").get<std::size_t>();
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

std::string render_json(const EvalReport& report) { return report_to_json(report).dump(2) + "\n"; }

namespace {

const std::vector<std::string>& detector_order() {
  static const std::vector<std::string> order{"Baseline", "ODIN", "LID", "Mahalanobis"};
  return order;
}

// Canonical entries first (all of them when `always`), then extras by first appearance.
std::vector<std::string> ordered(const std::vector<std::string>& canonical, bool always,
                                 const std::vector<std::string>& seen) {
  std::vector<std::string> out;
  for (const auto& c : canonical) {
    if (always || std::find(seen.begin(), seen.end(), c) != seen.end()) out.push_back(c);
  }
  for (const auto& s : seen) {
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  }
  return out;
}

double metric_value(const MetricSet& m, const std::string& name) {
  if (name == "tnr_at_tpr95") return m.tnr_at_tpr95;
  if (name == "auroc") return m.auroc;
  if (name == "aupr_in") return m.aupr_in;
  if (name == "aupr_out") return m.aupr_out;
  if (name == "detection_accuracy") return m.detection_accuracy;
  throw std::invalid_argument("unknown metric '" + name + "'");
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

}  // namespace

std::string render_csv(const EvalReport& report) {
  std::vector<std::string> models, detectors, sources;
  auto note = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  for (const auto& r : report.rows) {
    note(models, r.model);
    note(detectors, r.detector);
    note(sources, r.source);
  }
  detectors = ordered(detector_order(), false, detectors);
  sources = ordered(table_attack_columns(), true, sources);

  std::map<std::tuple<std::string, std::string, std::string>, const MetricSet*> cells;
  for (const auto& r : report.rows) cells[{r.model, r.detector, r.source}] = &r.metrics;

  static const std::pair<const char*, const char*> kMetrics[] = {{"TNR at TPR 95%", "tnr_at_tpr95"},
                                                                 {"AUROC", "auroc"},
                                                                 {"AUPR in", "aupr_in"},
                                                                 {"AUPR out", "aupr_out"},
                                                                 {"Detection accuracy", "detection_accuracy"}};
  std::string out = "Model,Metric";
  for (const auto& d : detectors) {
    for (const auto& s : sources) out += "," + d + ":" + s;
  }
  out += "\n";
  for (const auto& m : models) {
    for (const auto& [label, key] : kMetrics) {
      out += m + "," + label;
      for (const auto& d : detectors) {
        for (const auto& s : sources) {
          out += ",";
          auto it = cells.find({m, d, s});
          if (it != cells.end()) out += percent(metric_value(*it->second, key));
        }
      }
      out += "\n";
    }
  }
  return out;
}

std::vector<std::string> check_floors(const EvalReport& report, std::span<const MetricFloor> floors) {
  std::vector<std::string> violations;
  for (const auto& f : floors) {
    bool found = false;
    for (const auto& r : report.rows) {
      if (r.detector != f.detector || r.source != f.source) continue;
      found = true;
      const double v = metric_value(r.metrics, f.metric);
      if (v < f.min) {
        violations.push_back(r.model + "/" + f.detector + "/" + f.source + ": " + f.metric + " = " +
                             std::to_string(v) + " < floor " + std::to_string(f.min));
      }
    }
    if (!found) violations.push_back(f.detector + "/" + f.source + ": no such row for floor on " + f.metric);
  }
  return violations;
}

}  // namespace sentinel

#include "sentinel/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <set>

#include "sentinel/errors.hpp"
#include "sentinel/io.hpp"

namespace sentinel {

using nlohmann::json;

namespace {

constexpr const char* kModelName = "SmallCNN";

// Typed access to one config object; every key read is remembered so the
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError("config: '" + label() + "' must be an object");
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!doc_.contains(key)) return fallback;
    try {
      return doc_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: '" + name(key) + "' has the wrong type");
    }
  }

  double number(const std::string& key, double fallback) {
    seen_.insert(key);
    if (!doc_.contains(key)) return fallback;
    if (!doc_.at(key).is_number()) throw ConfigError("config: '" + name(key) + "' must be a number");
    return doc_.at(key).get<double>();
  }

  std::size_t count(const std::string& key, std::size_t fallback) {
    seen_.insert(key);
    if (!doc_.contains(key)) return fallback;
    const json& v = doc_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ConfigError("config: '" + name(key) + "' must be a non-negative integer");
    }
    return v.get<std::size_t>();
  }

  std::optional<json> child(const std::string& key) {
    seen_.insert(key);
    if (!doc_.contains(key) || doc_.at(key).is_null()) return std::nullopt;
    return doc_.at(key);
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : doc_.items()) {
      if (!seen_.count(key)) throw ConfigError("config: unknown key '" + name(key) + "'");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }

  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

json attack_plan_json(const AttackPlan& plan) {
  json j = plan.config.to_json();
  j.erase("seed");
  j["max_samples"] = plan.max_samples;
  return j;
}

AttackPlan attack_plan_from_json(const json& doc, const std::string& path, std::uint64_t seed) {
  Section s(doc, path);
  AttackPlan plan;
  plan.config.kind = parse_attack_kind(s.get<std::string>("kind", ""));
  AttackConfig& c = plan.config;
  c.seed = seed;
  c.eps = static_cast<float>(s.number("eps", c.eps));
  c.steps = s.count("steps", c.steps);
  c.step_size = static_cast<float>(s.number("step_size", c.step_size));
  c.max_iter = s.count("max_iter", c.max_iter);
  c.overshoot = s.number("overshoot", c.overshoot);
  c.c_search_steps = s.count("c_search_steps", c.c_search_steps);
  c.kappa = s.number("kappa", c.kappa);
  c.learning_rate = s.number("learning_rate", c.learning_rate);
  c.iterations = s.count("iterations", c.iterations);
  c.initial_const = s.number("initial_const", c.initial_const);
  plan.max_samples = s.count("max_samples", c.kind == AttackKind::CW ? kDefaultCwSamples : 0);
  s.finish();
  return plan;
}

void ensure_fresh(const std::filesystem::path& path) {
  if (std::filesystem::exists(path)) {
    throw ConfigError(path.string() + " already exists; artifacts are write-once, choose a fresh --out");
  }
}

void write_json(const std::filesystem::path& path, const json& doc) {
  io::write_file_atomic(path, doc.dump(2) + "\n");
}

LabeledDataset load_dataset(const std::string& root, const std::string& key, const RunConfig& config,
                            std::vector<std::string>& warnings) {
  if (!std::filesystem::is_directory(root)) {
    throw ConfigError("config: '" + key + "' directory '" + root + "' does not exist");
  }
  LoadReport report;
  LabeledDataset ds = load_image_dir(root, {config.strict, config.image_size}, &report);
  warnings.insert(warnings.end(), report.warnings.begin(), report.warnings.end());
  return ds;
}

SmallCNN load_model(const RunConfig& config, const std::filesystem::path& checkpoint, std::size_t num_classes) {
  if (!std::filesystem::is_regular_file(checkpoint)) {
    throw ConfigError("checkpoint '" + checkpoint.string() + "' does not exist (run `train` first)");
  }
  ModelSpec spec;
  spec.input_size = config.image_size;
  spec.num_classes = num_classes;
  return load_checkpoint(checkpoint, spec).model;
}

json provenance(const RunConfig& config) { return {{"config_digest", config.digest()}, {"seed", config.seed}}; }

Tensor all_images(const LabeledDataset& ds) { return ds.batch(0, ds.size()); }

void print_warnings(const PreparedData& data) {
  for (const auto& w : data.warnings) std::cerr << "warning: " << w << "\n";
}

}  // namespace

// ---- config --------------------------------------------------------------------

std::vector<AttackPlan> RunConfig::default_attacks() {
  std::vector<AttackPlan> plans;
  for (AttackKind k : {AttackKind::FGSM, AttackKind::BIM, AttackKind::DeepFool, AttackKind::CW}) {
    AttackPlan p;
    p.config.kind = k;
    // CW costs ~500 forward/backward passes per sample; cap it for desk runs.
    if (k == AttackKind::CW) p.max_samples = kDefaultCwSamples;
    plans.push_back(p);
  }
  return plans;
}

RunConfig RunConfig::from_json(const json& doc) {
  RunConfig c;
  Section root(doc, "");
  c.seed = root.get<std::uint64_t>("seed", c.seed);
  c.out = root.get<std::string>("out", c.out.string());

  if (auto d = root.child("data")) {
    Section s(*d, "data");
    c.in_dist = s.get<std::string>("in_dist", "");
    c.ood = s.get<std::string>("ood", "");
    c.strict = s.get<bool>("strict", c.strict);
    c.image_size = s.count("image_size", c.image_size);
    c.ood_validation_fraction = s.number("ood_validation_fraction", c.ood_validation_fraction);
    if (auto syn = s.child("synthetic")) {
      Section ss(*syn, "data.synthetic");
      c.synth_per_class = ss.count("n_per_class", c.synth_per_class);
      c.synth_ood_per_class = ss.count("ood_n_per_class", c.synth_ood_per_class);
      ss.finish();
    }
    if (auto sp = s.child("split")) {
      Section ss(*sp, "data.split");
      c.split.train = ss.number("train", c.split.train);
      c.split.val = ss.number("val", c.split.val);
      c.split.test = ss.number("test", c.split.test);
      ss.finish();
    }
    s.finish();
  }

  if (auto m = root.child("model")) {
    Section s(*m, "model");
    if (s.get<std::string>("architecture", kModelName) != kModelName) {
      throw ConfigError("config: 'model.architecture' must be \"SmallCNN\"");
    }
    c.train.epochs = s.count("epochs", c.train.epochs);
    c.train.lr = s.number("lr", c.train.lr);
    c.train.momentum = s.number("momentum", c.train.momentum);
    c.train.batch_size = s.count("batch_size", c.train.batch_size);
    if (auto a = s.child("augment")) {
      Section as(*a, "model.augment");
      AugmentConfig aug;
      aug.rotate_deg_max = as.number("rotate_deg_max", 0.0);
      aug.shear_max = as.number("shear_max", 0.0);
      aug.translate_frac_max = as.number("translate_frac_max", 0.0);
      aug.zoom_range = as.number("zoom_range", 0.0);
      as.finish();
      c.train.augment = aug;
    }
    s.finish();
  }

  if (auto d = root.child("detector")) {
    Section s(*d, "detector");
    c.epsilon_grid = s.get<std::vector<double>>("epsilon_grid", c.epsilon_grid);
    if (auto sh = s.child("shrinkage")) {
      if (!sh->is_number()) throw ConfigError("config: 'detector.shrinkage' must be a number or null");
      c.shrinkage = sh->get<double>();
    }
    c.lid_k = s.count("lid_k", c.lid_k);
    c.lid_reference = s.count("lid_reference", c.lid_reference);
    c.odin_temperature = s.number("odin_temperature", c.odin_temperature);
    c.odin_eps = s.number("odin_eps", c.odin_eps);
    s.finish();
  }

  if (auto a = root.child("attacks")) {
    if (!a->is_array()) throw ConfigError("config: 'attacks' must be an array");
    c.attacks.clear();
    for (std::size_t i = 0; i < a->size(); ++i) {
      c.attacks.push_back(attack_plan_from_json((*a)[i], "attacks[" + std::to_string(i) + "]", c.seed));
    }
  }

  if (auto f = root.child("figure")) {
    Section s(*f, "figure");
    c.figure_eps = s.get<std::vector<double>>("eps", c.figure_eps);
    s.finish();
  }

  if (auto fl = root.child("floors")) {
    if (!fl->is_array()) throw ConfigError("config: 'floors' must be an array");
    for (std::size_t i = 0; i < fl->size(); ++i) {
      Section s((*fl)[i], "floors[" + std::to_string(i) + "]");
      MetricFloor floor;
      floor.detector = s.get<std::string>("detector", "");
      floor.source = s.get<std::string>("source", "");
      floor.metric = s.get<std::string>("metric", "");
      floor.min = s.number("min", 0.0);
      s.finish();
      c.floors.push_back(floor);
    }
  }
  root.finish();
  for (auto& plan : c.attacks) plan.config.seed = c.seed;
  c.validate();
  return c;
}

json RunConfig::to_json() const {
  json attacks_json = json::array();
  for (const auto& p : attacks) attacks_json.push_back(attack_plan_json(p));
  json floors_json = json::array();
  for (const auto& f : floors) {
    floors_json.push_back({{"detector", f.detector}, {"source", f.source}, {"metric", f.metric}, {"min", f.min}});
  }
  json model{{"architecture", kModelName},
             {"epochs", train.epochs},
             {"lr", train.lr},
             {"momentum", train.momentum},
             {"batch_size", train.batch_size},
             {"augment", nullptr}};
  if (train.augment) {
    model["augment"] = {{"rotate_deg_max", train.augment->rotate_deg_max},
                        {"shear_max", train.augment->shear_max},
                        {"translate_frac_max", train.augment->translate_frac_max},
                        {"zoom_range", train.augment->zoom_range}};
  }
  return {
      {"seed", seed},
      {"out", out.string()},
      {"data",
       {{"in_dist", in_dist},
        {"ood", ood},
        {"strict", strict},
        {"image_size", image_size},
        {"ood_validation_fraction", ood_validation_fraction},
        {"synthetic", {{"n_per_class", synth_per_class}, {"ood_n_per_class", synth_ood_per_class}}},
        {"split", {{"train", split.train}, {"val", split.val}, {"test", split.test}}}}},
      {"model", model},
      {"detector",
       {{"epsilon_grid", epsilon_grid},
        {"shrinkage", shrinkage ? json(*shrinkage) : json(nullptr)},
        {"lid_k", lid_k},
        {"lid_reference", lid_reference},
        {"odin_temperature", odin_temperature},
        {"odin_eps", odin_eps}}},
      {"attacks", attacks_json},
      {"figure", {{"eps", figure_eps}}},
      {"floors", floors_json},
  };
}

void RunConfig::validate() const {
  if (image_size < 8) throw ConfigError("config: 'data.image_size' must be >= 8");
  if (in_dist.empty() && synth_per_class == 0) throw ConfigError("config: 'data.synthetic.n_per_class' must be > 0");
  if (!(ood_validation_fraction > 0.0 && ood_validation_fraction < 1.0)) {
    throw ConfigError("config: 'data.ood_validation_fraction' must be in (0,1)");
  }
  SplitSpec s = split;
  try {
    s.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: 'data.split': ") + e.what());
  }
  if (train.epochs == 0) throw ConfigError("config: 'model.epochs' must be >= 1");
  if (train.batch_size == 0) throw ConfigError("config: 'model.batch_size' must be >= 1");
  if (!(train.lr > 0.0)) throw ConfigError("config: 'model.lr' must be > 0");
  if (!(train.momentum >= 0.0 && train.momentum < 1.0)) throw ConfigError("config: 'model.momentum' must be in [0,1)");
  if (train.augment) train.augment->validate();
  if (epsilon_grid.empty()) throw ConfigError("config: 'detector.epsilon_grid' is empty");
  for (double e : epsilon_grid) {
    if (!(e >= 0.0) || !std::isfinite(e)) throw ConfigError("config: 'detector.epsilon_grid' entries must be >= 0");
  }
  if (shrinkage && !(*shrinkage > 0.0)) throw ConfigError("config: 'detector.shrinkage' must be > 0");
  if (lid_k < 2 || lid_reference <= lid_k) {
    throw ConfigError("config: need 2 <= 'detector.lid_k' < 'detector.lid_reference'");
  }
  if (!(odin_temperature >= 1.0)) throw ConfigError("config: 'detector.odin_temperature' must be >= 1");
  if (!(odin_eps >= 0.0)) throw ConfigError("config: 'detector.odin_eps' must be >= 0");
  std::set<std::string> names;
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    try {
      attacks[i].config.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("config: 'attacks[" + std::to_string(i) + "]': " + e.what());
    }
    if (!names.insert(attack_name(attacks[i].config.kind)).second) {
      throw ConfigError("config: attack " + attack_name(attacks[i].config.kind) + " listed twice");
    }
  }
  if (figure_eps.empty()) throw ConfigError("config: 'figure.eps' is empty");
  for (double e : figure_eps) {
    if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("config: 'figure.eps' entries must be in [0,1]");
  }
  static const std::set<std::string> metrics{"tnr_at_tpr95", "auroc", "aupr_in", "aupr_out", "detection_accuracy"};
  for (const auto& f : floors) {
    if (!metrics.count(f.metric)) throw ConfigError("config: unknown floor metric '" + f.metric + "'");
  }
  if (!in_dist.empty() && !std::filesystem::is_directory(in_dist)) {
    throw ConfigError("config: 'data.in_dist' directory '" + in_dist + "' does not exist");
  }
  if (!ood.empty() && ood != "self" && !std::filesystem::is_directory(ood)) {
    throw ConfigError("config: 'data.ood' directory '" + ood + "' does not exist");
  }
}

std::string RunConfig::digest() const {
  json doc = to_json();
  doc.erase("out");
  return io::sha256_hex(doc.dump());
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& config_path, const Overrides& o) {
  json doc = json::object();
  if (config_path) {
    if (!std::filesystem::is_regular_file(*config_path)) {
      throw ConfigError("config file '" + config_path->string() + "' does not exist");
    }
    try {
      doc = json::parse(io::read_file(*config_path));
    } catch (const json::parse_error& e) {
      throw ConfigError("config file '" + config_path->string() + "' is not valid JSON: " + e.what());
    }
  }
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  if (o.seed) doc["seed"] = *o.seed;
  if (o.out) doc["out"] = o.out->string();
  if (o.strict) doc["data"]["strict"] = *o.strict;
  if (o.n_per_class) doc["data"]["synthetic"]["n_per_class"] = *o.n_per_class;
  if (o.ood) doc["data"]["ood"] = *o.ood;
  RunConfig c = RunConfig::from_json(doc);

  if (o.kind) {
    const AttackKind kind = parse_attack_kind(*o.kind);
    std::vector<AttackPlan> kept;
    for (const auto& p : c.attacks) {
      if (p.config.kind == kind) kept.push_back(p);
    }
    if (kept.empty()) {
      AttackPlan p;
      p.config.kind = kind;
      p.config.seed = c.seed;
      kept.push_back(p);
    }
    c.attacks = kept;
  }
  for (auto& p : c.attacks) {
    const bool linf = p.config.kind == AttackKind::FGSM || p.config.kind == AttackKind::BIM;
    if (o.eps && linf) p.config.eps = static_cast<float>(*o.eps);
    if (o.steps && p.config.kind == AttackKind::BIM) p.config.steps = *o.steps;
  }
  if (o.eps && std::find(c.figure_eps.begin(), c.figure_eps.end(), *o.eps) == c.figure_eps.end()) {
    c.figure_eps.push_back(*o.eps);
    std::sort(c.figure_eps.begin(), c.figure_eps.end());
  }
  c.validate();
  return c;
}

// ---- data ----------------------------------------------------------------------

PreparedData prepare_data(const RunConfig& config) {
  PreparedData out;
  LabeledDataset ds = config.in_dist.empty()
                          ? synth_cells(config.synth_per_class, config.seed, false, config.image_size)
                          : load_dataset(config.in_dist, "data.in_dist", config, out.warnings);
  SplitSpec spec = config.split;
  spec.seed = config.seed;
  out.splits = split(ds, spec);

  if (config.ood == "self") {
    out.ood_is_self = true;
    out.ood_val = out.splits.val;
    out.ood_test = out.splits.test;
    return out;
  }
  std::optional<LabeledDataset> ood;
  if (config.ood.empty() && config.in_dist.empty()) {
    ood = synth_cells(config.synth_ood_per_class, config.seed, true, config.image_size);
  } else if (!config.ood.empty()) {
    ood = load_dataset(config.ood, "data.ood", config, out.warnings);
  }
  if (!ood) return out;
  if (ood->size() < 2) throw ConfigError("OOD set needs at least 2 images");
  std::vector<std::size_t> idx(ood->size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(config.seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto n_val = static_cast<std::size_t>(std::floor(config.ood_validation_fraction * static_cast<double>(idx.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, idx.size() - 1);
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> test(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(val.begin(), val.end());
  std::sort(test.begin(), test.end());
  out.ood_val = ood->subset(val);
  out.ood_test = ood->subset(test);
  return out;
}

std::vector<std::string> abnormality_sources(const RunConfig& config) {
  std::vector<std::string> out;
  if (!config.ood.empty() || config.in_dist.empty()) out.push_back("OOD");
  for (const auto& p : config.attacks) out.push_back(attack_name(p.config.kind));
  return out;
}

// ---- commands ------------------------------------------------------------------

std::filesystem::path cmd_train(const RunConfig& config) {
  const auto ckpt = config.checkpoint_path();
  const auto history_path = config.out / "history.json";
  ensure_fresh(ckpt);
  ensure_fresh(history_path);
  const PreparedData data = prepare_data(config);
  print_warnings(data);
  ModelSpec spec;
  spec.input_size = config.image_size;
  spec.num_classes = data.splits.train.num_classes();
  TrainConfig tc = config.train;
  tc.seed = config.seed;
  const TrainResult result = train(SmallCNN(spec, config.seed), data.splits.train, data.splits.val, tc);

  std::filesystem::create_directories(config.out);
  CheckpointMeta meta;
  meta.seed = config.seed;
  meta.epochs = tc.epochs;
  meta.final_val_accuracy = result.best_val_accuracy;
  meta.extra = {{"config_digest", config.digest()}, {"best_epoch", result.best_epoch}};
  save_checkpoint(ckpt, result.model, meta);

  json epochs = json::array();
  for (const auto& e : result.history) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"val_loss", e.val_loss},
                      {"val_accuracy", e.val_accuracy}});
  }
  json history = provenance(config);
  history["best_epoch"] = result.best_epoch;
  history["best_val_accuracy"] = result.best_val_accuracy;
  history["test_accuracy"] = accuracy(result.model, data.splits.test);
  history["history"] = epochs;
  history["model_digest"] = result.model.digest();
  write_json(history_path, history);
  return ckpt;
}

std::filesystem::path cmd_fit_detector(const RunConfig& config, const std::filesystem::path& checkpoint) {
  const auto dir = config.detector_dir();
  ensure_fresh(dir);
  const PreparedData data = prepare_data(config);
  print_warnings(data);
  const SmallCNN model = load_model(config, checkpoint, data.splits.train.num_classes());
  const auto layers = fit_layer_stats(model, data.splits.train, config.shrinkage);
  const Tensor val_pos = all_images(data.splits.val);

  std::vector<std::string> names;
  for (const auto& t : model.tap_manifest()) names.push_back("layer '" + t.name + "'");
  std::vector<ScoreMatrix> pos_scores;
  for (double eps : config.epsilon_grid) pos_scores.push_back(layer_score_matrix(model, layers, val_pos, eps));

  std::filesystem::create_directories(dir.parent_path().empty() ? "." : dir.parent_path());
  const auto staging = dir.string() + ".tmp";
  std::filesystem::remove_all(staging);
  std::filesystem::create_directories(staging);

  for (const auto& source : abnormality_sources(config)) {
    Tensor val_neg;
    json composition;
    if (source == "OOD") {
      val_neg = all_images(*data.ood_val);
      composition = {{"kind", data.ood_is_self ? "in-distribution validation split (self)" : "held-out OOD slice"},
                     {"count", data.ood_val->size()}};
    } else {
      const auto plan = std::find_if(config.attacks.begin(), config.attacks.end(),
                                     [&](const AttackPlan& p) { return attack_name(p.config.kind) == source; });
      const AdversarialBatch batch = run_attack(model, data.splits.val, plan->config, plan->max_samples);
      val_neg = batch.successful_perturbed();
      if (val_neg.numel() == 0) {
        throw ConfigError(source + " produced no successful adversarial examples on the validation split; "
                                   "its detector cannot be fitted");
      }
      composition = {{"kind", source + " crafted on the validation split"},
                     {"attack", plan->config.to_json()},
                     {"count", val_neg.dim(0)}};
    }
    std::vector<ScoreMatrix> neg_scores;
    for (double eps : config.epsilon_grid) neg_scores.push_back(layer_score_matrix(model, layers, val_neg, eps));
    const EnsembleFit fit = select_ensemble(config.epsilon_grid, pos_scores, neg_scores, names);

    DetectorModel det;
    det.layers = layers;
    det.taps = model.tap_manifest();
    det.epsilon = fit.epsilon;
    det.fuser = fit.fuser;
    det.model_digest = model.digest();
    det.seed = config.seed;
    const auto g = static_cast<std::size_t>(
        std::find(config.epsilon_grid.begin(), config.epsilon_grid.end(), fit.epsilon) - config.epsilon_grid.begin());
    std::vector<double> calib;
    for (const auto& row : pos_scores[g]) calib.push_back(det.ensemble(row));
    det.threshold = calibrate_threshold(calib);
    det.lid = fit_lid(model, data.splits.train, val_pos, val_neg, config.seed, config.lid_k, config.lid_reference);
    det.provenance = provenance(config);
    det.provenance["source"] = source;
    det.provenance["validation"] = {{"positives", {{"kind", "in-distribution validation split"},
                                                   {"count", data.splits.val.size()}}},
                                    {"negatives", composition}};
    det.provenance["epsilon_grid"] = config.epsilon_grid;
    det.provenance["grid_auroc"] = fit.grid_auroc;
    det.provenance["validation_auroc"] = fit.validation_auroc;
    save_detector(std::filesystem::path(staging) / (source + ".det"), det);
  }
  std::filesystem::rename(staging, dir);
  return dir;
}

std::filesystem::path cmd_attack(const RunConfig& config, const std::filesystem::path& checkpoint) {
  const auto dir = config.attack_dir();
  const auto fig_dir = config.out / "figures";
  ensure_fresh(dir);
  ensure_fresh(fig_dir);
  const PreparedData data = prepare_data(config);
  print_warnings(data);
  const SmallCNN model = load_model(config, checkpoint, data.splits.train.num_classes());

  const auto staging = dir.string() + ".tmp";
  std::filesystem::remove_all(staging);
  std::filesystem::create_directories(staging);
  json prov = provenance(config);
  prov["split"] = "test";
  prov["model_digest"] = model.digest();
  for (const auto& plan : config.attacks) {
    const AdversarialBatch batch = run_attack(model, data.splits.test, plan.config, plan.max_samples);
    save_adversarial_batch(std::filesystem::path(staging) / attack_name(plan.config.kind), batch, prov);
  }

  // One example per class, first in test-split order.
  std::vector<std::size_t> rows;
  for (std::size_t c = 0; c < data.splits.test.num_classes(); ++c) {
    for (std::size_t i = 0; i < data.splits.test.size(); ++i) {
      if (data.splits.test.items[i].label == static_cast<int>(c)) {
        rows.push_back(i);
        break;
      }
    }
  }
  const ContactSheet sheet = fgsm_contact_sheet(model, data.splits.test.subset(rows), config.figure_eps);
  const auto fig_staging = fig_dir.string() + ".tmp";
  std::filesystem::remove_all(fig_staging);
  std::filesystem::create_directories(fig_staging);
  write_ppm(std::filesystem::path(fig_staging) / "fgsm_contact_sheet.ppm", sheet.image);
  json caption = provenance(config);
  caption["eps"] = sheet.eps;
  caption["rows"] = sheet.row_labels;
  caption["probability"] = sheet.probability;
  caption["predicted"] = sheet.predicted;
  caption["mean_abs_delta"] = sheet.mean_abs_delta;
  write_json(std::filesystem::path(fig_staging) / "fgsm_contact_sheet.json", caption);
  std::filesystem::rename(staging, dir);
  std::filesystem::rename(fig_staging, fig_dir);
  return dir;
}

EvalOutcome cmd_evaluate(const RunConfig& config, const std::filesystem::path& checkpoint,
                         const std::filesystem::path& detectors) {
  EvalOutcome outcome;
  outcome.json_path = config.out / "report.json";
  outcome.csv_path = config.out / "report.csv";
  ensure_fresh(outcome.json_path);
  ensure_fresh(outcome.csv_path);
  if (!std::filesystem::is_directory(detectors)) {
    throw ConfigError("detector directory '" + detectors.string() + "' does not exist (run `fit-detector` first)");
  }
  const auto sources = abnormality_sources(config);
  std::vector<DetectorModel> dets;
  for (const auto& source : sources) {
    const auto path = detectors / (source + ".det");
    if (!std::filesystem::is_regular_file(path)) throw ConfigError("missing detector file '" + path.string() + "'");
    dets.push_back(load_detector(path));
  }
  const PreparedData data = prepare_data(config);
  print_warnings(data);
  const SmallCNN model = load_model(config, checkpoint, data.splits.train.num_classes());
  for (const auto& d : dets) check_model(d, model);

  const Tensor pos = all_images(data.splits.test);
  const auto msp_pos = msp_score(model, pos);
  const auto odin_pos = odin_score(model, pos, config.odin_temperature, config.odin_eps);

  EvalReport& report = outcome.report;
  report.config_digest = config.digest();
  report.seed = config.seed;
  report.config = config.to_json();
  report.config.erase("out");
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const std::string& source = sources[s];
    Tensor neg;
    if (source == "OOD") {
      neg = all_images(*data.ood_test);
    } else {
      const auto batch_dir = config.attack_dir() / source;
      if (!std::filesystem::is_directory(batch_dir)) {
        throw ConfigError("missing adversarial batch '" + batch_dir.string() + "' (run `attack` first)");
      }
      neg = load_adversarial_batch(batch_dir).successful_perturbed();
    }
    if (neg.numel() == 0) {
      std::cerr << "warning: source " << source << " has no abnormal samples; skipped\n";
      continue;
    }
    const DetectorModel& det = dets[s];
    auto add = [&](const std::string& name, const std::vector<double>& p, const std::vector<double>& n) {
      const auto samples = make_samples(p, n);
      report.rows.push_back({kModelName, name, source, compute_metrics(samples)});
    };
    add("Baseline", msp_pos, msp_score(model, neg));
    add("ODIN", odin_pos, odin_score(model, neg, config.odin_temperature, config.odin_eps));
    if (det.lid) add("LID", det.lid->score(model, pos), det.lid->score(model, neg));
    add("Mahalanobis", ensemble_scores(det, model, pos), ensemble_scores(det, model, neg));
  }
  std::filesystem::create_directories(config.out);
  io::write_file_atomic(outcome.json_path, render_json(report));
  io::write_file_atomic(outcome.csv_path, render_csv(report));
  outcome.violations = check_floors(report, config.floors);
  return outcome;
}

std::filesystem::path cmd_report(const std::filesystem::path& report_json) {
  if (!std::filesystem::is_regular_file(report_json)) {
    throw ConfigError("report '" + report_json.string() + "' does not exist");
  }
  json doc;
  try {
    doc = json::parse(io::read_file(report_json));
  } catch (const json::parse_error& e) {
    throw FormatError("report '" + report_json.string() + "' is not valid JSON: " + e.what());
  }
  const EvalReport report = report_from_json(doc);
  const auto csv = report_json.parent_path() / (report_json.stem().string() + ".csv");
  io::write_file_atomic(csv, render_csv(report));
  return csv;
}

std::filesystem::path cmd_synth_data(const RunConfig& config) {
  const auto root = config.out / "data";
  ensure_fresh(root);
  const auto staging = root.string() + ".tmp";
  std::filesystem::remove_all(staging);
  write_image_dir(synth_cells(config.synth_per_class, config.seed, false, config.image_size),
                  std::filesystem::path(staging) / "in_dist");
  write_image_dir(synth_cells(config.synth_ood_per_class, config.seed, true, config.image_size),
                  std::filesystem::path(staging) / "ood");
  std::filesystem::rename(staging, root);
  return root;
}

}  // namespace sentinel

#include "sentinel/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "sentinel/errors.hpp"
#include "sentinel/io.hpp"

namespace sentinel {

using nlohmann::json;

Tensor Classifier::predict_logits(const Tensor& batch) const {
  Tape tape;
  return logits(tape, tape.constant(batch)).value();
}

std::vector<int> Classifier::predict(const Tensor& batch) const {
  const Tensor z = predict_logits(batch);
  const std::size_t n = z.dim(0), c = z.dim(1);
  std::vector<int> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    const float* row = z.data().data() + s * c;
    out[s] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

// ---- architecture ----------------------------------------------------------

namespace {

constexpr std::size_t kWidths[] = {16, 32, 64};

int tap_depth(const std::string& name) {
  if (name == "block1") return 1;
  if (name == "block2") return 2;
  if (name == "block3_pre") return 3;
  if (name == "penultimate") return 4;
  throw ConfigError("unknown feature tap '" + name + "'");
}

std::size_t tap_dim(const std::string& name) {
  switch (tap_depth(name)) {
    case 1: return kWidths[0];
    case 2: return kWidths[1];
    default: return kWidths[2];
  }
}

}  // namespace

std::string ModelSpec::descriptor() const {
  std::ostringstream ss;
  ss << "SmallCNN/1;input=3x" << input_size << 'x' << input_size << ";classes=" << num_classes
     << ";blocks=conv3x3p1:3-16+relu+maxpool2,conv3x3p1:16-32+relu+maxpool2,conv3x3p1:32-64+relu+gap,linear:64-"
     << num_classes;
  return ss.str();
}

ModelSpec ModelSpec::from_descriptor(std::string_view descriptor) {
  ModelSpec spec;
  const std::string d(descriptor);
  const auto in_pos = d.find(";input=3x");
  const auto cls_pos = d.find(";classes=");
  if (d.rfind("SmallCNN/1;", 0) != 0 || in_pos == std::string::npos || cls_pos == std::string::npos) {
    throw FormatError("unrecognised architecture descriptor: " + d);
  }
  try {
    spec.input_size = std::stoul(d.substr(in_pos + 9));
    spec.num_classes = std::stoul(d.substr(cls_pos + 9));
  } catch (const std::exception&) {
    throw FormatError("malformed architecture descriptor: " + d);
  }
  if (spec.descriptor() != d) throw FormatError("unrecognised architecture descriptor: " + d);
  return spec;
}

void ModelSpec::validate() const {
  // Three stride-1 padded convs with two 2x pools need at least 4 pixels.
  if (input_size < 4) throw ConfigError("model input_size must be >= 4");
  if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
  if (taps.empty()) throw ConfigError("model needs at least one feature tap");
  for (const auto& t : taps) tap_depth(t);
}

// ---- SmallCNN ----------------------------------------------------------------

namespace {

std::vector<std::pair<std::string, Shape>> parameter_layout(std::size_t classes) {
  return {{"conv1.weight", {16, 3, 3, 3}},  {"conv1.bias", {16}},
          {"conv2.weight", {32, 16, 3, 3}}, {"conv2.bias", {32}},
          {"conv3.weight", {64, 32, 3, 3}}, {"conv3.bias", {64}},
          {"fc.weight", {classes, 64}},     {"fc.bias", {classes}}};
}

}  // namespace

SmallCNN::SmallCNN(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  for (auto& [name, shape] : parameter_layout(spec_.num_classes)) {
    Tensor t(shape, 0.0f);
    if (shape.size() > 1) {
      const std::size_t fan_in = t.numel() / shape[0];
      const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
      std::uniform_real_distribution<float> dist(-bound, bound);
      for (float& v : t.data()) v = dist(rng);
    }
    params_.emplace_back(name, std::move(t));
  }
  // Inputs live in [0,1]; start conv1 as if they were centred on 0.5.
  const Tensor& w1 = params_[0].second;
  Tensor& b1 = params_[1].second;
  const std::size_t fan_in = w1.numel() / w1.dim(0);
  for (std::size_t f = 0; f < w1.dim(0); ++f) {
    double acc = 0.0;
    for (std::size_t k = 0; k < fan_in; ++k) acc += w1[f * fan_in + k];
    b1[f] = static_cast<float>(-0.5 * acc);
  }
}

SmallCNN::SmallCNN(ModelSpec spec, std::vector<std::pair<std::string, Tensor>> params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  const auto layout = parameter_layout(spec_.num_classes);
  if (params_.size() != layout.size()) {
    throw FormatError("expected " + std::to_string(layout.size()) + " parameter tensors, got " +
                      std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (params_[i].first != layout[i].first || params_[i].second.shape() != layout[i].second) {
      throw FormatError("parameter " + std::to_string(i) + " is '" + params_[i].first + "' " +
                        shape_to_string(params_[i].second.shape()) + ", expected '" + layout[i].first + "' " +
                        shape_to_string(layout[i].second));
    }
  }
}

std::vector<TapInfo> SmallCNN::tap_manifest() const {
  std::vector<TapInfo> out;
  for (const auto& t : spec_.taps) out.push_back({t, tap_dim(t)});
  return out;
}

std::string SmallCNN::digest() const {
  std::string bytes = spec_.descriptor();
  for (const auto& [name, t] : params_) {
    bytes += name;
    bytes += encode_ten(t);
  }
  return io::sha256_hex(bytes);
}

void SmallCNN::check_input(const Tensor& input) const {
  if (input.rank() != 4 || input.dim(1) != 3 || input.dim(2) != spec_.input_size ||
      input.dim(3) != spec_.input_size) {
    throw ShapeError("SmallCNN expects input [N,3," + std::to_string(spec_.input_size) + "," +
                     std::to_string(spec_.input_size) + "], got " + shape_to_string(input.shape()));
  }
}

std::vector<Var> SmallCNN::bind(Tape& tape, bool requires_grad) const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(tape.leaf(p.second, requires_grad));
  return out;
}

SmallCNN::Output SmallCNN::run(Tape&, Var input, std::span<const Var> p, int stop_depth) const {
  check_input(input.value());
  Output out;
  out.features.resize(spec_.taps.size());
  Var stage[5];
  auto publish = [&](int depth) {
    for (std::size_t t = 0; t < spec_.taps.size(); ++t) {
      if (tap_depth(spec_.taps[t]) != depth) continue;
      out.features[t] = stage[depth - 1].shape().size() == 4 ? global_avg_pool(stage[depth - 1]) : stage[depth - 1];
    }
  };
  stage[0] = maxpool2d(relu(add_channel_bias(conv2d(input, p[0], 1, 1), p[1])));
  publish(1);
  if (stop_depth <= 1) return out;
  stage[1] = maxpool2d(relu(add_channel_bias(conv2d(stage[0], p[2], 1, 1), p[3])));
  publish(2);
  if (stop_depth <= 2) return out;
  stage[2] = add_channel_bias(conv2d(stage[1], p[4], 1, 1), p[5]);
  publish(3);
  if (stop_depth <= 3) return out;
  stage[3] = global_avg_pool(relu(stage[2]));
  publish(4);
  if (stop_depth <= 4) return out;
  out.logits = linear(stage[3], p[6], p[7]);
  return out;
}

SmallCNN::Output SmallCNN::forward_bound(Tape& tape, Var input, std::span<const Var> params) const {
  if (params.size() != params_.size()) throw std::invalid_argument("forward_bound: wrong parameter count");
  return run(tape, input, params, 5);
}

SmallCNN::Output SmallCNN::forward_with_taps(Tape& tape, Var input) const {
  const auto p = bind(tape, false);
  return run(tape, input, p, 5);
}

Var SmallCNN::logits(Tape& tape, Var input) const { return forward_with_taps(tape, input).logits; }

Var SmallCNN::tap_feature(Tape& tape, Var input, std::size_t tap) const {
  if (tap >= spec_.taps.size()) throw std::out_of_range("tap index " + std::to_string(tap));
  const auto p = bind(tape, false);
  return run(tape, input, p, tap_depth(spec_.taps[tap])).features[tap];
}

SmallCNN::Inference SmallCNN::infer(const Tensor& batch, std::size_t chunk) const {
  check_input(batch);
  std::vector<Tensor> logit_parts;
  std::vector<std::vector<Tensor>> feature_parts(spec_.taps.size());
  for (std::size_t begin = 0; begin < batch.dim(0); begin += chunk) {
    const std::size_t end = std::min(batch.dim(0), begin + chunk);
    Tape tape;
    const auto out = forward_with_taps(tape, tape.constant(batch.rows(begin, end)));
    logit_parts.push_back(out.logits.value());
    for (std::size_t t = 0; t < out.features.size(); ++t) feature_parts[t].push_back(out.features[t].value());
  }
  Inference inf;
  inf.logits = concat_rows(logit_parts);
  for (auto& parts : feature_parts) inf.features.push_back(concat_rows(parts));
  return inf;
}

// ---- training ----------------------------------------------------------------

double accuracy(const Classifier& model, const LabeledDataset& data, std::size_t chunk) {
  if (data.empty()) throw ConfigError("accuracy of an empty dataset");
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    const std::size_t end = std::min(data.size(), begin + chunk);
    const auto pred = model.predict(data.batch(begin, end));
    for (std::size_t i = begin; i < end; ++i) correct += pred[i - begin] == data.items[i].label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

Evaluation evaluate(const SmallCNN& model, const LabeledDataset& data) {
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += 64) {
    const std::size_t end = std::min(data.size(), begin + 64);
    Tape tape;
    std::vector<int> labels;
    for (std::size_t i = begin; i < end; ++i) labels.push_back(data.items[i].label);
    const Var z = model.logits(tape, tape.constant(data.batch(begin, end)));
    loss += cross_entropy_loss(z, labels).value()[0] * static_cast<double>(end - begin);
    const std::size_t c = z.shape()[1];
    for (std::size_t s = 0; s < end - begin; ++s) {
      const float* row = z.value().data().data() + s * c;
      correct += (std::max_element(row, row + c) - row) == labels[s] ? 1 : 0;
    }
  }
  const auto n = static_cast<double>(data.size());
  return {loss / n, static_cast<double>(correct) / n};
}

}  // namespace

TrainResult train(SmallCNN model, const LabeledDataset& train_set, const LabeledDataset& val_set,
                  const TrainConfig& config) {
  if (train_set.empty()) throw ConfigError("training set is empty");
  if (val_set.empty()) throw ConfigError("validation set is empty");
  if (model.num_classes() < 2) throw ConfigError("training needs at least 2 classes");
  if (config.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (config.lr < 0 || config.momentum < 0 || config.momentum >= 1) throw ConfigError("invalid lr/momentum");
  if (config.augment) config.augment->validate();

  std::mt19937_64 rng(config.seed);
  auto& params = model.mutable_parameters();
  std::vector<std::vector<float>> velocity;
  for (const auto& p : params) velocity.emplace_back(p.second.numel(), 0.0f);

  TrainResult result{model, {}, 0, -1.0};
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<Tensor> images;
      std::vector<int> labels;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& item = train_set.items[order[i]];
        images.push_back(config.augment ? augment(item.image, *config.augment, rng) : item.image);
        labels.push_back(item.label);
      }
      Tape tape;
      const auto bound = model.bind(tape, true);
      Var loss;
      Var z;
      try {
        z = model.forward_bound(tape, tape.constant(stack(images)), bound).logits;
        loss = cross_entropy_loss(z, labels);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch starting at " +
                           std::to_string(begin) + ": " + e.what());
      }
      const double batch_loss = loss.value()[0];
      if (!std::isfinite(batch_loss)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                           std::to_string(begin) + " (lr " + std::to_string(config.lr) + ")");
      }
      loss_sum += batch_loss * static_cast<double>(end - begin);
      const std::size_t c = z.shape()[1];
      for (std::size_t s = 0; s < labels.size(); ++s) {
        const float* row = z.value().data().data() + s * c;
        correct += (std::max_element(row, row + c) - row) == labels[s] ? 1 : 0;
      }
      tape.backward(loss);
      for (std::size_t k = 0; k < params.size(); ++k) {
        const Tensor& g = tape.grad(bound[k]);
        auto w = params[k].second.data();
        auto& v = velocity[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
          v[i] = static_cast<float>(config.momentum * v[i] + g[i]);
          w[i] = static_cast<float>(w[i] - config.lr * v[i]);
        }
      }
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(train_set.size());
    stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_set.size());
    const auto val = evaluate(model, val_set);
    stats.val_loss = val.loss;
    stats.val_accuracy = val.accuracy;
    result.history.push_back(stats);
    if (stats.val_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = stats.val_accuracy;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  if (config.epochs == 0) result.best_val_accuracy = evaluate(model, val_set).accuracy;
  return result;
}

// ---- checkpoints -------------------------------------------------------------

std::string encode_checkpoint(const SmallCNN& model, const CheckpointMeta& meta) {
  json header;
  header["architecture"] = model.spec().descriptor();
  json taps = json::array();
  for (const auto& t : model.tap_manifest()) taps.push_back({{"name", t.name}, {"dim", t.dim}});
  header["taps"] = taps;
  header["seed"] = meta.seed;
  header["epochs"] = meta.epochs;
  header["final_val_accuracy"] = meta.final_val_accuracy;
  header["normalization"] = "scale_to_unit_interval";
  header["extra"] = meta.extra;
  const std::string header_text = header.dump();

  std::string payload;
  io::put_u32(payload, static_cast<std::uint32_t>(header_text.size()));
  payload += header_text;
  io::put_u32(payload, static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& [name, t] : model.parameters()) {
    io::put_u16(payload, static_cast<std::uint16_t>(name.size()));
    payload += name;
    const std::string ten = encode_ten(t);
    io::put_u32(payload, static_cast<std::uint32_t>(ten.size()));
    payload += ten;
  }
  std::string out = "SNTLCKPT";
  io::put_u8(out, kCheckpointVersion);
  io::put_u64(out, payload.size());
  out += payload;
  io::put_u32(out, io::crc32(payload));
  return out;
}

LoadedModel decode_checkpoint(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < 8 || r.take(8) != "SNTLCKPT") throw FormatError("checkpoint: bad magic");
  const auto version = r.u8();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto declared = r.u64();
  if (r.remaining() < declared + 4) {
    throw FormatError("checkpoint: truncated file (payload declares " + std::to_string(declared) + " bytes, " +
                      std::to_string(r.remaining()) + " remain)");
  }
  const std::string_view payload = r.take(declared);
  const auto stored_crc = r.u32();
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  if (io::crc32(payload) != stored_crc) throw FormatError("checkpoint: digest mismatch (file is corrupt)");

  io::ByteReader p(payload);
  const auto header_len = p.u32();
  json header;
  try {
    header = json::parse(p.take(header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  ModelSpec spec = ModelSpec::from_descriptor(header.at("architecture").get<std::string>());
  spec.taps.clear();
  for (const auto& t : header.at("taps")) spec.taps.push_back(t.at("name").get<std::string>());
  const auto count = p.u32();
  std::vector<std::pair<std::string, Tensor>> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = p.u16();
    std::string name(p.take(name_len));
    const auto ten_len = p.u32();
    std::size_t used = 0;
    Tensor t = decode_ten(p.take(ten_len), &used);
    if (used != ten_len) throw FormatError("checkpoint: section '" + name + "' has trailing bytes");
    params.emplace_back(std::move(name), std::move(t));
  }
  if (p.remaining() != 0) throw FormatError("checkpoint: trailing payload bytes");

  CheckpointMeta meta;
  meta.seed = header.at("seed").get<std::uint64_t>();
  meta.epochs = header.at("epochs").get<std::size_t>();
  meta.final_val_accuracy = header.at("final_val_accuracy").get<double>();
  meta.extra = header.value("extra", json::object());
  return {SmallCNN(std::move(spec), std::move(params)), std::move(meta)};
}

void save_checkpoint(const std::filesystem::path& path, const SmallCNN& model, const CheckpointMeta& meta) {
  io::write_file_atomic(path, encode_checkpoint(model, meta));
}

LoadedModel load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

LoadedModel load_checkpoint(const std::filesystem::path& path, const ModelSpec& expected) {
  LoadedModel loaded = load_checkpoint(path);
  if (loaded.model.spec().descriptor() != expected.descriptor()) {
    throw FormatError("checkpoint architecture '" + loaded.model.spec().descriptor() + "' does not match '" +
                      expected.descriptor() + "'");
  }
  return loaded;
}

}  // namespace sentinel

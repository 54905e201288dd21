#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "sentinel/autodiff.hpp"
#include "sentinel/data.hpp"
#include "sentinel/tensor.hpp"

namespace sentinel {

/// Anything that maps an image batch [N,C,H,W] to logits [N,K] on a tape.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual Var logits(Tape& tape, Var input) const = 0;
  virtual std::size_t num_classes() const = 0;

  /// Logits without gradient tracking.
  Tensor predict_logits(const Tensor& batch) const;
  std::vector<int> predict(const Tensor& batch) const;
};

// Feature tap points, each reduced to a per-channel vector by spatial mean.
//   block1       after block 1 max-pool           (16)
//   block2       after block 2 max-pool           (32)
//   block3_pre   block 3 conv output before relu  (64)
//   penultimate  block 3 relu + global avg pool   (64)
inline const std::vector<std::string>& available_taps() {
  static const std::vector<std::string> taps{"block1", "block2", "block3_pre", "penultimate"};
  return taps;
}

struct TapInfo {
  std::string name;
  std::size_t dim = 0;
};

struct ModelSpec {
  std::size_t input_size = 125;
  std::size_t num_classes = 2;
  std::vector<std::string> taps = available_taps();

  /// Architecture string; taps are not part of it.
  std::string descriptor() const;
  static ModelSpec from_descriptor(std::string_view descriptor);
  void validate() const;
};

/// Three conv blocks (3->16->32->64, 3x3, padding 1) and a linear head.
class SmallCNN : public Classifier {
 public:
  struct Output {
    Var logits;
    std::vector<Var> features;  // one per tap, manifest order
  };

  /// Kaiming-uniform fan-in weights. Biases are zero except conv1, which
  /// starts at -0.5 * sum(w) per filter so mid-grey inputs map near 0.
  SmallCNN(ModelSpec spec, std::uint64_t seed);
  SmallCNN(ModelSpec spec, std::vector<std::pair<std::string, Tensor>> params);

  const ModelSpec& spec() const { return spec_; }
  std::size_t num_classes() const override { return spec_.num_classes; }
  std::size_t num_taps() const { return spec_.taps.size(); }
  std::vector<TapInfo> tap_manifest() const;

  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  std::vector<std::pair<std::string, Tensor>>& mutable_parameters() { return params_; }

  /// SHA-256 over the encoded parameters; identifies the weights.
  std::string digest() const;

  Var logits(Tape& tape, Var input) const override;
  Output forward_with_taps(Tape& tape, Var input) const;
  /// Feature of tap `tap` only; stops the forward pass once it is available.
  Var tap_feature(Tape& tape, Var input, std::size_t tap) const;

  /// Parameters placed on `tape` in declaration order.
  std::vector<Var> bind(Tape& tape, bool requires_grad) const;
  Output forward_bound(Tape& tape, Var input, std::span<const Var> params) const;

  struct Inference {
    Tensor logits;
    std::vector<Tensor> features;
  };
  /// Batched forward without gradients; `chunk` bounds peak memory.
  Inference infer(const Tensor& batch, std::size_t chunk = 64) const;

 private:
  // Runs until `stop_depth` (1..5, 5 = logits); taps beyond it are unset.
  Output run(Tape& tape, Var input, std::span<const Var> params, int stop_depth) const;
  void check_input(const Tensor& input) const;

  ModelSpec spec_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

// ---- training ------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 10;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::optional<AugmentConfig> augment;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  SmallCNN model;
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
};

/// SGD with momentum on mean cross-entropy; returns the epoch with the best
/// validation accuracy (earliest on ties).
TrainResult train(SmallCNN model, const LabeledDataset& train_set, const LabeledDataset& val_set,
                  const TrainConfig& config);

double accuracy(const Classifier& model, const LabeledDataset& data, std::size_t chunk = 64);

// ---- checkpoints ---------------------------------------------------------
//
// "SNTLCKPT", version u8, payload length u64, payload, CRC-32 u32 (over the
// payload). Payload: u32 JSON length, JSON metadata, u32 section count, then
// per section u16 name length, name, u32 byte length, ".ten" bytes.

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double final_val_accuracy = 0.0;
  nlohmann::json extra = nlohmann::json::object();
};

struct LoadedModel {
  SmallCNN model;
  CheckpointMeta meta;
};

std::string encode_checkpoint(const SmallCNN& model, const CheckpointMeta& meta);
LoadedModel decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const SmallCNN& model, const CheckpointMeta& meta);
LoadedModel load_checkpoint(const std::filesystem::path& path);
/// Fails unless the stored architecture descriptor equals `expected.descriptor()`.
LoadedModel load_checkpoint(const std::filesystem::path& path, const ModelSpec& expected);

}  // namespace sentinel

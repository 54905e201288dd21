#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sentinel/tensor.hpp"

namespace sentinel {

struct LabeledItem {
  Tensor image;  // [3,H,W], values in [0,1]
  int label = 0;
};

struct LabeledDataset {
  std::vector<LabeledItem> items;
  std::vector<std::string> class_names;

  std::size_t size() const { return items.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  bool empty() const { return items.empty(); }

  /// Images [begin,end) stacked into [N,3,H,W].
  Tensor batch(std::size_t begin, std::size_t end) const;
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> labels() const;
  /// Items at `indices`, same class names.
  LabeledDataset subset(std::span<const std::size_t> indices) const;
};

// ---- image files -------------------------------------------------------

/// Decodes binary PPM (P6) or PGM (P5); grey is replicated to 3 channels.
Tensor decode_pnm(std::string_view bytes);
Tensor read_pnm(const std::filesystem::path& path);
/// Binary P6 at maxval 255; values are rounded after clamping to [0,1].
std::string encode_ppm(const Tensor& image);
void write_ppm(const std::filesystem::path& path, const Tensor& image);

struct LoadOptions {
  bool strict = false;
  /// Resize every image to this square extent; required when sizes differ.
  std::optional<std::size_t> image_size;
};

struct LoadReport {
  std::size_t loaded = 0;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

/// Layout `root/<class_name>/*.{ppm,pgm}`; classes ordered lexicographically.
LabeledDataset load_image_dir(const std::filesystem::path& root, const LoadOptions& options = {},
                              LoadReport* report = nullptr);

/// Inverse layout of load_image_dir.
void write_image_dir(const LabeledDataset& dataset, const std::filesystem::path& root);

// ---- preprocessing -----------------------------------------------------

/// Bilinear resample with corner-aligned sampling: output index i maps to
/// source coordinate i*(in-1)/(out-1) (the centre when out == 1).
Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w);

/// Concrete affine parameters, applied about the image centre in the order
/// zoom -> rotate -> shear -> translate.
struct AffineParams {
  double zoom = 1.0;
  double rotate_deg = 0.0;
  double shear = 0.0;      // x' = x + shear * y
  double translate_x = 0.0;  // pixels
  double translate_y = 0.0;
};

/// Inverse-maps each output pixel, samples bilinearly with border clamping.
Tensor affine_resample(const Tensor& image, const AffineParams& params);

struct AugmentConfig {
  double rotate_deg_max = 0.0;
  double shear_max = 0.0;
  double translate_frac_max = 0.0;
  double zoom_range = 0.0;  // zoom drawn from [1 - z, 1 + z]

  void validate() const;
};

/// Draws one AffineParams from `config` (always five draws) and applies it.
Tensor augment(const Tensor& image, const AugmentConfig& config, std::mt19937_64& rng);

// ---- splitting ---------------------------------------------------------

struct SplitSpec {
  double train = 0.6;
  double val = 0.1;
  double test = 0.3;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DatasetSplits {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
};

/// Stratified split. Per class, val and test sizes are floor(n_c * frac) and
/// the remainder goes to train. Each split keeps source order.
DatasetSplits split(const LabeledDataset& dataset, const SplitSpec& spec);

// ---- synthetic cells ---------------------------------------------------

inline constexpr std::size_t kSynthDefaultSize = 32;

/// Class 0 "healthy": smooth pink elliptical cell on a dark background.
/// Class 1 "parasitized": the same with 1-3 small dark inclusions.
/// `ood` shifts background texture, hue and cell eccentricity.
/// Item i of class c depends only on (seed, ood, c, i).
LabeledDataset synth_cells(std::size_t n_per_class, std::uint64_t seed, bool ood,
                           std::size_t image_size = kSynthDefaultSize);

}  // namespace sentinel

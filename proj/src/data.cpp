#include "sentinel/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <numeric>

#include "sentinel/errors.hpp"
#include "sentinel/io.hpp"

namespace sentinel {

namespace fs = std::filesystem;

Tensor LabeledDataset::batch(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > items.size()) throw ShapeError("dataset batch range out of bounds");
  std::vector<Tensor> imgs;
  imgs.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) imgs.push_back(items[i].image);
  return stack(imgs);
}

Tensor LabeledDataset::batch(std::span<const std::size_t> indices) const {
  std::vector<Tensor> imgs;
  imgs.reserve(indices.size());
  for (auto i : indices) imgs.push_back(items.at(i).image);
  return stack(imgs);
}

std::vector<int> LabeledDataset::labels() const {
  std::vector<int> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.label);
  return out;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.class_names = class_names;
  out.items.reserve(indices.size());
  for (auto i : indices) out.items.push_back(items.at(i));
  return out;
}

// ---- PNM -----------------------------------------------------------------

namespace {

class PnmHeader {
 public:
  explicit PnmHeader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t next_int() {
    skip_space_and_comments();
    std::size_t v = 0;
    bool any = false;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      ++pos_;
      any = true;
      if (v > (1u << 24)) throw FormatError("PNM header value too large");
    }
    if (!any) throw FormatError("PNM header: expected integer at offset " + std::to_string(pos_));
    return v;
  }

  // Exactly one whitespace byte separates the header from the raster.
  std::size_t raster_offset() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      throw FormatError("PNM header: missing separator before raster");
    }
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 2;
};

}  // namespace

Tensor decode_pnm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) {
    throw FormatError("not a binary PPM/PGM file");
  }
  const bool color = bytes[1] == '6';
  PnmHeader header(bytes);
  const std::size_t w = header.next_int();
  const std::size_t h = header.next_int();
  const std::size_t maxval = header.next_int();
  if (w == 0 || h == 0) throw FormatError("PNM: zero image extent");
  if (maxval == 0 || maxval > 65535) throw FormatError("PNM: maxval out of range");
  const std::size_t offset = header.raster_offset();
  const std::size_t channels = color ? 3 : 1;
  const std::size_t sample_bytes = maxval < 256 ? 1 : 2;
  const std::size_t need = w * h * channels * sample_bytes;
  if (bytes.size() - offset < need) throw FormatError("PNM: truncated raster");
  const auto* raster = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
  Tensor out(Shape{3, h, w});
  const double scale = 1.0 / static_cast<double>(maxval);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src_c = color ? c : 0;
        const std::size_t idx = ((y * w + x) * channels + src_c) * sample_bytes;
        const std::size_t v = sample_bytes == 1 ? raster[idx] : (std::size_t{raster[idx]} << 8) | raster[idx + 1];
        out[(c * h + y) * w + x] = static_cast<float>(std::min(1.0, static_cast<double>(v) * scale));
      }
    }
  }
  return out;
}

Tensor read_pnm(const fs::path& path) { return decode_pnm(io::read_file(path)); }

std::string encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("encode_ppm expects [3,H,W], got " + shape_to_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + 3 * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(image[(c * h + y) * w + x]), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
  return out;
}

void write_ppm(const fs::path& path, const Tensor& image) { io::write_file_atomic(path, encode_ppm(image)); }

// ---- directory I/O -------------------------------------------------------

namespace {

bool is_pnm(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".ppm" || ext == ".pgm";
}

}  // namespace

LabeledDataset load_image_dir(const fs::path& root, const LoadOptions& options, LoadReport* report) {
  if (!fs::is_directory(root)) throw FormatError("dataset directory does not exist: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  if (class_dirs.empty()) throw FormatError("no class subdirectories under " + root.string());

  LoadReport local;
  LoadReport& rep = report ? *report : local;
  LabeledDataset ds;
  std::optional<Shape> common;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    ds.class_names.push_back(class_dirs[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[c])) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    std::size_t taken = 0;
    for (const auto& f : files) {
      if (!is_pnm(f)) continue;
      try {
        Tensor img = read_pnm(f);
        if (options.image_size) img = resize_bilinear(img, *options.image_size, *options.image_size);
        if (!common) common = img.shape();
        if (img.shape() != *common) {
          throw ShapeError("image " + f.string() + " has shape " + shape_to_string(img.shape()) + ", expected " +
                           shape_to_string(*common) + "; set an image size to resize");
        }
        ds.items.push_back({std::move(img), static_cast<int>(c)});
        ++taken;
        ++rep.loaded;
      } catch (const FormatError& e) {
        if (options.strict) throw FormatError(f.string() + ": " + e.what());
        ++rep.skipped;
        rep.warnings.push_back("skipped " + f.string() + ": " + e.what());
      }
    }
    if (taken == 0) {
      if (options.strict) throw FormatError("class directory has no readable images: " + class_dirs[c].string());
      rep.warnings.push_back("class directory has no readable images: " + class_dirs[c].string());
    }
  }
  return ds;
}

void write_image_dir(const LabeledDataset& dataset, const fs::path& root) {
  std::vector<std::size_t> counter(dataset.num_classes(), 0);
  for (const auto& item : dataset.items) {
    const auto c = static_cast<std::size_t>(item.label);
    const auto& name = dataset.class_names.at(c);
    char file[64];
    std::snprintf(file, sizeof file, "%06zu.ppm", counter[c]++);
    write_ppm(root / name / file, item.image);
  }
}

// ---- resampling ----------------------------------------------------------

namespace {

// Bilinear sample of channel plane at (sy, sx), coordinates clamped to the border.
double sample_bilinear(const float* plane, std::size_t h, std::size_t w, double sy, double sx) {
  sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
  sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(sy));
  const auto x0 = static_cast<std::size_t>(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - static_cast<double>(y0);
  const double fx = sx - static_cast<double>(x0);
  const double top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
  const double bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
  return top * (1.0 - fy) + bottom * fy;
}

void require_image(const Tensor& image, const char* op) {
  if (image.rank() != 3) {
    throw ShapeError(std::string(op) + " expects [C,H,W], got " + shape_to_string(image.shape()));
  }
}

}  // namespace

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  require_image(image, "resize_bilinear");
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: output extents must be positive");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == out_h && w == out_w) return image;
  auto coord = [](std::size_t i, std::size_t in, std::size_t out) {
    if (out == 1) return static_cast<double>(in - 1) / 2.0;
    return static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
  };
  Tensor out(Shape{c, out_h, out_w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float* plane = image.data().data() + ch * h * w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const double sy = coord(y, h, out_h);
      for (std::size_t x = 0; x < out_w; ++x) {
        out[(ch * out_h + y) * out_w + x] = static_cast<float>(sample_bilinear(plane, h, w, sy, coord(x, w, out_w)));
      }
    }
  }
  return out;
}

Tensor affine_resample(const Tensor& image, const AffineParams& p) {
  require_image(image, "affine_resample");
  if (!(p.zoom > 0.0)) throw std::invalid_argument("affine_resample: zoom must be positive");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double cy = static_cast<double>(h - 1) / 2.0;
  const double cx = static_cast<double>(w - 1) / 2.0;
  const double theta = p.rotate_deg * std::numbers::pi / 180.0;
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  Tensor out(image.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // Undo translate, shear, rotate, zoom in that order.
      double u = static_cast<double>(x) - cx - p.translate_x;
      double v = static_cast<double>(y) - cy - p.translate_y;
      u -= p.shear * v;
      const double ru = cos_t * u + sin_t * v;
      const double rv = -sin_t * u + cos_t * v;
      const double sx = ru / p.zoom + cx;
      const double sy = rv / p.zoom + cy;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float* plane = image.data().data() + ch * h * w;
        const double val = sample_bilinear(plane, h, w, sy, sx);
        out[(ch * h + y) * w + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
  return out;
}

void AugmentConfig::validate() const {
  if (rotate_deg_max < 0 || shear_max < 0 || translate_frac_max < 0 || zoom_range < 0) {
    throw ConfigError("augmentation ranges must be non-negative");
  }
  if (zoom_range >= 1.0) throw ConfigError("augmentation zoom_range must be < 1");
}

Tensor augment(const Tensor& image, const AugmentConfig& config, std::mt19937_64& rng) {
  config.validate();
  require_image(image, "augment");
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double dz = unit(rng), dr = unit(rng), ds = unit(rng), dx = unit(rng), dy = unit(rng);
  AffineParams p;
  p.zoom = 1.0 + config.zoom_range * dz;
  p.rotate_deg = config.rotate_deg_max * dr;
  p.shear = config.shear_max * ds;
  p.translate_x = config.translate_frac_max * static_cast<double>(image.dim(2)) * dx;
  p.translate_y = config.translate_frac_max * static_cast<double>(image.dim(1)) * dy;
  return affine_resample(image, p);
}

// ---- split -----------------------------------------------------------------

void SplitSpec::validate() const {
  if (!(train > 0 && val > 0 && test > 0)) throw ConfigError("split fractions must be positive");
  if (std::abs(train + val + test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1, got " + std::to_string(train + val + test));
  }
}

DatasetSplits split(const LabeledDataset& dataset, const SplitSpec& spec) {
  spec.validate();
  const std::size_t c = dataset.num_classes();
  if (c == 0) throw ConfigError("split: dataset has no classes");
  if (dataset.size() < 3 * c) {
    throw ConfigError("split: need at least " + std::to_string(3 * c) + " items, got " +
                      std::to_string(dataset.size()));
  }
  std::vector<std::vector<std::size_t>> by_class(c);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const int lab = dataset.items[i].label;
    if (lab < 0 || static_cast<std::size_t>(lab) >= c) throw ConfigError("split: label out of range");
    by_class[static_cast<std::size_t>(lab)].push_back(i);
  }
  std::mt19937_64 rng(spec.seed);
  std::vector<std::size_t> train_idx, val_idx, test_idx;
  // Floor allocation; the small epsilon absorbs binary rounding of fractions like 0.3.
  auto floor_count = [](std::size_t n, double frac) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * frac + 1e-9));
  };
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    const std::size_t n_val = floor_count(members.size(), spec.val);
    const std::size_t n_test = floor_count(members.size(), spec.test);
    val_idx.insert(val_idx.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
    test_idx.insert(test_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val),
                    members.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
    train_idx.insert(train_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), members.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  return {dataset.subset(train_idx), dataset.subset(val_idx), dataset.subset(test_idx)};
}

// ---- synthetic cells -------------------------------------------------------

namespace {

struct Rgb {
  double r, g, b;
};

double smoothstep_edge(double signed_dist, double softness) { return 1.0 / (1.0 + std::exp(signed_dist / softness)); }

Tensor draw_cell(std::mt19937_64& rng, std::size_t size, bool parasitized, bool ood) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double s = static_cast<double>(size);

  const Rgb bg = ood ? Rgb{0.34, 0.31, 0.24} : Rgb{0.09, 0.05, 0.09};
  const double stripe_amp = ood ? 0.08 : 0.0;
  const double stripe_freq = 2.0 * std::numbers::pi / (s * (0.15 + 0.1 * u(rng)));
  const double stripe_phase = 2.0 * std::numbers::pi * u(rng);
  const double bg_noise = ood ? 0.04 : 0.02;

  const double cx = s * (0.5 + 0.08 * (2 * u(rng) - 1));
  const double cy = s * (0.5 + 0.08 * (2 * u(rng) - 1));
  const double a = s * (0.30 + 0.07 * u(rng));
  const double b = a * (ood ? 0.45 + 0.2 * u(rng) : 0.82 + 0.18 * u(rng));
  const double phi = std::numbers::pi * u(rng);
  const double tint = 0.05 * (2 * u(rng) - 1);
  const Rgb cell = ood ? Rgb{0.55 + tint, 0.62 + tint, 0.88} : Rgb{0.88, 0.52 + tint, 0.62 + tint};

  struct Dot {
    double x, y, r;
  };
  std::vector<Dot> dots;
  if (parasitized) {
    const int count = 1 + static_cast<int>(u(rng) * 3.0);
    for (int k = 0; k < count; ++k) {
      const double rr = 0.55 * std::sqrt(u(rng));
      const double ang = 2.0 * std::numbers::pi * u(rng);
      // Position in the cell's own frame, then rotated into the image.
      const double lx = rr * a * std::cos(ang), ly = rr * b * std::sin(ang);
      dots.push_back({cx + lx * std::cos(phi) - ly * std::sin(phi), cy + lx * std::sin(phi) + ly * std::cos(phi),
                      s * (0.08 + 0.04 * u(rng))});
    }
  }
  const Rgb dot_color = ood ? Rgb{0.16, 0.10, 0.38} : Rgb{0.32, 0.08, 0.36};

  Tensor img(Shape{3, size, size});
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double stripe = stripe_amp * std::sin(stripe_freq * (px + 0.6 * py) + stripe_phase);
      Rgb col{bg.r + stripe + bg_noise * noise(rng), bg.g + stripe + bg_noise * noise(rng),
              bg.b + stripe + bg_noise * noise(rng)};
      const double dx = px - cx, dy = py - cy;
      const double lx = dx * std::cos(phi) + dy * std::sin(phi);
      const double ly = -dx * std::sin(phi) + dy * std::cos(phi);
      const double radius = std::sqrt((lx * lx) / (a * a) + (ly * ly) / (b * b));
      const double alpha = smoothstep_edge(radius - 1.0, 0.06);
      const double shade = 1.0 - 0.12 * radius;
      col.r = col.r * (1 - alpha) + alpha * cell.r * shade;
      col.g = col.g * (1 - alpha) + alpha * cell.g * shade;
      col.b = col.b * (1 - alpha) + alpha * cell.b * shade;
      for (const auto& d : dots) {
        const double dist = std::hypot(px - d.x, py - d.y);
        const double beta = smoothstep_edge(dist - d.r, 0.5) * alpha;
        col.r = col.r * (1 - beta) + beta * dot_color.r;
        col.g = col.g * (1 - beta) + beta * dot_color.g;
        col.b = col.b * (1 - beta) + beta * dot_color.b;
      }
      img[(0 * size + y) * size + x] = static_cast<float>(std::clamp(col.r, 0.0, 1.0));
      img[(1 * size + y) * size + x] = static_cast<float>(std::clamp(col.g, 0.0, 1.0));
      img[(2 * size + y) * size + x] = static_cast<float>(std::clamp(col.b, 0.0, 1.0));
    }
  }
  return img;
}

}  // namespace

LabeledDataset synth_cells(std::size_t n_per_class, std::uint64_t seed, bool ood, std::size_t image_size) {
  if (n_per_class == 0) throw ConfigError("synth_cells: n_per_class must be >= 1");
  if (image_size < 8) throw ConfigError("synth_cells: image_size must be >= 8");
  LabeledDataset ds;
  ds.class_names = {"healthy", "parasitized"};
  ds.items.reserve(2 * n_per_class);
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (int c = 0; c < 2; ++c) {
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(ood ? 1 : 0), static_cast<std::uint32_t>(c),
                        static_cast<std::uint32_t>(i)};
      std::mt19937_64 rng(seq);
      ds.items.push_back({draw_cell(rng, image_size, c == 1, ood), c});
    }
  }
  return ds;
}

}  // namespace sentinel

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>

#include "sentinel/attacks.hpp"
#include "sentinel/errors.hpp"

namespace sentinel {

namespace {

// 3x5 bitmap glyphs, one row per string, '#' = ink.
const std::array<std::array<const char*, 5>, 12> kGlyphs{{
    {"###", "#.#", "#.#", "#.#", "###"},  // 0
    {".#.", "##.", ".#.", ".#.", "###"},  // 1
    {"###", "..#", "###", "#..", "###"},  // 2
    {"###", "..#", "###", "..#", "###"},  // 3
    {"#.#", "#.#", "###", "..#", "..#"},  // 4
    {"###", "#..", "###", "..#", "###"},  // 5
    {"###", "#..", "###", "#.#", "###"},  // 6
    {"###", "..#", "..#", "..#", "..#"},  // 7
    {"###", "#.#", "###", "#.#", "###"},  // 8
    {"###", "#.#", "###", "..#", "###"},  // 9
    {"...", "...", "...", "...", ".#."},  // .
    {"...", ".#.", "...", ".#.", "..."},  // :
}};

int glyph_index(char ch) {
  if (ch >= '0' && ch <= '9') return ch - '0';
  if (ch == '.') return 10;
  if (ch == ':') return 11;
  return -1;
}

constexpr std::size_t kGlyphScale = 2;
constexpr std::size_t kGlyphAdvance = 4 * kGlyphScale;

void draw_text(Tensor& img, std::size_t top, std::size_t left, const std::string& text) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  for (std::size_t k = 0; k < text.size(); ++k) {
    const int g = glyph_index(text[k]);
    if (g < 0) continue;
    for (std::size_t r = 0; r < 5 * kGlyphScale; ++r) {
      for (std::size_t c = 0; c < 3 * kGlyphScale; ++c) {
        if (kGlyphs[static_cast<std::size_t>(g)][r / kGlyphScale][c / kGlyphScale] != '#') continue;
        const std::size_t y = top + r, x = left + k * kGlyphAdvance + c;
        if (y >= h || x >= w) continue;
        for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * h + y) * w + x] = 1.0f;
      }
    }
  }
}

}  // namespace

ContactSheet fgsm_contact_sheet(const Classifier& model, const LabeledDataset& examples, std::span<const double> eps,
                                std::size_t panel_scale) {
  if (examples.empty() || eps.empty()) throw ConfigError("contact sheet needs at least one example and one eps");
  if (panel_scale == 0) throw ConfigError("contact sheet panel_scale must be >= 1");
  const Tensor x = examples.batch(0, examples.size());
  const std::vector<int> labels = examples.labels();
  const std::size_t rows = examples.size(), cols = eps.size();
  const std::size_t ih = x.dim(2), iw = x.dim(3), d = x.numel() / rows;

  ContactSheet sheet;
  sheet.eps.assign(eps.begin(), eps.end());
  for (std::size_t r = 0; r < rows; ++r) {
    const auto label = static_cast<std::size_t>(labels[r]);
    sheet.row_labels.push_back(label < examples.class_names.size() ? examples.class_names[label]
                                                                   : std::to_string(label));
  }
  sheet.probability.assign(rows, std::vector<double>(cols, 0.0));
  sheet.mean_abs_delta.assign(rows, std::vector<double>(cols, 0.0));
  sheet.predicted.assign(rows * cols, 0);

  const std::size_t gap = 2, caption = 5 * kGlyphScale + 4;
  const std::size_t ph = ih * panel_scale, pw = std::max(iw * panel_scale, 6 * kGlyphAdvance);
  const std::size_t H = gap + rows * (ph + caption + gap), W = gap + cols * (pw + gap);
  sheet.image = Tensor({3, H, W}, 0.0f);

  for (std::size_t c = 0; c < cols; ++c) {
    const auto e = static_cast<float>(eps[c]);
    const Tensor adv = e > 0.0f ? fgsm(model, x, labels, e) : x;
    const Tensor probs = softmax_logits_to_probs(model.predict_logits(adv));
    const std::size_t nc = probs.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      const float* p = probs.data().data() + r * nc;
      const auto k = static_cast<std::size_t>(std::max_element(p, p + nc) - p);
      sheet.predicted[r * cols + c] = static_cast<int>(k);
      sheet.probability[r][c] = p[k];
      double delta = 0.0;
      for (std::size_t i = 0; i < d; ++i) delta += std::abs(static_cast<double>(adv[r * d + i]) - x[r * d + i]);
      sheet.mean_abs_delta[r][c] = delta / static_cast<double>(d);

      const std::size_t top = gap + r * (ph + caption + gap), left = gap + c * (pw + gap);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t y = 0; y < ph; ++y) {
          for (std::size_t xx = 0; xx < iw * panel_scale; ++xx) {
            sheet.image[(ch * H + top + y) * W + left + xx] =
                adv[r * d + (ch * ih + y / panel_scale) * iw + xx / panel_scale];
          }
        }
      }
      char text[32];
      std::snprintf(text, sizeof text, "%zu:%.2f", k, static_cast<double>(p[k]));
      draw_text(sheet.image, top + ph + 2, left, text);
    }
  }
  return sheet;
}

}  // namespace sentinel

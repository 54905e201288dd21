#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "sentinel/data.hpp"
#include "sentinel/errors.hpp"
#include "sentinel/io.hpp"
#include "support.hpp"

using namespace sentinel;

namespace {

std::string ppm_bytes(std::size_t w, std::size_t h, const std::vector<unsigned char>& rgb) {
  std::string s = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  s.append(rgb.begin(), rgb.end());
  return s;
}

LabeledDataset numbered(std::size_t per_class, std::size_t classes) {
  LabeledDataset d;
  for (std::size_t c = 0; c < classes; ++c) d.class_names.push_back("c" + std::to_string(c));
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i)
      d.items.push_back({Tensor({3, 1, 1}, static_cast<float>(c * 1000 + i)), static_cast<int>(c)});
  return d;
}

std::multiset<float> keys(const LabeledDataset& d) {
  std::multiset<float> out;
  for (const auto& it : d.items) out.insert(it.image[0]);
  return out;
}

}  // namespace

TEST_CASE("decode_pnm: a 1-pixel PPM with bytes (255,0,0) is pure red") {
  const Tensor t = decode_pnm(ppm_bytes(1, 1, {255, 0, 0}));
  CHECK(t.shape() == Shape{3, 1, 1});
  CHECK(t[0] == 1.0f);
  CHECK(t[1] == 0.0f);
  CHECK(t[2] == 0.0f);
}

TEST_CASE("decode_pnm: PGM grey replicates, header comments, maxval scaling") {
  const std::string pgm = "P5\n# comment\n2 1\n255\n" + std::string("\x00\xff", 2);
  const Tensor g = decode_pnm(pgm);
  CHECK(g.shape() == Shape{3, 1, 2});
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(g[c * 2] == 0.0f);
    CHECK(g[c * 2 + 1] == 1.0f);
  }
  CHECK_THROWS_AS(decode_pnm("P3\n1 1\n255\n1 2 3"), FormatError);
  CHECK_THROWS_AS(decode_pnm(ppm_bytes(2, 2, {1, 2, 3})), FormatError);
}

TEST_CASE("encode_ppm round trips 8-bit images exactly") {
  std::mt19937_64 rng(1);
  Tensor img({3, 4, 5});
  std::uniform_int_distribution<int> u(0, 255);
  for (float& v : img.data()) v = static_cast<float>(u(rng)) / 255.0f;
  const Tensor back = decode_pnm(encode_ppm(img));
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(back[i] == img[i]);
}

TEST_CASE("load_image_dir: two classes with two files each") {
  const auto root = testing::temp_dir("load_two");
  for (const char* cls : {"parasitized", "healthy"}) {
    std::filesystem::create_directories(root / cls);
    for (int i = 0; i < 2; ++i) io::write_file_atomic(root / cls / ("f" + std::to_string(i) + ".ppm"), ppm_bytes(1, 1, {9, 9, 9}));
  }
  LoadReport rep;
  const LabeledDataset d = load_image_dir(root, {}, &rep);
  CHECK(d.size() == 4);
  CHECK(d.num_classes() == 2);
  CHECK(d.class_names == std::vector<std::string>{"healthy", "parasitized"});
  CHECK(d.labels() == std::vector<int>{0, 0, 1, 1});
  CHECK(rep.loaded == 4);
  CHECK(rep.skipped == 0);
}

TEST_CASE("load_image_dir: empty class in strict mode names the directory") {
  const auto root = testing::temp_dir("load_empty");
  std::filesystem::create_directories(root / "healthy");
  std::filesystem::create_directories(root / "parasitized");
  io::write_file_atomic(root / "healthy" / "a.ppm", ppm_bytes(1, 1, {1, 2, 3}));
  LoadOptions strict;
  strict.strict = true;
  try {
    load_image_dir(root, strict);
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("parasitized") != std::string::npos);
  }
}

TEST_CASE("load_image_dir: undecodable file is skipped with a warning, or fatal when strict") {
  const auto root = testing::temp_dir("load_bad");
  for (const char* cls : {"a", "b"}) {
    std::filesystem::create_directories(root / cls);
    io::write_file_atomic(root / cls / "ok.ppm", ppm_bytes(1, 1, {1, 2, 3}));
  }
  io::write_file_atomic(root / "b" / "broken.ppm", "P6\n9 9\n255\nxx");
  LoadReport rep;
  const LabeledDataset d = load_image_dir(root, {}, &rep);
  CHECK(d.size() == 2);
  CHECK(rep.skipped == 1);
  REQUIRE(rep.warnings.size() == 1);
  CHECK(rep.warnings[0].find("broken.ppm") != std::string::npos);
  LoadOptions strict;
  strict.strict = true;
  CHECK_THROWS(load_image_dir(root, strict));
  CHECK_THROWS(load_image_dir(root / "missing"));
}

TEST_CASE("load_image_dir: mixed sizes need image_size, which resizes all") {
  const auto root = testing::temp_dir("load_sizes");
  for (const char* cls : {"a", "b"}) std::filesystem::create_directories(root / cls);
  io::write_file_atomic(root / "a" / "x.ppm", ppm_bytes(1, 1, {0, 0, 0}));
  io::write_file_atomic(root / "b" / "y.ppm", ppm_bytes(2, 1, {0, 0, 0, 0, 0, 0}));
  CHECK_THROWS(load_image_dir(root));
  LoadOptions opt;
  opt.image_size = 4;
  const LabeledDataset d = load_image_dir(root, opt);
  for (const auto& it : d.items) CHECK(it.image.shape() == Shape{3, 4, 4});
}

TEST_CASE("write_image_dir and load_image_dir are inverse") {
  const LabeledDataset d = synth_cells(3, 5, false, 16);
  const auto root = testing::temp_dir("write_dir");
  write_image_dir(d, root / "ds");
  const LabeledDataset back = load_image_dir(root / "ds");
  CHECK(back.class_names == d.class_names);
  // The generator interleaves classes; the directory groups them.
  std::vector<LabeledItem> grouped = d.items;
  std::stable_sort(grouped.begin(), grouped.end(), [](const auto& a, const auto& b) { return a.label < b.label; });
  REQUIRE(back.size() == grouped.size());
  for (std::size_t i = 0; i < grouped.size(); ++i) {
    CHECK(back.items[i].label == grouped[i].label);
    for (std::size_t k = 0; k < grouped[i].image.numel(); ++k)
      CHECK(std::abs(back.items[i].image[k] - grouped[i].image[k]) <= 0.5f / 255.0f + 1e-6f);
  }
}

TEST_CASE("resize_bilinear: identity is bit exact, constants stay constant") {
  std::mt19937_64 rng(2);
  const Tensor img = testing::random_tensor({3, 7, 5}, rng, 0, 1);
  CHECK(resize_bilinear(img, 7, 5) == img);
  const Tensor flat({3, 3, 9}, 0.3f);
  for (auto [h, w] : {std::pair{1, 1}, {5, 2}, {17, 31}}) {
    const Tensor r = resize_bilinear(flat, h, w);
    CHECK(r.shape() == Shape{3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
    for (float v : r.data()) CHECK(v == doctest::Approx(0.3f).epsilon(1e-6));
  }
  CHECK_THROWS(resize_bilinear(flat, 0, 4));
}

TEST_CASE("resize_bilinear: 2x2 checkerboard to 4x4 matches the closed-form bilinear value") {
  Tensor board({3, 2, 2});
  const double src[2][2] = {{1, 0}, {0, 1}};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) board[(c * 2 + y) * 2 + x] = static_cast<float>(src[y][x]);
  const Tensor r = resize_bilinear(board, 4, 4);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        const double u = i / 3.0, v = j / 3.0;  // corner-aligned source coordinates
        const double expect = (1 - u) * (1 - v) * src[0][0] + (1 - u) * v * src[0][1] + u * (1 - v) * src[1][0] +
                              u * v * src[1][1];
        CHECK(std::abs(r[(c * 4 + i) * 4 + j] - expect) < 1e-6);
      }
}

TEST_CASE("augment: zero ranges are the identity, 360 degrees equals 0, seeds repeat") {
  const LabeledDataset d = synth_cells(1, 3, false, 24);
  const Tensor& img = d.items[0].image;
  std::mt19937_64 rng(1);
  CHECK(augment(img, AugmentConfig{}, rng) == img);

  AffineParams full;
  full.rotate_deg = 360.0;
  const Tensor a = affine_resample(img, full), b = affine_resample(img, AffineParams{});
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-6);
  CHECK(b == img);

  AugmentConfig cfg{15, 0.1, 0.1, 0.1};
  std::mt19937_64 r1(9), r2(9);
  const Tensor x1 = augment(img, cfg, r1), x2 = augment(img, cfg, r2);
  CHECK(x1 == x2);
  CHECK_FALSE(x1 == img);
  for (float v : x1.data()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  CHECK_THROWS((AugmentConfig{-1, 0, 0, 0}.validate()));
}

TEST_CASE("affine_resample: integer translation shifts pixels and clamps the border") {
  Tensor img({1, 1, 4});
  for (std::size_t i = 0; i < 4; ++i) img[i] = static_cast<float>(i) / 4.0f;
  AffineParams p;
  p.translate_x = 1.0;
  const Tensor t = affine_resample(img.reshaped({1, 1, 4}), p);
  CHECK(t.values() == std::vector<float>{0.0f, 0.0f, 0.25f, 0.5f});
}

TEST_CASE("split: 100 items (50/50) at 60:10:30") {
  const auto s = split(numbered(50, 2), SplitSpec{0.6, 0.1, 0.3, 1});
  CHECK(s.train.size() == 60);
  CHECK(s.val.size() == 10);
  CHECK(s.test.size() == 30);
  const auto rl = s.train.labels(), vl = s.val.labels(), tl = s.test.labels();
  for (int c = 0; c < 2; ++c) {
    CHECK(std::count(rl.begin(), rl.end(), c) == 30);
    CHECK(std::count(vl.begin(), vl.end(), c) == 5);
    CHECK(std::count(tl.begin(), tl.end(), c) == 15);
  }
}

TEST_CASE("split: 10 items at 60:10:30 gives 6/1/3, disjoint") {
  // Single class: stratifying 5/5 would floor val to 0 per class.
  const auto s = split(numbered(10, 1), SplitSpec{0.6, 0.1, 0.3, 4});
  CHECK(s.train.size() == 6);
  CHECK(s.val.size() == 1);
  CHECK(s.test.size() == 3);
  std::multiset<float> all = keys(s.train);
  for (float k : keys(s.val)) all.insert(k);
  for (float k : keys(s.test)) all.insert(k);
  CHECK(std::set<float>(all.begin(), all.end()).size() == 10);
}

TEST_CASE("split: union is the dataset as a multiset, deterministic, stratified within 1") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t classes = 1 + rng() % 4;
    LabeledDataset d;
    for (std::size_t c = 0; c < classes; ++c) d.class_names.push_back(std::to_string(c));
    for (std::size_t i = 0; i < 3 * classes + rng() % 80; ++i) {
      const int c = static_cast<int>(i < 3 * classes ? i % classes : rng() % classes);
      d.items.push_back({Tensor({3, 1, 1}, static_cast<float>(i % 7)), c});
    }
    const SplitSpec spec{0.6, 0.1, 0.3, rng()};
    const auto s = split(d, spec);
    std::multiset<float> u = keys(s.train);
    for (float k : keys(s.val)) u.insert(k);
    for (float k : keys(s.test)) u.insert(k);
    CHECK(u == keys(d));
    CHECK(s.train.size() + s.val.size() + s.test.size() == d.size());
    const auto again = split(d, spec);
    CHECK(again.val.labels() == s.val.labels());
    CHECK(keys(again.test) == keys(s.test));
    for (std::size_t c = 0; c < classes; ++c) {
      const auto count = [&](const LabeledDataset& part) {
        const auto l = part.labels();
        return static_cast<double>(std::count(l.begin(), l.end(), static_cast<int>(c)));
      };
      const double n = count(d);
      CHECK(std::abs(count(s.val) - 0.1 * n) < 1.0);
      CHECK(std::abs(count(s.test) - 0.3 * n) < 1.0);
      CHECK(std::abs(count(s.train) - 0.6 * n) <= 2.0);  // receives both remainders
    }
  }
}

TEST_CASE("split rejects fractions that do not sum to 1") {
  CHECK_THROWS((SplitSpec{0.6, 0.1, 0.2, 0}.validate()));
  CHECK_THROWS(split(numbered(10, 2), SplitSpec{0.5, 0.1, 0.3, 0}));
  CHECK_THROWS((SplitSpec{1.0, 0.0, 0.0, 0}.validate()));
}

TEST_CASE("synth_cells: deterministic bytes, labels, range") {
  const LabeledDataset a = synth_cells(4, 11, false), b = synth_cells(4, 11, false);
  REQUIRE(a.size() == 8);
  CHECK(a.class_names == std::vector<std::string>{"healthy", "parasitized"});
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(encode_ten(a.items[i].image) == encode_ten(b.items[i].image));
    CHECK(a.items[i].label == b.items[i].label);
    CHECK(a.items[i].image.shape() == Shape{3, 32, 32});
    for (float v : a.items[i].image.data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  const LabeledDataset more = synth_cells(6, 11, false);
  CHECK(encode_ten(more.items[0].image) == encode_ten(a.items[0].image));
  CHECK_THROWS(synth_cells(0, 1, false));
}

TEST_CASE("synth_cells: OOD per-channel means differ by more than 0.05") {
  const LabeledDataset in = synth_cells(100, 7, false), ood = synth_cells(100, 7, true);
  double max_diff = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    double a = 0, b = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const std::size_t hw = in.items[i].image.numel() / 3;
      for (std::size_t k = 0; k < hw; ++k) {
        a += in.items[i].image[c * hw + k];
        b += ood.items[i].image[c * hw + k];
      }
      n += hw;
    }
    max_diff = std::max(max_diff, std::abs(a - b) / static_cast<double>(n));
  }
  MESSAGE("largest per-channel mean difference " << max_diff);
  CHECK(max_diff > 0.05);
}

TEST_CASE("parasitized cells are darker inside the cell than healthy ones on average") {
  const LabeledDataset d = synth_cells(50, 3, false);
  double mins[2] = {0, 0};
  for (const auto& it : d.items) {
    const std::size_t hw = it.image.numel() / 3;
    // Darkest green value in the central region, where inclusions sit.
    float m = 1.0f;
    for (std::size_t y = 10; y < 22; ++y)
      for (std::size_t x = 10; x < 22; ++x) m = std::min(m, it.image[hw + y * 32 + x]);
    mins[it.label] += m;
  }
  CHECK(mins[1] < mins[0]);
}

#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "doctest.h"
#include "sentinel/attacks.hpp"
#include "sentinel/errors.hpp"
#include "sentinel/io.hpp"
#include "support.hpp"

using namespace sentinel;
using testing::LinearBinary;

namespace {

struct LinearCase {
  LinearBinary model;
  Tensor x;  // [1,3,4,4], interior of [0,1]
};

/// Random linear model and a point whose minimal perturbation stays well
/// inside the unit box, so the unconstrained closed forms apply.
LinearCase linear_case(std::uint64_t seed, bool class1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f), px(0.3f, 0.7f);
  const std::size_t d = 48;
  std::vector<float> w(d);
  for (float& v : w) v = u(rng);
  Tensor x({1, 3, 4, 4});
  for (float& v : x.data()) v = px(rng);
  double wx = 0, ww = 0;
  for (std::size_t i = 0; i < d; ++i) wx += static_cast<double>(w[i]) * x[i], ww += static_cast<double>(w[i]) * w[i];
  // Place f(x) at +-0.6 * ||w||, i.e. 0.6 L2 units from the boundary.
  const double target = (class1 ? 0.6 : -0.6) * std::sqrt(ww);
  return {LinearBinary(w, static_cast<float>(target - wx)), x};
}

double l2_dist(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::pow(static_cast<double>(a[i]) - b[i], 2);
  return std::sqrt(s);
}

double linf_dist(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s = std::max(s, std::abs(static_cast<double>(a[i]) - b[i]));
  return s;
}

void check_box(const Tensor& t) {
  for (float v : t.data()) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }
}

}  // namespace

TEST_CASE("attack kinds parse and configs validate") {
  CHECK(parse_attack_kind("fgsm") == AttackKind::FGSM);
  CHECK(parse_attack_kind("DeepFool") == AttackKind::DeepFool);
  CHECK(parse_attack_kind("cw-l2") == AttackKind::CW);
  CHECK(attack_name(AttackKind::BIM) == "BIM");
  CHECK_THROWS_AS(parse_attack_kind("pgd"), ConfigError);
  AttackConfig c;
  CHECK_NOTHROW(c.validate());
  c.eps = -0.1f;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.eps = 0.1f;
  c.kind = AttackKind::BIM;
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.kind = AttackKind::CW;
  c.steps = 1;
  c.iterations = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("project_linf holds the budget exactly and clamps to [0,1]") {
  std::mt19937_64 rng(1);
  for (double eps : {0.1, 1.0 / 3.0, 0.0014, 0.3}) {
    const Tensor x = testing::random_tensor({4000}, rng, 0, 1);
    const Tensor c = testing::random_tensor({4000}, rng, -1, 2);
    const Tensor p = project_linf(x, c, eps);
    check_box(p);
    CHECK(linf_dist(p, x) <= eps);
  }
}

TEST_CASE("FGSM and BIM: eps 0 is the identity, BIM(1 step, step eps) equals FGSM bit for bit") {
  const auto& fx = testing::trained_fixture();
  const Tensor x = fx.splits.test.batch(0, 16);
  std::vector<int> labels(16);
  for (std::size_t i = 0; i < 16; ++i) labels[i] = fx.splits.test.items[i].label;
  CHECK(fgsm(fx.model, x, labels, 0.0f) == x);
  CHECK(bim(fx.model, x, labels, 0.0f, 10, 0.02f) == x);
  for (float eps : {0.01f, 0.1f, 0.3f}) {
    const Tensor a = fgsm(fx.model, x, labels, eps), b = bim(fx.model, x, labels, eps, 1, eps);
    CHECK(std::memcmp(a.data().data(), b.data().data(), a.numel() * 4) == 0);
    check_box(a);
    CHECK(linf_dist(a, x) <= eps);
  }
  const Tensor many = bim(fx.model, x, labels, 0.05f, 10, 0.02f);
  check_box(many);
  CHECK(linf_dist(many, x) <= 0.05f);
}

TEST_CASE("FGSM step sign matches the sign of a finite-difference loss gradient") {
  const auto& fx = testing::trained_fixture();
  const Tensor x = fx.splits.test.batch(0, 1);
  const std::vector<int> labels{fx.splits.test.items[0].label};
  const float eps = 1e-3f;
  const Tensor adv = fgsm(fx.model, x, labels, eps);
  auto loss = [&](const testing::DT& xd, std::vector<std::uint8_t>* pattern) {
    auto out = testing::ref_smallcnn(fx.model, xd);
    *pattern = std::move(out.pattern);
    testing::RefOps ops;
    return ops.cross_entropy(out.logits, labels).v[0];
  };
  testing::DT xd(x);
  std::mt19937_64 rng(2);
  int checked = 0;
  while (checked < 10) {
    const std::size_t i = rng() % x.numel();
    if (x[i] < 2 * eps || x[i] > 1 - 2 * eps) continue;
    const double orig = xd.v[i], h = 1e-4;
    std::vector<std::uint8_t> pu, pd;
    xd.v[i] = orig + h;
    const double up = loss(xd, &pu);
    xd.v[i] = orig - h;
    const double down = loss(xd, &pd);
    xd.v[i] = orig;
    const double fd = (up - down) / (2 * h);
    if (pu != pd || std::abs(fd) < 1e-7) continue;  // kink in the stencil or an unresolvable sign
    const double step = static_cast<double>(adv[i]) - x[i];
    CHECK_MESSAGE((step > 0) == (fd > 0), "pixel " << i << " fd " << fd);
    ++checked;
  }
}

TEST_CASE("DeepFool on a linear binary model matches the closed form") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto lc = linear_case(seed, seed % 2 == 0);
    const double f = lc.model.f(lc.x.data()), ww = lc.model.w_norm_sq();
    for (double overshoot : {0.0, 0.02}) {
      const auto r = deepfool(lc.model, lc.x, 50, overshoot);
      const Tensor& adv = r.adversarial;
      for (std::size_t i = 0; i < adv.numel(); ++i) {
        const double expect = lc.x[i] - (1 + overshoot) * f * lc.model.w()[i] / ww;
        CHECK(std::abs(adv[i] - expect) < 1e-6);
      }
      if (overshoot == 0.0) {
        CHECK(std::abs(lc.model.f(adv.data())) < 1e-5);
      } else {
        CHECK(r.fooled[0]);
        CHECK(r.iterations[0] == 1);
      }
    }
  }
}

TEST_CASE("DeepFool: misclassified input exits after 0 iterations, zero gradient aborts") {
  const auto lc = linear_case(3, true);  // predicted class 1
  const std::vector<int> wrong{0};
  const auto r = deepfool(lc.model, lc.x, 50, 0.02, wrong);
  CHECK(r.iterations[0] == 0);
  CHECK(r.adversarial == lc.x);

  const LinearBinary flat(std::vector<float>(48, 0.0f), 1.0f);
  const auto z = deepfool(flat, lc.x, 50, 0.02);
  CHECK(z.zero_gradient[0]);
  CHECK_FALSE(z.fooled[0]);
  CHECK(z.adversarial == lc.x);
}

TEST_CASE("CW on the linear model lands within 10% of |f(x)| / ||w||") {
  AttackConfig cfg;
  cfg.kind = AttackKind::CW;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto lc = linear_case(seed, seed % 2 == 1);
    const std::vector<int> labels{seed % 2 == 1 ? 1 : 0};
    const double minimal = std::abs(lc.model.f(lc.x.data())) / std::sqrt(lc.model.w_norm_sq());
    const auto r = cw_l2(lc.model, lc.x, labels, cfg);
    REQUIRE(r.success[0]);
    check_box(r.adversarial);
    CHECK(r.l2[0] == doctest::Approx(l2_dist(r.adversarial, lc.x)).epsilon(1e-6));
    MESSAGE("seed " << seed << " L2 " << r.l2[0] << " vs minimal " << minimal);
    CHECK(r.l2[0] >= minimal * (1 - 1e-6));
    CHECK(r.l2[0] <= 1.1 * minimal);
  }
}

TEST_CASE("CW on an already misclassified input succeeds with L2 near 0") {
  const auto lc = linear_case(4, true);
  const std::vector<int> wrong{0};
  AttackConfig cfg;
  cfg.kind = AttackKind::CW;
  const auto r = cw_l2(lc.model, lc.x, wrong, cfg);
  CHECK(r.success[0]);
  CHECK(r.l2[0] < 1e-3);
}

TEST_CASE("BIM success rate is non-decreasing in steps") {
  const auto& fx = testing::trained_fixture();
  double prev = -1.0;
  for (std::size_t steps : {1, 5, 10}) {
    AttackConfig cfg;
    cfg.kind = AttackKind::BIM;
    cfg.eps = 0.03f;
    cfg.step_size = 0.005f;
    cfg.steps = steps;
    const double rate = run_attack(fx.model, fx.splits.test, cfg, 120).success_rate();
    MESSAGE("steps " << steps << " success " << rate);
    CHECK(rate >= prev);
    prev = rate;
  }
}

TEST_CASE("run_attack: accounting, norms, determinism, save/load round trip") {
  const auto& fx = testing::trained_fixture();
  AttackConfig cfg;
  cfg.kind = AttackKind::DeepFool;
  const auto a = run_attack(fx.model, fx.splits.test, cfg, 40);
  const auto b = run_attack(fx.model, fx.splits.test, cfg, 40);
  REQUIRE(a.size() == 40);
  CHECK(encode_ten(a.perturbed) == encode_ten(b.perturbed));
  check_box(a.perturbed);
  const auto pred_adv = fx.model.predict(a.perturbed);
  const auto pred_orig = fx.model.predict(a.original);
  const std::size_t per = a.original.numel() / a.size();
  for (std::size_t n = 0; n < a.size(); ++n) {
    CHECK(a.original_pred[n] == a.true_labels[n]);
    CHECK(pred_orig[n] == a.original_pred[n]);
    CHECK(a.adversarial_pred[n] == pred_adv[n]);
    CHECK(a.success[n] == (a.adversarial_pred[n] != a.original_pred[n]));
    double l2 = 0, linf = 0;
    for (std::size_t i = 0; i < per; ++i) {
      const double d = static_cast<double>(a.perturbed[n * per + i]) - a.original[n * per + i];
      l2 += d * d;
      linf = std::max(linf, std::abs(d));
    }
    CHECK(std::abs(a.l2[n] - std::sqrt(l2)) < 1e-6);
    CHECK(std::abs(a.linf[n] - linf) < 1e-6);
  }
  MESSAGE("DeepFool success " << a.success_rate());
  CHECK(a.success_rate() > 0.9);

  const auto dir = testing::temp_dir("advbatch");
  save_adversarial_batch(dir / "DeepFool", a);
  const auto back = load_adversarial_batch(dir / "DeepFool");
  CHECK(encode_ten(back.perturbed) == encode_ten(a.perturbed));
  CHECK(back.success == a.success);
  CHECK(back.l2 == a.l2);
  CHECK(back.source_indices == a.source_indices);
  CHECK(back.config.kind == AttackKind::DeepFool);
}

TEST_CASE("CW successes have smaller mean L2 than BIM successes, both at >= 90% success") {
  const auto& fx = testing::trained_fixture();
  // Budgets matched on success rate: BIM needs eps 0.2 to pass 90% here.
  AttackConfig bim_cfg;
  bim_cfg.kind = AttackKind::BIM;
  bim_cfg.eps = 0.2f;
  bim_cfg.step_size = 0.04f;
  AttackConfig cw_cfg;
  cw_cfg.kind = AttackKind::CW;
  const auto b = run_attack(fx.model, fx.splits.test, bim_cfg, 24);
  const auto c = run_attack(fx.model, fx.splits.test, cw_cfg, 24);
  auto mean_success_l2 = [](const AdversarialBatch& batch) {
    double s = 0;
    std::size_t k = 0;
    for (std::size_t n = 0; n < batch.size(); ++n)
      if (batch.success[n]) s += batch.l2[n], ++k;
    return s / static_cast<double>(std::max<std::size_t>(k, 1));
  };
  MESSAGE("BIM success " << b.success_rate() << " mean L2 " << mean_success_l2(b));
  MESSAGE("CW success " << c.success_rate() << " mean L2 " << mean_success_l2(c));
  CHECK(b.success_rate() >= 0.9);
  CHECK(c.success_rate() >= 0.9);
  CHECK(mean_success_l2(c) < mean_success_l2(b));
  check_box(c.perturbed);
}

TEST_CASE("FGSM contact sheet: grid, captions, noise grows with eps") {
  const auto& fx = testing::trained_fixture();
  LabeledDataset examples;
  examples.class_names = fx.splits.test.class_names;
  for (int c = 0; c < 2; ++c)
    for (const auto& it : fx.splits.test.items)
      if (it.label == c) {
        examples.items.push_back(it);
        break;
      }
  const std::vector<double> eps{0.0, 0.1, 0.2, 0.3};
  const auto sheet = fgsm_contact_sheet(fx.model, examples, eps, 2);
  CHECK(sheet.image.dim(0) == 3);
  CHECK(sheet.image.dim(2) > 4 * 64);
  CHECK(sheet.row_labels.size() == 2);
  CHECK(sheet.predicted.size() == 8);
  for (std::size_t r = 0; r < 2; ++r) {
    CHECK(sheet.mean_abs_delta[r][0] == 0.0);
    for (std::size_t c = 1; c < 4; ++c) CHECK(sheet.mean_abs_delta[r][c] > sheet.mean_abs_delta[r][c - 1]);
    for (double p : sheet.probability[r]) {
      CHECK(p >= 0.5);
      CHECK(p <= 1.0);
    }
  }
  check_box(sheet.image);
}

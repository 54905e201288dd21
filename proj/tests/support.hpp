#pragma once

// Test-side oracles: a double-precision reference implementation of the ops
// (independent of the library kernels), random network programs that run on
// either backend, and small fixtures shared by several test files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "sentinel/autodiff.hpp"
#include "sentinel/data.hpp"
#include "sentinel/model.hpp"
#include "sentinel/tensor.hpp"

namespace testing {

using sentinel::Shape;
using sentinel::Tensor;
using sentinel::Var;

// ---- double reference backend ----------------------------------------------------

struct DT {
  Shape shape;
  std::vector<double> v;

  DT() = default;
  DT(Shape s, double fill = 0.0) : shape(std::move(s)), v(sentinel::shape_numel(shape), fill) {}
  explicit DT(const Tensor& t) : shape(t.shape()), v(t.data().begin(), t.data().end()) {}
  std::size_t dim(std::size_t i) const { return shape[i]; }
  std::size_t numel() const { return v.size(); }
};

struct RefOps {
  using V = DT;
  // Smallest distance of any relu input / clamp input / max-pool runner-up to
  // a kink; finite differences are only trusted when this is comfortably large.
  double margin = std::numeric_limits<double>::infinity();
  // Which side of each kink every element landed on; two evaluations with the
  // same pattern lie in one smooth piece.
  std::vector<std::uint8_t> pattern;

  DT conv(const DT& x, const DT& k, std::size_t stride, std::size_t pad) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t f = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
    DT out({n, f, oh, ow});
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t o = 0; o < f; ++o)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx) {
            double acc = 0.0;
            for (std::size_t ci = 0; ci < c; ++ci)
              for (std::size_t i = 0; i < kh; ++i)
                for (std::size_t j = 0; j < kw; ++j) {
                  const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                  const long ix = static_cast<long>(xx * stride + j) - static_cast<long>(pad);
                  if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                  acc += x.v[((s * c + ci) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] *
                         k.v[((o * c + ci) * kh + i) * kw + j];
                }
            out.v[((s * f + o) * oh + y) * ow + xx] = acc;
          }
    return out;
  }
  DT bias(const DT& x, const DT& b) {
    DT out = x;
    const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t i = 0; i < inner; ++i) out.v[(s * c + ci) * inner + i] += b.v[ci];
    return out;
  }
  DT linear(const DT& x, const DT& w, const DT& b) {
    const std::size_t n = x.dim(0), in = x.dim(1), o = w.dim(0);
    DT out({n, o});
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t j = 0; j < o; ++j) {
        double acc = b.v[j];
        for (std::size_t i = 0; i < in; ++i) acc += x.v[s * in + i] * w.v[j * in + i];
        out.v[s * o + j] = acc;
      }
    return out;
  }
  DT relu(const DT& x) {
    DT out = x;
    for (double& e : out.v) {
      margin = std::min(margin, std::abs(e));
      pattern.push_back(e > 0.0);
      e = e > 0.0 ? e : 0.0;
    }
    return out;
  }
  DT tanh(const DT& x) {
    DT out = x;
    for (double& e : out.v) e = std::tanh(e);
    return out;
  }
  DT clamp(const DT& x, double lo, double hi) {
    DT out = x;
    for (double& e : out.v) {
      margin = std::min({margin, std::abs(e - lo), std::abs(e - hi)});
      pattern.push_back(static_cast<std::uint8_t>((e > lo) + (e > hi)));
      e = std::clamp(e, lo, hi);
    }
    return out;
  }
  DT maxpool(const DT& x) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / 2, ow = w / 2;
    DT out({n, c, oh, ow});
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double vals[4];
          for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j) vals[i * 2 + j] = x.v[(p * h + 2 * y + i) * w + 2 * xx + j];
          pattern.push_back(static_cast<std::uint8_t>(std::max_element(vals, vals + 4) - vals));
          std::sort(vals, vals + 4);
          margin = std::min(margin, vals[3] - vals[2]);
          out.v[(p * oh + y) * ow + xx] = vals[3];
        }
    return out;
  }
  DT gap(const DT& x) {
    const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
    DT out({n, c});
    for (std::size_t p = 0; p < n * c; ++p) {
      double acc = 0.0;
      for (std::size_t i = 0; i < inner; ++i) acc += x.v[p * inner + i];
      out.v[p] = acc / static_cast<double>(inner);
    }
    return out;
  }
  DT flatten(const DT& x) {
    DT out = x;
    out.shape = {x.dim(0), x.numel() / x.dim(0)};
    return out;
  }
  DT log_softmax(const DT& z) {
    const std::size_t n = z.dim(0), c = z.dim(1);
    DT out = z;
    for (std::size_t s = 0; s < n; ++s) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j) m = std::max(m, z.v[s * c + j]);
      double acc = 0.0;
      for (std::size_t j = 0; j < c; ++j) acc += std::exp(z.v[s * c + j] - m);
      for (std::size_t j = 0; j < c; ++j) out.v[s * c + j] = z.v[s * c + j] - m - std::log(acc);
    }
    return out;
  }
  DT softmax(const DT& z) {
    DT out = log_softmax(z);
    for (double& e : out.v) e = std::exp(e);
    return out;
  }
  DT cross_entropy(const DT& z, const std::vector<int>& labels) {
    const DT ls = log_softmax(z);
    const std::size_t n = z.dim(0), c = z.dim(1);
    double acc = 0.0;
    for (std::size_t s = 0; s < n; ++s) acc -= ls.v[s * c + static_cast<std::size_t>(labels[s])];
    return scalar(acc / static_cast<double>(n));
  }
  DT dot_const(const DT& x, const Tensor& w) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x.v[i] * w[i];
    return scalar(acc);
  }
  DT add(const DT& a, const DT& b) { return zip(a, b, [](double p, double q) { return p + q; }); }
  DT sub(const DT& a, const DT& b) { return zip(a, b, [](double p, double q) { return p - q; }); }
  DT mul(const DT& a, const DT& b) { return zip(a, b, [](double p, double q) { return p * q; }); }
  DT scale(const DT& a, float f) {
    DT out = a;
    for (double& e : out.v) e *= static_cast<double>(f);
    return out;
  }
  DT sum(const DT& a) {
    double acc = 0.0;
    for (double e : a.v) acc += e;
    return scalar(acc);
  }

 private:
  static DT scalar(double v) {
    DT out({1});
    out.v[0] = v;
    return out;
  }
  template <typename F>
  static DT zip(const DT& a, const DT& b, F f) {
    DT out = a;
    for (std::size_t i = 0; i < a.numel(); ++i) out.v[i] = f(a.v[i], b.v[i]);
    return out;
  }
};

struct TapeOps {
  using V = Var;
  V conv(V x, V k, std::size_t stride, std::size_t pad) { return sentinel::conv2d(x, k, stride, pad); }
  V bias(V x, V b) { return sentinel::add_channel_bias(x, b); }
  V linear(V x, V w, V b) { return sentinel::linear(x, w, b); }
  V relu(V x) { return sentinel::relu(x); }
  V tanh(V x) { return sentinel::tanh(x); }
  V clamp(V x, double lo, double hi) { return sentinel::clamp(x, static_cast<float>(lo), static_cast<float>(hi)); }
  V maxpool(V x) { return sentinel::maxpool2d(x, 2); }
  V gap(V x) { return sentinel::global_avg_pool(x); }
  V flatten(V x) { return sentinel::flatten(x); }
  V log_softmax(V z) { return sentinel::log_softmax(z); }
  V softmax(V z) { return sentinel::softmax(z); }
  V cross_entropy(V z, const std::vector<int>& labels) { return sentinel::cross_entropy_loss(z, labels); }
  V dot_const(V x, const Tensor& w) { return sentinel::dot_const(x, w); }
  V add(V a, V b) { return sentinel::add(a, b); }
  V sub(V a, V b) { return sentinel::sub(a, b); }
  V mul(V a, V b) { return sentinel::mul(a, b); }
  V scale(V a, float f) { return sentinel::scale(a, f); }
  V sum(V a) { return sentinel::sum(a); }
};

// ---- random network programs ---------------------------------------------------

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(u(rng));
  return t;
}

struct NetCase {
  int kind = 0;  // 0 MLP, 1 conv+pool+gap, 2 strided conv+flatten, 3 elementwise mix
  int loss = 0;  // 0 cross-entropy, 1 <log_softmax, w>, 2 <softmax, w>, 3 sum(tanh(z) * z)
  bool relu_act = true;
  Tensor x;
  std::vector<Tensor> params;
  std::vector<int> labels;
  Tensor loss_weights;
  std::size_t classes = 3;
};

/// The structure (kind, loss, activation) comes from `seed`; the values from
/// `draw`, so a case can be redrawn without changing what it exercises.
inline NetCase make_net_case(std::uint64_t seed, std::uint64_t draw = 0) {
  std::mt19937_64 rng(seed + 7919 * draw);
  NetCase c;
  c.kind = static_cast<int>(seed % 4);
  c.loss = static_cast<int>((seed / 4) % 4);
  c.relu_act = (seed / 16) % 2 == 0;
  const std::size_t n = 2;
  c.classes = 3;
  switch (c.kind) {
    case 0:
      c.x = random_tensor({n, 5}, rng);
      c.params = {random_tensor({6, 5}, rng), random_tensor({6}, rng), random_tensor({4, 6}, rng),
                  random_tensor({4}, rng), random_tensor({3, 4}, rng), random_tensor({3}, rng)};
      break;
    case 1:
      c.x = random_tensor({n, 2, 6, 6}, rng, 0.0, 1.0);
      c.params = {random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng), random_tensor({4, 3, 3, 3}, rng),
                  random_tensor({3, 4}, rng), random_tensor({3}, rng)};
      break;
    case 2:
      c.x = random_tensor({n, 2, 5, 5}, rng, 0.0, 1.0);
      c.params = {random_tensor({2, 2, 3, 3}, rng), random_tensor({2}, rng), random_tensor({4, 18}, rng),
                  random_tensor({4}, rng), random_tensor({3, 4}, rng), random_tensor({3}, rng)};
      break;
    default:
      c.x = random_tensor({n, 4}, rng);
      c.params = {random_tensor({3, 4}, rng), random_tensor({3}, rng)};
      break;
  }
  std::uniform_int_distribution<int> lab(0, static_cast<int>(c.classes) - 1);
  for (std::size_t s = 0; s < n; ++s) c.labels.push_back(lab(rng));
  c.loss_weights = random_tensor({n, c.classes}, rng);
  return c;
}

template <typename Ops>
typename Ops::V net_forward(Ops& ops, const NetCase& c, typename Ops::V x, const std::vector<typename Ops::V>& p) {
  auto act = [&](typename Ops::V v) { return c.relu_act ? ops.relu(v) : ops.tanh(v); };
  typename Ops::V z;
  switch (c.kind) {
    case 0:
      z = ops.linear(act(ops.linear(act(ops.linear(x, p[0], p[1])), p[2], p[3])), p[4], p[5]);
      break;
    case 1: {
      auto h = ops.maxpool(ops.relu(ops.bias(ops.conv(x, p[0], 1, 1), p[1])));
      h = ops.gap(ops.tanh(ops.conv(h, p[2], 1, 1)));
      z = ops.linear(h, p[3], p[4]);
      break;
    }
    case 2: {
      auto h = ops.flatten(act(ops.bias(ops.conv(x, p[0], 2, 1), p[1])));
      z = ops.linear(act(ops.linear(h, p[2], p[3])), p[4], p[5]);
      break;
    }
    default: {
      const auto a = ops.linear(x, p[0], p[1]);
      const auto b = ops.tanh(a);
      const auto d = ops.sub(ops.mul(a, b), ops.scale(a, 0.5f));
      z = ops.add(ops.clamp(d, -0.75, 0.75), b);
      break;
    }
  }
  switch (c.loss) {
    case 0: return ops.cross_entropy(z, c.labels);
    case 1: return ops.dot_const(ops.log_softmax(z), c.loss_weights);
    case 2: return ops.dot_const(ops.softmax(z), c.loss_weights);
    default: return ops.sum(ops.mul(ops.tanh(z), z));
  }
}

inline double ref_net_value(const NetCase& c, const DT& x, const std::vector<DT>& p, double* margin = nullptr) {
  RefOps ops;
  const double v = net_forward(ops, c, x, p).v[0];
  if (margin) *margin = ops.margin;
  return v;
}

/// |a - b| / max(|a|, |b|, floor).
inline double rel_err(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheck {
  double max_rel_err = 0.0;
  std::size_t elements = 0;
  std::size_t rejected = 0;  // draws discarded for sitting too close to a kink
};

/// Draws a random NetCase (resampling while any kink is within `min_margin`),
/// differentiates it on a Tape and compares every input and parameter
/// gradient with central differences of the double reference.
inline GradCheck gradient_check(std::uint64_t seed, double h = 1e-5, double min_margin = 1e-3) {
  GradCheck out;
  NetCase c;
  for (std::uint64_t attempt = 0;; ++attempt) {
    c = make_net_case(seed, attempt);
    double margin = 0.0;
    std::vector<DT> p;
    for (const auto& t : c.params) p.emplace_back(t);
    ref_net_value(c, DT(c.x), p, &margin);
    if (margin > min_margin) break;
    ++out.rejected;
  }
  sentinel::Tape tape;
  TapeOps tops;
  const Var xv = tape.leaf(c.x, true);
  std::vector<Var> pv;
  for (const auto& t : c.params) pv.push_back(tape.leaf(t, true));
  tape.backward(net_forward(tops, c, xv, pv));

  DT x(c.x);
  std::vector<DT> p;
  for (const auto& t : c.params) p.emplace_back(t);
  auto fd = [&](DT& target, std::size_t i) {
    const double orig = target.v[i];
    target.v[i] = orig + h;
    const double up = ref_net_value(c, x, p);
    target.v[i] = orig - h;
    const double down = ref_net_value(c, x, p);
    target.v[i] = orig;
    return (up - down) / (2.0 * h);
  };
  auto compare = [&](DT& target, const Tensor& grad) {
    for (std::size_t i = 0; i < target.numel(); ++i) {
      out.max_rel_err = std::max(out.max_rel_err, rel_err(grad[i], fd(target, i)));
      ++out.elements;
    }
  };
  compare(x, tape.grad(xv));
  for (std::size_t k = 0; k < p.size(); ++k) compare(p[k], tape.grad(pv[k]));
  return out;
}

// ---- SmallCNN reference ----------------------------------------------------------

struct RefCnnOut {
  std::vector<DT> features;  // block1, block2, block3_pre, penultimate
  DT logits;
  double margin = 0.0;
  std::vector<std::uint8_t> pattern;
};

/// Straight-line double forward of SmallCNN from its named parameters.
inline RefCnnOut ref_smallcnn(const sentinel::SmallCNN& model, const DT& x) {
  auto param = [&](const std::string& name) {
    for (const auto& [n, t] : model.parameters()) {
      if (n == name) return DT(t);
    }
    throw std::runtime_error("missing parameter " + name);
  };
  RefOps ops;
  RefCnnOut out;
  auto b1 = ops.maxpool(ops.relu(ops.bias(ops.conv(x, param("conv1.weight"), 1, 1), param("conv1.bias"))));
  out.features.push_back(ops.gap(b1));
  auto b2 = ops.maxpool(ops.relu(ops.bias(ops.conv(b1, param("conv2.weight"), 1, 1), param("conv2.bias"))));
  out.features.push_back(ops.gap(b2));
  auto pre3 = ops.bias(ops.conv(b2, param("conv3.weight"), 1, 1), param("conv3.bias"));
  out.features.push_back(ops.gap(pre3));
  auto pen = ops.gap(ops.relu(pre3));
  out.features.push_back(pen);
  out.logits = ops.linear(pen, param("fc.weight"), param("fc.bias"));
  out.margin = ops.margin;
  out.pattern = std::move(ops.pattern);
  return out;
}

// ---- linear algebra oracles -------------------------------------------------------

/// Explicit inverse of a d*d row-major matrix by Gauss-Jordan with partial pivoting.
inline std::vector<double> explicit_inverse(std::vector<double> a, std::size_t d) {
  std::vector<double> inv(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) inv[i * d + i] = 1.0;
  for (std::size_t col = 0; col < d; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < d; ++r)
      if (std::abs(a[r * d + col]) > std::abs(a[piv * d + col])) piv = r;
    for (std::size_t k = 0; k < d; ++k) {
      std::swap(a[col * d + k], a[piv * d + k]);
      std::swap(inv[col * d + k], inv[piv * d + k]);
    }
    const double p = a[col * d + col];
    for (std::size_t k = 0; k < d; ++k) {
      a[col * d + k] /= p;
      inv[col * d + k] /= p;
    }
    for (std::size_t r = 0; r < d; ++r) {
      if (r == col) continue;
      const double f = a[r * d + col];
      for (std::size_t k = 0; k < d; ++k) {
        a[r * d + k] -= f * a[col * d + k];
        inv[r * d + k] -= f * inv[col * d + k];
      }
    }
  }
  return inv;
}

/// v^T M v for row-major M.
inline double quad_form(const std::vector<double>& m, const std::vector<double>& v) {
  const std::size_t d = v.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) acc += v[i] * m[i * d + j] * v[j];
  return acc;
}

/// A A^T + I for A with entries uniform in [-1,1].
inline std::vector<double> random_spd(std::size_t d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> a(d * d), s(d * d, 0.0);
  for (double& v : a) v = u(rng);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t k = 0; k < d; ++k) s[i * d + j] += a[i * d + k] * a[j * d + k];
      if (i == j) s[i * d + j] += 1.0;
    }
  return s;
}

// ---- fixtures --------------------------------------------------------------------

/// Logits [0, w.x + b] over flattened input: a linear binary classifier with
/// decision function f(x) = w.x + b (class 1 iff f > 0).
class LinearBinary : public sentinel::Classifier {
 public:
  LinearBinary(std::vector<float> w, float b) : w_(std::move(w)), b_(b) {}

  Var logits(sentinel::Tape& tape, Var input) const override {
    const std::size_t d = w_.size();
    Tensor weight({2, d}, 0.0f);
    for (std::size_t i = 0; i < d; ++i) weight[d + i] = w_[i];
    Tensor bias({2}, 0.0f);
    bias[1] = b_;
    return sentinel::linear(sentinel::flatten(input), tape.constant(weight), tape.constant(bias));
  }
  std::size_t num_classes() const override { return 2; }

  double f(std::span<const float> x) const {
    double s = b_;
    for (std::size_t i = 0; i < w_.size(); ++i) s += static_cast<double>(w_[i]) * x[i];
    return s;
  }
  double w_norm_sq() const {
    double s = 0.0;
    for (float v : w_) s += static_cast<double>(v) * v;
    return s;
  }
  const std::vector<float>& w() const { return w_; }

 private:
  std::vector<float> w_;
  float b_;
};

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("sentinel_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// A SmallCNN trained on the default synthetic set (32x32, 300/class), cached
/// per process. Deterministic for a given seed.
struct TrainedFixture {
  sentinel::DatasetSplits splits;
  sentinel::SmallCNN model;
};

inline const TrainedFixture& trained_fixture() {
  static const TrainedFixture fx = [] {
    auto ds = sentinel::synth_cells(300, 7, false, 32);
    sentinel::SplitSpec spec;
    spec.seed = 7;
    auto sp = sentinel::split(ds, spec);
    sentinel::ModelSpec ms;
    ms.input_size = 32;
    sentinel::TrainConfig tc;
    tc.seed = 7;
    auto result = sentinel::train(sentinel::SmallCNN(ms, 7), sp.train, sp.val, tc);
    return TrainedFixture{std::move(sp), std::move(result.model)};
  }();
  return fx;
}

}  // namespace testing

#include "sentinel/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

#include "sentinel/errors.hpp"

namespace sentinel {

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return tape_->value(*this);
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw std::logic_error("Var does not belong to this tape");
  return nodes_[v.id_];
}

Tape::Node& Tape::node(Var v) {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw std::logic_error("Var does not belong to this tape");
  return nodes_[v.id_];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr});
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward fn, const char* op) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw std::logic_error(std::string(op) + ": operand from a different tape");
    needs = needs || node(in).requires_grad;
  }
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + " produced a non-finite value (shape " + shape_to_string(value.shape()) +
                       ")");
  }
  nodes_.push_back(Node{std::move(value), Tensor{}, needs, needs ? std::move(fn) : nullptr});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0f);
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape()) {
    throw ShapeError("gradient shape " + shape_to_string(g.shape()) + " does not match value shape " +
                     shape_to_string(n.value.shape()));
  }
  Tensor& buf = grad_buffer(v);
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var scalar) {
  Node& root = node(scalar);
  if (root.value.numel() != 1) {
    throw ShapeError("backward() needs a single-element tensor, got shape " + shape_to_string(root.value.shape()));
  }
  if (backward_done_) throw std::logic_error("backward() already ran on this tape; call clear_grads() or reset()");
  backward_done_ = true;
  if (root.requires_grad) {
    grad_buffer(scalar)[0] = 1.0f;
    for (std::size_t i = scalar.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(n.value, n.grad, *this);
    }
  }
  for (auto& n : nodes_) {
    if (n.requires_grad && n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0f);
  }
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!backward_done_) throw std::logic_error("grad() requested before backward()");
  if (!n.requires_grad) throw std::logic_error("grad() requested for a tensor without requires_grad");
  return n.grad;
}

void Tape::clear_grads() {
  for (auto& n : nodes_) n.grad = Tensor{};
  backward_done_ = false;
}

void Tape::reset() {
  nodes_.clear();
  backward_done_ = false;
}

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got shape " +
                     shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

// C[M,N] += A[M,K] * B[K,N], float operands, double accumulator.
void gemm_acc(const float* a, const float* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * static_cast<double>(brow[j]);
    }
  }
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.f = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (kernel.dim(1) != g.c || g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) {
    throw ShapeError("conv2d: input " + shape_to_string(input.shape()) + " incompatible with kernel " +
                     shape_to_string(kernel.shape()) + " (padding " + std::to_string(padding) + ")");
  }
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;
  return g;
}

// cols[(ci*kh+ki)*kw+kj][oy*ow+ox] for sample `s`.
void im2col(const ConvGeometry& g, const float* x, std::vector<float>& cols) {
  cols.assign(g.patch() * g.pixels(), 0.0f);
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    const float* plane = x + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        float* dst = cols.data() + ((ci * g.kh + ki) * g.kw + kj) * g.pixels();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dst[oy * g.ow + ox] = plane[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* dx) {
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    double* plane = dx + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* src = cols + ((ci * g.kh + ki) * g.kw + kj) * g.pixels();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            plane[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)] += src[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

std::vector<float> transpose(const float* a, std::size_t rows, std::size_t cols) {
  std::vector<float> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  }
  return t;
}

Tensor to_float(const Shape& shape, const std::vector<double>& v) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  return Tensor(shape, std::move(out));
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  const ConvGeometry g = conv_geometry(input, kernel, stride, padding);
  Tensor out(Shape{g.n, g.f, g.oh, g.ow});
  std::vector<float> cols;
  std::vector<double> acc(g.f * g.pixels());
  for (std::size_t s = 0; s < g.n; ++s) {
    im2col(g, input.data().data() + s * g.c * g.h * g.w, cols);
    std::fill(acc.begin(), acc.end(), 0.0);
    gemm_acc(kernel.data().data(), cols.data(), acc.data(), g.f, g.patch(), g.pixels());
    float* dst = out.data().data() + s * g.f * g.pixels();
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<float>(acc[i]);
  }
  return out;
}

Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t padding) {
  Tensor out = conv2d_forward(input.value(), kernel.value(), stride, padding);
  return input.tape().record(
      std::move(out), {input, kernel},
      [input, kernel, stride, padding](const Tensor&, const Tensor& gout, Tape& tape) {
        const Tensor& x = input.value();
        const Tensor& k = kernel.value();
        const ConvGeometry g = conv_geometry(x, k, stride, padding);
        const bool want_x = tape.requires_grad(input);
        const bool want_k = tape.requires_grad(kernel);
        std::vector<double> dk(want_k ? g.f * g.patch() : 0, 0.0);
        std::vector<double> dx(want_x ? x.numel() : 0, 0.0);
        std::vector<double> dcols(want_x ? g.patch() * g.pixels() : 0);
        const std::vector<float> kt = want_x ? transpose(k.data().data(), g.f, g.patch()) : std::vector<float>{};
        std::vector<float> cols;
        for (std::size_t s = 0; s < g.n; ++s) {
          const float* go = gout.data().data() + s * g.f * g.pixels();
          if (want_k) {
            im2col(g, x.data().data() + s * g.c * g.h * g.w, cols);
            const auto cols_t = transpose(cols.data(), g.patch(), g.pixels());
            gemm_acc(go, cols_t.data(), dk.data(), g.f, g.pixels(), g.patch());
          }
          if (want_x) {
            std::fill(dcols.begin(), dcols.end(), 0.0);
            gemm_acc(kt.data(), go, dcols.data(), g.patch(), g.f, g.pixels());
            col2im_add(g, dcols.data(), dx.data() + s * g.c * g.h * g.w);
          }
        }
        if (want_k) tape.accumulate(kernel, to_float(k.shape(), dk));
        if (want_x) tape.accumulate(input, to_float(x.shape(), dx));
      },
      "conv2d");
}

Var add_channel_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() < 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw ShapeError("add_channel_bias: bias " + shape_to_string(bv.shape()) + " does not match channels of " +
                     shape_to_string(xv.shape()));
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.numel() / (n * c);
  Tensor out = xv;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      float* p = out.data().data() + (s * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bv[ch];
    }
  }
  return x.tape().record(
      std::move(out), {x, bias},
      [x, bias, n, c, inner](const Tensor&, const Tensor& gout, Tape& tape) {
        tape.accumulate(x, gout);
        if (tape.requires_grad(bias)) {
          std::vector<double> gb(c, 0.0);
          for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const float* p = gout.data().data() + (s * c + ch) * inner;
              for (std::size_t i = 0; i < inner; ++i) gb[ch] += p[i];
            }
          }
          tape.accumulate(bias, to_float(bias.shape(), gb));
        }
      },
      "add_channel_bias");
}

Var linear(Var x, Var weight, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  require_rank(xv, 2, "linear", "input");
  require_rank(wv, 2, "linear", "weight");
  if (wv.dim(1) != xv.dim(1) || bv.rank() != 1 || bv.dim(0) != wv.dim(0)) {
    throw ShapeError("linear: input " + shape_to_string(xv.shape()) + ", weight " + shape_to_string(wv.shape()) +
                     ", bias " + shape_to_string(bv.shape()) + " are incompatible");
  }
  const std::size_t n = xv.dim(0), in = xv.dim(1), outd = wv.dim(0);
  Tensor out(Shape{n, outd});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t o = 0; o < outd; ++o) {
      double acc = bv[o];
      for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(xv[s * in + i]) * wv[o * in + i];
      out[s * outd + o] = static_cast<float>(acc);
    }
  }
  return x.tape().record(
      std::move(out), {x, weight, bias},
      [x, weight, bias, n, in, outd](const Tensor&, const Tensor& gout, Tape& tape) {
        const Tensor& xv = x.value();
        const Tensor& wv = weight.value();
        if (tape.requires_grad(x)) {
          std::vector<double> gx(n * in, 0.0);
          gemm_acc(gout.data().data(), wv.data().data(), gx.data(), n, outd, in);
          tape.accumulate(x, to_float(xv.shape(), gx));
        }
        if (tape.requires_grad(weight)) {
          std::vector<double> gw(outd * in, 0.0);
          const auto gt = transpose(gout.data().data(), n, outd);
          gemm_acc(gt.data(), xv.data().data(), gw.data(), outd, n, in);
          tape.accumulate(weight, to_float(wv.shape(), gw));
        }
        if (tape.requires_grad(bias)) {
          std::vector<double> gb(outd, 0.0);
          for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t o = 0; o < outd; ++o) gb[o] += gout[s * outd + o];
          }
          tape.accumulate(bias, to_float(bias.shape(), gb));
        }
      },
      "linear");
}

Var relu(Var x) {
  Tensor out = x.value();
  for (float& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return x.tape().record(
      std::move(out), {x},
      [x](const Tensor& outv, const Tensor& gout, Tape& tape) {
        Tensor g(outv.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = outv[i] > 0.0f ? gout[i] : 0.0f;
        tape.accumulate(x, g);
      },
      "relu");
}

Var tanh(Var x) {
  Tensor out = x.value();
  for (float& v : out.data()) v = std::tanh(v);
  return x.tape().record(
      std::move(out), {x},
      [x](const Tensor& outv, const Tensor& gout, Tape& tape) {
        Tensor g(outv.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) {
          g[i] = static_cast<float>(gout[i] * (1.0 - static_cast<double>(outv[i]) * outv[i]));
        }
        tape.accumulate(x, g);
      },
      "tanh");
}

Var maxpool2d(Var x, std::size_t window) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "maxpool2d", "input");
  if (window == 0 || xv.dim(2) < window || xv.dim(3) < window) {
    throw ShapeError("maxpool2d: window " + std::to_string(window) + " too large for " +
                     shape_to_string(xv.shape()));
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = h / window, ow = w / window;
  Tensor out(Shape{n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const float* src = xv.data().data() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (oy * window) * w + ox * window;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = (oy * window + i) * w + ox * window + j;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = plane * oh * ow + oy * ow + ox;
        out[o] = src[best];
        (*argmax)[o] = plane * h * w + best;
      }
    }
  }
  return x.tape().record(
      std::move(out), {x},
      [x, argmax](const Tensor&, const Tensor& gout, Tape& tape) {
        Tensor& g = tape.grad_buffer(x);
        for (std::size_t o = 0; o < gout.numel(); ++o) g[(*argmax)[o]] += gout[o];
      },
      "maxpool2d");
}

Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "global_avg_pool", "input");
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out(Shape{n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    double acc = 0.0;
    const float* src = xv.data().data() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += src[i];
    out[p] = static_cast<float>(acc / static_cast<double>(hw));
  }
  return x.tape().record(
      std::move(out), {x},
      [x, n, c, hw](const Tensor&, const Tensor& gout, Tape& tape) {
        Tensor& g = tape.grad_buffer(x);
        for (std::size_t p = 0; p < n * c; ++p) {
          const float v = static_cast<float>(gout[p] / static_cast<double>(hw));
          float* dst = g.data().data() + p * hw;
          for (std::size_t i = 0; i < hw; ++i) dst[i] += v;
        }
      },
      "global_avg_pool");
}

Var flatten(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1) throw ShapeError("flatten: scalar input");
  Tensor out = xv.reshaped(Shape{xv.dim(0), xv.numel() / xv.dim(0)});
  return x.tape().record(
      std::move(out), {x},
      [x](const Tensor&, const Tensor& gout, Tape& tape) { tape.accumulate(x, gout.reshaped(x.shape())); },
      "flatten");
}

namespace {

// Row-wise log-softmax in double.
std::vector<double> log_softmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> out(n * c);
  for (std::size_t s = 0; s < n; ++s) {
    const float* z = logits.data().data() + s * c;
    const double mx = *std::max_element(z, z + c);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(z[j]) - mx);
    const double lse = mx + std::log(denom);
    for (std::size_t j = 0; j < c; ++j) out[s * c + j] = z[j] - lse;
  }
  return out;
}

}  // namespace

Tensor softmax_logits_to_probs(const Tensor& logits) {
  require_rank(logits, 2, "softmax", "logits");
  const auto ls = log_softmax_rows(logits);
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < ls.size(); ++i) out[i] = static_cast<float>(std::exp(ls[i]));
  return out;
}

Var softmax(Var logits) {
  Tensor out = softmax_logits_to_probs(logits.value());
  return logits.tape().record(
      std::move(out), {logits},
      [logits](const Tensor& p, const Tensor& gout, Tape& tape) {
        const std::size_t n = p.dim(0), c = p.dim(1);
        Tensor g(p.shape());
        for (std::size_t s = 0; s < n; ++s) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += static_cast<double>(gout[s * c + j]) * p[s * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            g[s * c + j] = static_cast<float>(p[s * c + j] * (gout[s * c + j] - dot));
          }
        }
        tape.accumulate(logits, g);
      },
      "softmax");
}

Var log_softmax(Var logits) {
  const Tensor& z = logits.value();
  require_rank(z, 2, "log_softmax", "logits");
  const auto ls = log_softmax_rows(z);
  Tensor out(z.shape());
  for (std::size_t i = 0; i < ls.size(); ++i) out[i] = static_cast<float>(ls[i]);
  return logits.tape().record(
      std::move(out), {logits},
      [logits](const Tensor& lsv, const Tensor& gout, Tape& tape) {
        const std::size_t n = lsv.dim(0), c = lsv.dim(1);
        Tensor g(lsv.shape());
        for (std::size_t s = 0; s < n; ++s) {
          double total = 0.0;
          for (std::size_t j = 0; j < c; ++j) total += gout[s * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            g[s * c + j] = static_cast<float>(gout[s * c + j] - std::exp(static_cast<double>(lsv[s * c + j])) * total);
          }
        }
        tape.accumulate(logits, g);
      },
      "log_softmax");
}

Var cross_entropy_loss(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  require_rank(z, 2, "cross_entropy_loss", "logits");
  const std::size_t n = z.dim(0), c = z.dim(1);
  if (labels.size() != n) {
    throw ShapeError("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_to_string(z.shape()));
  }
  std::vector<int> y(labels.begin(), labels.end());
  for (int lab : y) {
    if (lab < 0 || static_cast<std::size_t>(lab) >= c) {
      throw ShapeError("cross_entropy_loss: label " + std::to_string(lab) + " outside [0," + std::to_string(c) + ")");
    }
  }
  const auto ls = log_softmax_rows(z);
  double loss = 0.0;
  for (std::size_t s = 0; s < n; ++s) loss -= ls[s * c + static_cast<std::size_t>(y[s])];
  loss /= static_cast<double>(n);
  return logits.tape().record(
      Tensor::scalar(static_cast<float>(loss)), {logits},
      [logits, y = std::move(y), n, c](const Tensor&, const Tensor& gout, Tape& tape) {
        const auto ls = log_softmax_rows(logits.value());
        const double scale = gout[0] / static_cast<double>(n);
        Tensor g(logits.shape());
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t j = 0; j < c; ++j) {
            const double target = static_cast<std::size_t>(y[s]) == j ? 1.0 : 0.0;
            g[s * c + j] = static_cast<float>(scale * (std::exp(ls[s * c + j]) - target));
          }
        }
        tape.accumulate(logits, g);
      },
      "cross_entropy_loss");
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return a.tape().record(
      std::move(out), {a, b},
      [a, b](const Tensor&, const Tensor& gout, Tape& tape) {
        tape.accumulate(a, gout);
        tape.accumulate(b, gout);
      },
      "add");
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return a.tape().record(
      std::move(out), {a, b},
      [a, b](const Tensor&, const Tensor& gout, Tape& tape) {
        tape.accumulate(a, gout);
        if (tape.requires_grad(b)) {
          Tensor neg = gout;
          for (float& v : neg.data()) v = -v;
          tape.accumulate(b, neg);
        }
      },
      "sub");
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return a.tape().record(
      std::move(out), {a, b},
      [a, b](const Tensor&, const Tensor& gout, Tape& tape) {
        if (tape.requires_grad(a)) {
          Tensor g = gout;
          for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= b.value()[i];
          tape.accumulate(a, g);
        }
        if (tape.requires_grad(b)) {
          Tensor g = gout;
          for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= a.value()[i];
          tape.accumulate(b, g);
        }
      },
      "mul");
}

Var scale(Var x, float factor) {
  Tensor out = x.value();
  for (float& v : out.data()) v *= factor;
  return x.tape().record(
      std::move(out), {x},
      [x, factor](const Tensor&, const Tensor& gout, Tape& tape) {
        Tensor g = gout;
        for (float& v : g.data()) v *= factor;
        tape.accumulate(x, g);
      },
      "scale");
}

Var sum(Var x) {
  double acc = 0.0;
  for (float v : x.value().data()) acc += v;
  return x.tape().record(
      Tensor::scalar(static_cast<float>(acc)), {x},
      [x](const Tensor&, const Tensor& gout, Tape& tape) { tape.accumulate(x, Tensor(x.shape(), gout[0])); },
      "sum");
}

Var dot_const(Var x, const Tensor& weights) {
  require_same_shape(x.value(), weights, "dot_const");
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.numel(); ++i) acc += static_cast<double>(x.value()[i]) * weights[i];
  return x.tape().record(
      Tensor::scalar(static_cast<float>(acc)), {x},
      [x, weights](const Tensor&, const Tensor& gout, Tape& tape) {
        Tensor g = weights;
        for (float& v : g.data()) v *= gout[0];
        tape.accumulate(x, g);
      },
      "dot_const");
}

Tensor sign(const Tensor& x) {
  Tensor out = x;
  for (float& v : out.data()) v = v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f);
  return out;
}

Var sign(Var x) { return x.tape().constant(sign(x.value())); }

Tensor clamp(const Tensor& x, float lo, float hi) {
  Tensor out = x;
  for (float& v : out.data()) v = std::clamp(v, lo, hi);
  return out;
}

Var clamp(Var x, float lo, float hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return x.tape().record(
      clamp(x.value(), lo, hi), {x},
      [x, lo, hi](const Tensor&, const Tensor& gout, Tape& tape) {
        Tensor g = gout;
        const Tensor& xv = x.value();
        for (std::size_t i = 0; i < g.numel(); ++i) {
          if (!(xv[i] > lo && xv[i] < hi)) g[i] = 0.0f;
        }
        tape.accumulate(x, g);
      },
      "clamp");
}

}  // namespace sentinel

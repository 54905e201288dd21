#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "sentinel/tensor.hpp"

namespace sentinel {

class Tape;

/// Handle to a value recorded on a Tape. Valid until the tape is reset.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records differentiable operations for one evaluation context.
///
/// Nodes are appended in execution order, so walking them in reverse is a
/// reverse topological order. A tape is confined to one thread; independent
/// tapes may run concurrently since no op touches global state.
class Tape {
 public:
  /// Receives the op's output value and d(scalar)/d(output).
  using Backward = std::function<void(const Tensor& out, const Tensor& grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  /// Populates d(scalar)/d(v) for every node with requires_grad.
  /// Throws if `scalar` has more than one element or backward already ran.
  void backward(Var scalar);

  /// Gradient of the last backward() w.r.t. `v`; zeros if no path reached it.
  const Tensor& grad(Var v) const;

  /// Drops gradients so backward() may run again over the same graph.
  void clear_grads();

  /// Forgets every node; outstanding Vars become invalid.
  void reset();

  std::size_t size() const { return nodes_.size(); }

  // Op authoring. `inputs` decide whether the output participates in
  // differentiation; `fn` must accumulate into the inputs' gradients.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn, const char* op);
  void accumulate(Var v, const Tensor& g);
  /// Mutable gradient buffer of `v`, zero-initialised on first access.
  Tensor& grad_buffer(Var v);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Ops. All operands must live on the same tape. Model math is float32;
// reductions accumulate in double.

/// input [N,C,H,W], kernel [F,C,kh,kw] -> [N,F,H',W'].
Var conv2d(Var input, Var kernel, std::size_t stride = 1, std::size_t padding = 0);
/// Adds bias [C] over axis 1 of [N,C,...]. The only broadcast supported.
Var add_channel_bias(Var x, Var bias);
/// x [N,in], weight [out,in], bias [out] -> [N,out].
Var linear(Var x, Var weight, Var bias);
Var relu(Var x);
Var tanh(Var x);
/// Non-overlapping window max pooling over [N,C,H,W]; trailing rows/cols dropped.
Var maxpool2d(Var x, std::size_t window = 2);
/// Spatial mean per channel: [N,C,H,W] -> [N,C].
Var global_avg_pool(Var x);
/// [N, ...] -> [N, prod(...)].
Var flatten(Var x);
Var softmax(Var logits);
Var log_softmax(Var logits);
/// Mean over the batch of -log softmax(logits)[label].
Var cross_entropy_loss(Var logits, std::span<const int> labels);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, float factor);
Var sum(Var x);
/// Sum over all elements of x * weights, with `weights` constant.
Var dot_const(Var x, const Tensor& weights);
/// Elementwise sign; zero derivative everywhere.
Var sign(Var x);
/// Clamp to [lo, hi]; derivative 1 strictly inside, 0 where clipped.
Var clamp(Var x, float lo, float hi);

// Plain-tensor helpers sharing the kernels above.
Tensor softmax_logits_to_probs(const Tensor& logits);
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding);
Tensor sign(const Tensor& x);
Tensor clamp(const Tensor& x, float lo, float hi);

}  // namespace sentinel

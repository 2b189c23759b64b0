#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape records each primitive as it executes. Values live on the tape and
// are addressed through Var handles; parameters enter through leaf(), which
// copies the value and remembers the source tensor so backward() can
// accumulate into its grad. Ops are appended in execution order, so the
// recording is already topologically sorted and backward is a single reverse
// sweep.

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "rfvla/tensor.hpp"

namespace rfvla {

class Tape;

class Var {
 public:
  Var() = default;
  bool valid() const { return tape_ != nullptr; }
  std::uint32_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

enum class GradMode { enabled, disabled };

class Tape {
 public:
  explicit Tape(GradMode mode = GradMode::enabled) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  GradMode mode() const { return mode_; }

  // Leaves.
  Var constant(Tensor value);
  // Tape-owned leaf; its gradient is read back with grad().
  Var variable(Tensor value);
  // Binds a parameter. Gradients accumulate into param.grad() on backward
  // when param.requires_grad() is set. The tensor must outlive backward().
  Var leaf(Tensor& param);

  const Tensor& value(Var v) const;
  // Empty span when the node carries no gradient.
  std::span<const double> grad(Var v) const;
  bool needs_grad(Var v) const;

  // Primitives. Binary elementwise ops accept either equal shapes or a
  // right-hand operand matching the trailing extent (broadcast over rows).
  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var transpose(Var a);
  Var reshape(Var a, Shape shape);
  Var softmax_rows(Var a);
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  Var gelu(Var a);
  Var gather_rows(Var table, std::span<const std::uint32_t> ids);
  Var slice(Var a, std::size_t row0, std::size_t nrows, std::size_t col0, std::size_t ncols);
  Var slice_rows(Var a, std::size_t row0, std::size_t nrows);
  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(std::span<const Var> parts);
  Var mean(Var a);
  // Mean over masked-in rows of -log softmax(logits)[row][target].
  Var nll_loss(Var logits, std::span<const int> targets, std::span<const std::uint8_t> mask);
  Var nll_loss(Var logits, std::span<const int> targets);

  // Populates gradients for every node reachable from `loss` and accumulates
  // into bound parameters. May be called once per tape.
  void backward(Var loss);

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_ops() const { return ops_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool needs_grad = false;
    Tensor* bound = nullptr;
  };
  struct Op {
    std::vector<std::uint32_t> inputs;
    std::uint32_t output;
    std::function<void(Tape&, std::uint32_t)> backward;
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  Node& node(std::uint32_t id) { return nodes_[id]; }
  std::vector<double>& grad_ref(std::uint32_t id);
  Var push(Tensor value, bool needs_grad, Tensor* bound = nullptr);
  bool any_needs_grad(std::initializer_list<Var> vs) const;
  Var record(std::vector<std::uint32_t> inputs, Tensor out, bool needs_grad,
             std::function<void(Tape&, std::uint32_t)> backward);
  void check_owner(Var v) const;

  GradMode mode_;
  std::deque<Node> nodes_;
  std::vector<Op> ops_;
  bool consumed_ = false;
};

}  // namespace rfvla

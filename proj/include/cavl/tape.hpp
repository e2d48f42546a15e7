#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cavl/tensor.hpp"

namespace cavl {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  std::uint32_t id = 0;
};

using BackwardFn = std::function<void(Tape&, Var self)>;

/// Reverse-mode tape. Nodes are appended in forward order, so iterating
/// backwards from the loss is a valid topological sweep that touches each
/// node exactly once. A tape records a single forward pass; backward() may
/// run once, a second call throws TapeConsumed.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Register an externally owned tensor (parameter or input). After
  /// backward(), its accumulated gradient is written to the tensor's grad
  /// field iff requires_grad is set.
  Var leaf(Tensor& external);

  /// Tape-owned value that never receives a gradient.
  Var constant(Tensor value);

  /// Record an operation result. `fn` propagates this node's gradient into
  /// its parents; pass an empty fn when needs_grad is false.
  Var make(Tensor value, bool needs_grad, BackwardFn fn);

  const Tensor& value(Var v) const;
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient of a node; empty span if nothing has been accumulated.
  std::span<const double> grad_view(Var v) const;

  /// Add `g` into a node's gradient buffer (no-op when the node does not
  /// need a gradient).
  void add_grad(Var v, std::span<const double> g);

  /// Gradient buffer for direct accumulation. Only call when needs_grad(v).
  std::span<double> grad_accum(Var v);

  void backward(Var loss);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    Tensor* bound = nullptr;  // set for leaves
    std::vector<double> grad;
    BackwardFn backward;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace cavl

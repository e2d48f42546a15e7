#include "cavl/tape.hpp"

namespace cavl {

Var Tape::leaf(Tensor& external) {
  Node n;
  n.bound = &external;
  n.needs_grad = external.requires_grad();
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.needs_grad = false;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::make(Tensor value, bool needs_grad, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.bound ? *n.bound : n.owned;
}

std::span<const double> Tape::grad_view(Var v) const { return nodes_[v.id].grad; }

void Tape::add_grad(Var v, std::span<const double> g) {
  Node& n = nodes_[v.id];
  if (!n.needs_grad) return;
  if (n.grad.empty()) n.grad.assign(value(v).numel(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

std::span<double> Tape::grad_accum(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad.assign(value(v).numel(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (consumed_) throw TapeConsumed("backward already ran on this tape");
  if (value(loss).numel() != 1) {
    throw NonScalarLoss("backward needs a scalar loss, got shape " +
                        shape_str(value(loss).shape()));
  }
  consumed_ = true;
  if (!nodes_[loss.id].needs_grad) return;  // nothing on the tape wants a gradient

  grad_accum(loss)[0] = 1.0;
  for (std::uint32_t id = loss.id;; --id) {
    Node& n = nodes_[id];
    // Untouched gradient buffer means this node is not an ancestor of the loss.
    if (n.needs_grad && !n.grad.empty()) {
      if (n.bound && n.bound->requires_grad()) n.bound->accumulate_grad(n.grad);
      if (n.backward) n.backward(*this, Var{id});
    }
    if (id == 0) break;
  }
}

}  // namespace cavl

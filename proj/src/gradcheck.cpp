#include "cavl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "cavl/errors.hpp"

namespace cavl {

namespace {

double eval_scalar(const TensorFn& f, Tensor x) {
  x.set_requires_grad(false);
  Tape tape;
  Var loss = f(tape, tape.leaf(x));
  const Tensor& out = tape.value(loss);
  if (out.numel() != 1) throw NonScalarLoss("grad_check: f must return a scalar");
  return out[0];
}

}  // namespace

double grad_check(const TensorFn& f, const Tensor& x0, double h) {
  if (!(h > 0.0) || h > 1e-2) {
    throw Error("grad_check: step must lie in (0, 1e-2]");
  }

  Tensor x = x0;
  x.set_requires_grad(true);
  x.clear_grad();
  Tape tape;
  Var loss = f(tape, tape.leaf(x));
  if (tape.value(loss).numel() != 1) {
    throw NonScalarLoss("grad_check: f must return a scalar");
  }
  tape.backward(loss);
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) {
    auto g = x.grad();
    std::copy(g.begin(), g.end(), analytic.begin());
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < x0.numel(); ++i) {
    Tensor plus = x0, minus = x0;
    plus[i] += h;
    minus[i] -= h;
    const double numeric = (eval_scalar(f, plus) - eval_scalar(f, minus)) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace cavl

#pragma once

#include <functional>

#include "cavl/tape.hpp"

namespace cavl {

/// Scalar-valued function of one leaf tensor, rebuilt per evaluation.
using TensorFn = std::function<Var(Tape&, Var)>;

/// Central-difference check of reverse-mode gradients.
///
/// Evaluates (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate and
/// returns the maximum over coordinates of
///   |analytic - numeric| / max(1, |analytic|, |numeric|).
double grad_check(const TensorFn& f, const Tensor& x0, double h);

}  // namespace cavl

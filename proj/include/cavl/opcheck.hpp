#pragma once

#include <string>
#include <vector>

namespace cavl {

struct OpCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// Names accepted by run_op_checks, including "full_loss".
std::vector<std::string> op_check_names();

/// Finite-difference verification of each named operation's reverse-mode
/// gradients on fixed random inputs (h = 1e-5, tolerance 1e-4). "full_loss"
/// checks the combined pre-training loss of a 2-sample batch against central
/// differences for every parameter tensor (h = 1e-4, tolerance 1e-3).
std::vector<OpCheckResult> run_op_checks(const std::vector<std::string>& which);

}  // namespace cavl

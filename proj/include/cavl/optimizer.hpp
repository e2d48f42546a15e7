#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cavl/params.hpp"

namespace cavl {

/// Linear warm-up to base_lr over warmup_steps, then linear decay to zero at
/// total_steps. Continuous and piecewise-linear with its maximum at
/// step == warmup_steps.
struct Schedule {
  double base_lr = 1e-3;
  std::size_t total_steps = 0;
  std::size_t warmup_steps = 0;

  static Schedule linear_warmup(double base_lr, std::size_t total_steps,
                                double warmup_frac = 0.15);
  double at(std::size_t step) const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over the trainable tensors of a store. Moment state
/// exists only for trainable tensors; frozen tensors are never touched.
class AdamOptimizer {
 public:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };

  AdamOptimizer(const ParamStore& params, AdamConfig cfg = {});

  /// One update with the given learning rate. Every trainable tensor must
  /// carry a gradient (MissingGradient otherwise); gradients are cleared
  /// after the update.
  void step(ParamStore& params, double lr);

  std::size_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  bool has_state(const std::string& name) const { return state_.count(name) != 0; }
  const Moments& moments(const std::string& name) const;

  /// Checkpoint plumbing: state entries in deterministic (param store) order.
  std::vector<std::pair<std::string, const Moments*>> entries(
      const ParamStore& params) const;
  void restore(const std::string& name, Moments moments);
  void set_step_count(std::size_t t) { t_ = t; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::unordered_map<std::string, Moments> state_;
};

}  // namespace cavl

#include "cavl/optimizer.hpp"

#include <cmath>

#include "cavl/errors.hpp"

namespace cavl {

Schedule Schedule::linear_warmup(double base_lr, std::size_t total_steps,
                                 double warmup_frac) {
  Schedule s;
  s.base_lr = base_lr;
  s.total_steps = total_steps;
  s.warmup_steps = static_cast<std::size_t>(
      std::llround(warmup_frac * static_cast<double>(total_steps)));
  if (s.warmup_steps == 0 || s.warmup_steps >= s.total_steps) {
    throw InvalidConfig("schedule needs 0 < warmup_steps < total_steps, got " +
                        std::to_string(s.warmup_steps) + " of " +
                        std::to_string(total_steps));
  }
  return s;
}

double Schedule::at(std::size_t step) const {
  if (step > total_steps) throw InvalidConfig("schedule queried past total_steps");
  const double s = static_cast<double>(step);
  if (step <= warmup_steps) {
    return base_lr * s / static_cast<double>(warmup_steps);
  }
  return base_lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup_steps);
}

AdamOptimizer::AdamOptimizer(const ParamStore& params, AdamConfig cfg) : cfg_(cfg) {
  for (const auto& e : params.entries()) {
    if (!e.tensor.requires_grad()) continue;
    Moments mo;
    mo.m.assign(e.tensor.numel(), 0.0);
    mo.v.assign(e.tensor.numel(), 0.0);
    state_.emplace(e.name, std::move(mo));
  }
}

void AdamOptimizer::step(ParamStore& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& e : params.entries()) {
    if (!e.tensor.requires_grad()) continue;
    if (!e.tensor.has_grad()) {
      throw MissingGradient("adam_step: no gradient for trainable tensor " + e.name);
    }
    auto it = state_.find(e.name);
    if (it == state_.end()) {
      throw UnknownParameter("adam_step: no optimizer state for " + e.name);
    }
    Moments& mo = it->second;
    auto g = e.tensor.grad();
    auto x = e.tensor.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * g[i];
      mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = mo.m[i] / bc1;
      const double vhat = mo.v[i] / bc2;
      x[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
  params.clear_grads();
}

const AdamOptimizer::Moments& AdamOptimizer::moments(const std::string& name) const {
  auto it = state_.find(name);
  if (it == state_.end()) throw UnknownParameter("no optimizer state for " + name);
  return it->second;
}

std::vector<std::pair<std::string, const AdamOptimizer::Moments*>> AdamOptimizer::entries(
    const ParamStore& params) const {
  std::vector<std::pair<std::string, const Moments*>> out;
  for (const auto& e : params.entries()) {
    auto it = state_.find(e.name);
    if (it != state_.end()) out.emplace_back(e.name, &it->second);
  }
  return out;
}

void AdamOptimizer::restore(const std::string& name, Moments moments) {
  state_[name] = std::move(moments);
}

}  // namespace cavl

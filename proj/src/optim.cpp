#include "reltopo/optim.hpp"

#include <cmath>
#include <numbers>

#include "reltopo/error.hpp"

namespace reltopo {

OptimizerState OptimizerState::for_parameters(const ParameterSet& params,
                                              const AdamWConfig& config) {
  OptimizerState s;
  s.config = config;
  for (const auto& t : params.tensors()) {
    s.first_moment.emplace_back(t.numel(), 0.0);
    s.second_moment.emplace_back(t.numel(), 0.0);
  }
  return s;
}

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr, double min_lr) {
  if (total_steps == 0) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step > total_steps) throw ConfigError("cosine_lr: step exceeds total_steps");
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return min_lr + (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * frac)) / 2.0;
}

void adamw_step(OptimizerState& state, ParameterSet& params, const Gradients& grads, double lr) {
  if (grads.values.size() != params.size() || state.first_moment.size() != params.size()) {
    throw ShapeError("adamw_step: gradients do not cover every parameter");
  }
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.tensors()[i].mutable_data();
    const auto& g = grads.values[i];
    if (g.size() != p.size()) {
      throw ShapeError("adamw_step: gradient for '" + params.names()[i] + "' has " +
                       std::to_string(g.size()) + " values, parameter has " +
                       std::to_string(p.size()));
    }
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] *= 1.0 - lr * c.weight_decay;
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

}  // namespace reltopo

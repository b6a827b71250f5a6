#pragma once

#include <cstdint>
#include <vector>

#include "reltopo/parameters.hpp"

namespace reltopo {

struct AdamWConfig {
  double base_lr = 2e-4;
  double min_lr = 0.0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t total_steps = 1;
};

struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  static OptimizerState for_parameters(const ParameterSet& params, const AdamWConfig& config);
};

/// min_lr + (base_lr - min_lr) * (1 + cos(pi * step / total_steps)) / 2.
double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr, double min_lr);

/// One decoupled-weight-decay Adam update at learning rate `lr`.
void adamw_step(OptimizerState& state, ParameterSet& params, const Gradients& grads, double lr);

}  // namespace reltopo

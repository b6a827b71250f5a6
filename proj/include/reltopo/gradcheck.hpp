#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "reltopo/tensor.hpp"

namespace reltopo::gradcheck {

/// Pass threshold on the maximum relative error.
inline constexpr double kTolerance = 1e-4;
/// Central-difference step.
inline constexpr double kStep = 1e-5;
/// Denominator floor so near-zero gradients are compared absolutely.
inline constexpr double kFloor = 1e-4;

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, kFloor) over
/// every entry of every leaf. `leaves` must be parameter tensors; they are
/// perturbed in place and restored.
double max_relative_error(const LossFn& loss, std::vector<Tensor> leaves, double step = kStep);

struct CheckResult {
  std::string name;
  int cases = 0;
  double max_rel_error = 0.0;
  bool passed = false;
  std::string failure;  // exception text when a case threw
};

/// Runs `cases` seeded instances of every primitive and composite check.
std::vector<CheckResult> run_suite(int cases = 20, std::uint64_t seed = 2024);

/// Names covered by run_suite, in order.
std::vector<std::string> suite_names();

}  // namespace reltopo::gradcheck

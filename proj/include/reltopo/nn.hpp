#pragma once

#include <random>
#include <string>
#include <vector>

#include "reltopo/parameters.hpp"
#include "reltopo/tensor.hpp"

namespace reltopo::nn {

/// y = x W + b over the last axis.
struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear create(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out,
                       std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm create(ParameterSet& ps, const std::string& name, std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

/// Linear -> ReLU -> Linear.
struct Mlp {
  Linear first;
  Linear second;

  static Mlp create(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t hidden,
                    std::size_t out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return second(relu(first(x))); }
};

/// Sets every value of the named parameters to zero.
void zero_parameters(ParameterSet& ps, const std::vector<std::string>& names);

/// Constant tensor holding the standard interleaved sinusoidal frequencies
/// 1 / temperature^(2k/dim), k = 0..dim/2-1, shape [dim/2].
Tensor sinusoid_frequencies(std::size_t dim, double temperature);

/// Differentiable sinusoidal encoding. x: [..., F] -> [..., F * dim] where
/// each scalar v expands to [sin(s v w_0), cos(s v w_0), sin(s v w_1), ...].
Tensor sinusoidal(const Tensor& x, std::size_t dim, double temperature, double input_scale);

}  // namespace reltopo::nn

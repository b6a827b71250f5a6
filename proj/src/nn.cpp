#include "reltopo/nn.hpp"

#include <cmath>

#include "reltopo/error.hpp"

namespace reltopo::nn {

Linear Linear::create(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out,
                      std::mt19937_64& rng) {
  Linear l;
  l.weight = ps.add_uniform(name + ".weight", {in, out}, in, rng);
  l.bias = ps.add_uniform(name + ".bias", {out}, in, rng);
  return l;
}

LayerNorm LayerNorm::create(ParameterSet& ps, const std::string& name, std::size_t dim) {
  return {ps.add_constant(name + ".gain", {dim}, 1.0), ps.add_constant(name + ".bias", {dim}, 0.0)};
}

Mlp Mlp::create(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t hidden,
                std::size_t out, std::mt19937_64& rng) {
  return {Linear::create(ps, name + ".0", in, hidden, rng),
          Linear::create(ps, name + ".1", hidden, out, rng)};
}

void zero_parameters(ParameterSet& ps, const std::vector<std::string>& names) {
  for (const auto& n : names) {
    for (double& v : ps.at(n).mutable_data()) v = 0.0;
  }
}

Tensor sinusoid_frequencies(std::size_t dim, double temperature) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("sinusoidal: output_dim must be even");
  if (!(temperature > 0.0)) throw ConfigError("sinusoidal: temperature must be positive");
  std::vector<double> w(dim / 2);
  for (std::size_t k = 0; k < w.size(); ++k) {
    w[k] = 1.0 / std::pow(temperature, 2.0 * static_cast<double>(k) / static_cast<double>(dim));
  }
  return Tensor({dim / 2}, std::move(w));
}

Tensor sinusoidal(const Tensor& x, std::size_t dim, double temperature, double input_scale) {
  const Tensor freq = scale(sinusoid_frequencies(dim, temperature), input_scale);
  Shape expanded = x.shape();
  expanded.push_back(1);
  const Tensor phase = mul(reshape(x, expanded), freq);  // [..., F, dim/2]
  Shape stacked = phase.shape();
  stacked.push_back(1);
  const Tensor pair = concat({reshape(sin(phase), stacked), reshape(cos(phase), stacked)},
                             stacked.size() - 1);  // [..., F, dim/2, 2]
  Shape out = x.shape();
  if (out.empty()) out.push_back(1);
  out.back() *= dim;
  return reshape(pair, out);
}

}  // namespace reltopo::nn

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "reltopo/tensor.hpp"

namespace reltopo {

/// Named trainable tensors with deterministic (insertion) iteration order.
class ParameterSet {
 public:
  /// Registers a parameter; throws ConfigError on a duplicate name.
  Tensor add(const std::string& name, Shape shape, std::vector<double> values);
  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
  Tensor add_uniform(const std::string& name, Shape shape, std::size_t fan_in, std::mt19937_64& rng);
  Tensor add_constant(const std::string& name, Shape shape, double value);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  std::size_t index_of(const std::string& name) const;
  std::size_t total_values() const;

  /// Deep copy: fresh leaves with identical names and values.
  ParameterSet clone() const;
  /// Copies values from `other`; names and shapes must agree exactly.
  void assign(const ParameterSet& other);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Gradients aligned with a ParameterSet's iteration order.
struct Gradients {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;

  const std::vector<double>& get(const std::string& name) const;
  double norm() const;
  void add(const Gradients& other);
  void scale(double c);
};

/// Reverse pass from a scalar loss. Parameters the loss does not reach get
/// zero gradients. Throws if the loss is not a scalar or not on the tape.
Gradients backward(const Tensor& loss, const ParameterSet& params);

/// Reverse pass returning gradients for arbitrary leaf tensors.
std::vector<std::vector<double>> backward_leaves(const Tensor& loss,
                                                 const std::vector<Tensor>& leaves);

// Binary checkpoint: "RTCKPT01" magic, u32 version, u64 count, then per
// parameter u32 name length, UTF-8 name, u32 rank, u64 dims, f64 LE values.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);
/// Loads into an existing set; names, order and shapes must match.
void load_checkpoint(ParameterSet& params, const std::filesystem::path& path);
/// Reads a checkpoint as a standalone parameter set.
ParameterSet read_checkpoint(const std::filesystem::path& path);

}  // namespace reltopo

#include "reltopo/parameters.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "reltopo/error.hpp"

namespace reltopo {

Tensor ParameterSet::add(const std::string& name, Shape shape, std::vector<double> values) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  Tensor t = Tensor::parameter(std::move(shape), std::move(values));
  index_[name] = tensors_.size();
  names_.push_back(name);
  tensors_.push_back(t);
  return t;
}

Tensor ParameterSet::add_uniform(const std::string& name, Shape shape, std::size_t fan_in,
                                 std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return add(name, std::move(shape), std::move(v));
}

Tensor ParameterSet::add_constant(const std::string& name, Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return add(name, std::move(shape), std::vector<double>(n, value));
}

std::size_t ParameterSet::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParameterSet::at(const std::string& name) const { return tensors_[index_of(name)]; }
Tensor& ParameterSet::at(const std::string& name) { return tensors_[index_of(name)]; }

std::size_t ParameterSet::total_values() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

ParameterSet ParameterSet::clone() const {
  ParameterSet out;
  for (std::size_t i = 0; i < size(); ++i) {
    const auto d = tensors_[i].data();
    out.add(names_[i], tensors_[i].shape(), std::vector<double>(d.begin(), d.end()));
  }
  return out;
}

void ParameterSet::assign(const ParameterSet& other) {
  if (other.names_ != names_) throw ConfigError("parameter sets have different names");
  for (std::size_t i = 0; i < size(); ++i) {
    if (other.tensors_[i].shape() != tensors_[i].shape()) {
      throw ConfigError("parameter '" + names_[i] + "' shape mismatch");
    }
    auto dst = tensors_[i].mutable_data();
    const auto src = other.tensors_[i].data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

const std::vector<double>& Gradients::get(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return values[i];
  }
  throw ConfigError("no gradient for '" + name + "'");
}

double Gradients::norm() const {
  double s = 0.0;
  for (const auto& v : values)
    for (double x : v) s += x * x;
  return std::sqrt(s);
}

void Gradients::add(const Gradients& other) {
  if (other.values.size() != values.size()) throw ShapeError("gradient sets differ in size");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (other.values[i].size() != values[i].size()) throw ShapeError("gradient shape mismatch");
    for (std::size_t k = 0; k < values[i].size(); ++k) values[i][k] += other.values[i][k];
  }
}

void Gradients::scale(double c) {
  for (auto& v : values)
    for (double& x : v) x *= c;
}

namespace {

// Topological order (parents before children) of nodes requiring gradients.
std::vector<detail::Node*> topo_order(detail::Node* root) {
  std::vector<detail::Node*> order;
  std::unordered_map<detail::Node*, bool> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  visited[root] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited[p]) {
        visited[p] = true;
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

std::unordered_map<const detail::Node*, std::vector<double>> run_backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw Error("backward: loss is not on the tape");
  auto* root = const_cast<detail::Node*>(loss.id());
  const auto order = topo_order(root);
  std::unordered_map<const detail::Node*, std::vector<double>> grads;
  grads[root] = {1.0};
  const std::string& corrupt = testing::corrupted_op();
  std::vector<std::vector<double>*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->parents.empty()) continue;
    auto git = grads.find(node);
    if (git == grads.end()) continue;
    std::vector<double> g = std::move(git->second);
    grads.erase(git);
    if (!corrupt.empty() && corrupt == node->op) {
      for (double& v : g) v *= 1.5;
    }
    slots.assign(node->parents.size(), nullptr);
    for (std::size_t k = 0; k < node->parents.size(); ++k) {
      detail::Node* p = node->parents[k].get();
      if (!p->requires_grad) continue;
      auto& buf = grads[p];
      if (buf.empty()) buf.assign(p->data.size(), 0.0);
      slots[k] = &buf;
    }
    node->backward(g, slots);
  }
  return grads;
}

}  // namespace

Gradients backward(const Tensor& loss, const ParameterSet& params) {
  auto grads = run_backward(loss);
  Gradients out;
  out.names = params.names();
  out.values.reserve(params.size());
  for (const auto& t : params.tensors()) {
    auto it = grads.find(t.id());
    if (it != grads.end() && !it->second.empty()) {
      out.values.push_back(std::move(it->second));
    } else {
      out.values.emplace_back(t.numel(), 0.0);
    }
  }
  return out;
}

std::vector<std::vector<double>> backward_leaves(const Tensor& loss,
                                                 const std::vector<Tensor>& leaves) {
  auto grads = run_backward(loss);
  std::vector<std::vector<double>> out;
  for (const auto& t : leaves) {
    auto it = grads.find(t.id());
    if (it != grads.end() && !it->second.empty()) {
      out.push_back(it->second);
    } else {
      out.emplace_back(t.numel(), 0.0);
    }
  }
  return out;
}

// ---- checkpoint I/O ---------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'R', 'T', 'C', 'K', 'P', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is, const std::string& field) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw DataError("checkpoint truncated while reading " + field);
  }
  return v;
}

}  // namespace

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.names()[i];
    const auto& t = params.tensors()[i];
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(os, d);
    for (double v : t.data()) put<double>(os, v);
  }
  if (!os) throw DataError("failed writing checkpoint " + path.string());
}

ParameterSet read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw DataError("checkpoint " + path.string() + ": bad magic");
  }
  const auto version = take<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint version " + std::to_string(version) + " unsupported");
  }
  const auto count = take<std::uint64_t>(is, "parameter count");
  ParameterSet out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = take<std::uint32_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw DataError("checkpoint truncated in name");
    const auto rank = take<std::uint32_t>(is, "rank of " + name);
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(is, "dims of " + name);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = take<double>(is, "values of " + name);
    out.add(name, shape, std::move(values));
  }
  return out;
}

void load_checkpoint(ParameterSet& params, const std::filesystem::path& path) {
  ParameterSet loaded = read_checkpoint(path);
  if (loaded.names() != params.names()) {
    throw DataError("checkpoint " + path.string() + " does not match the model parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (loaded.tensors()[i].shape() != params.tensors()[i].shape()) {
      throw DataError("checkpoint parameter '" + params.names()[i] + "' has shape " +
                      shape_string(loaded.tensors()[i].shape()) + ", model expects " +
                      shape_string(params.tensors()[i].shape()));
    }
  }
  params.assign(loaded);
}

}  // namespace reltopo

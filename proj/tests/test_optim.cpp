#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "reltopo/error.hpp"
#include "reltopo/optim.hpp"

using namespace reltopo;

namespace {

Gradients grads_of(const ParameterSet& ps, double value) {
  Gradients g;
  g.names = ps.names();
  for (const auto& t : ps.tensors()) g.values.emplace_back(t.numel(), value);
  return g;
}

}  // namespace

TEST_CASE("adamw with zero gradient and no decay leaves parameters unchanged") {
  ParameterSet ps;
  ps.add("w", {3}, {1.0, -2.0, 0.5});
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  auto state = OptimizerState::for_parameters(ps, cfg);
  adamw_step(state, ps, grads_of(ps, 0.0), 0.1);
  CHECK(ps.at("w").data()[0] == 1.0);
  CHECK(ps.at("w").data()[1] == -2.0);
  CHECK(state.step == 1);
}

TEST_CASE("adamw first step moves by the learning rate") {
  ParameterSet ps;
  ps.add("p", {}, {1.0});
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  auto state = OptimizerState::for_parameters(ps, cfg);
  adamw_step(state, ps, grads_of(ps, 1.0), 0.1);
  // m_hat = 1, v_hat = 1 after bias correction.
  CHECK(ps.at("p").item() == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
}

TEST_CASE("adamw applies decoupled weight decay") {
  ParameterSet ps;
  ps.add("p", {}, {2.0});
  AdamWConfig cfg;
  cfg.weight_decay = 0.01;
  auto state = OptimizerState::for_parameters(ps, cfg);
  adamw_step(state, ps, grads_of(ps, 0.0), 0.1);
  CHECK(ps.at("p").item() == doctest::Approx(2.0 * (1.0 - 0.1 * 0.01)).epsilon(1e-15));
}

TEST_CASE("adamw rejects mismatched gradients") {
  ParameterSet ps;
  ps.add("p", {2}, {1.0, 2.0});
  auto state = OptimizerState::for_parameters(ps, {});
  Gradients g;
  g.names = ps.names();
  g.values = {{1.0}};
  CHECK_THROWS_AS(adamw_step(state, ps, g, 0.1), ShapeError);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 2e-4, 1e-6) == doctest::Approx(2e-4).epsilon(1e-15));
  CHECK(cosine_lr(100, 100, 2e-4, 1e-6) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(cosine_lr(50, 100, 2e-4, 1e-6) == doctest::Approx((2e-4 + 1e-6) / 2).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_lr(0, 0, 1.0, 0.0), ConfigError);
  double prev = 1.0;
  for (std::uint64_t s = 0; s <= 40; ++s) {
    const double lr = cosine_lr(s, 40, 1.0, 0.0);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("checkpoint round trip and error paths") {
  const auto dir = std::filesystem::temp_directory_path() / "reltopo_test_optim";
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(1);
  ParameterSet ps;
  ps.add_uniform("layer.weight", {3, 4}, 3, rng);
  ps.add_uniform("layer.bias", {4}, 3, rng);
  ps.add("scalar", {}, {0.125});
  save_checkpoint(ps, dir / "a.ckpt");

  ParameterSet other = ps.clone();
  for (double& v : other.at("layer.weight").mutable_data()) v = 0.0;
  load_checkpoint(other, dir / "a.ckpt");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto a = ps.tensors()[i].data();
    const auto b = other.tensors()[i].data();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }

  // Truncated file.
  {
    std::ifstream in(dir / "a.ckpt", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream out(dir / "b.ckpt", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
  }
  CHECK_THROWS_AS(load_checkpoint(other, dir / "b.ckpt"), DataError);

  ParameterSet wrong;
  wrong.add("scalar", {}, {0.0});
  CHECK_THROWS_AS(load_checkpoint(wrong, dir / "a.ckpt"), DataError);
  std::filesystem::remove_all(dir);
}

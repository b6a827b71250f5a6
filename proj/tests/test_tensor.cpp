#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "reltopo/error.hpp"
#include "reltopo/gradcheck.hpp"
#include "reltopo/nn.hpp"
#include "reltopo/parameters.hpp"
#include "reltopo/tensor.hpp"

using namespace reltopo;

namespace {

Tensor random_param(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("construction validates shape and finiteness") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({1}, {std::nan("")}), NumericError);
  CHECK_THROWS_AS(Tensor({1}, {std::numeric_limits<double>::infinity()}), NumericError);
  CHECK(Tensor::zeros({3, 4}).numel() == 12);
}

TEST_CASE("primitive examples") {
  const Tensor s = softmax_lastdim(Tensor({3}, {0, 0, 0}));
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Tensor A({3, 3}, {1, -2, 3, 4.5, 5, 6, -7, 8, 9.25});
  const Tensor prod = matmul(eye, A);
  for (std::size_t i = 0; i < 9; ++i) CHECK(prod.data()[i] == A.data()[i]);

  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
}

TEST_CASE("shape errors name the op and shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  CHECK_THROWS_AS(primitive_forward("frobnicate", {a}), ShapeError);
}

TEST_CASE("non-finite results are rejected") {
  CHECK_THROWS_AS(log(Tensor({1}, {0.0})), NumericError);
  CHECK_THROWS_AS(div(Tensor({1}, {1.0}), Tensor({1}, {0.0})), NumericError);
}

TEST_CASE("backward examples") {
  ParameterSet ps;
  Tensor p = ps.add("p", {2, 2}, {1, 2, 3, 4});
  Gradients g = backward(sum(p), ps);
  for (double v : g.get("p")) CHECK(v == 1.0);

  g = backward(sum(mul(p, p)), ps);
  const std::vector<double> expected{2, 4, 6, 8};
  CHECK(g.get("p") == expected);

  Tensor unused = ps.add("unused", {3}, {1, 1, 1});
  g = backward(sum(p), ps);
  for (double v : g.get("unused")) CHECK(v == 0.0);
}

TEST_CASE("backward rejects non-scalar and off-tape losses") {
  ParameterSet ps;
  Tensor p = ps.add("p", {2}, {1, 2});
  CHECK_THROWS_AS(backward(mul(p, p), ps), ShapeError);
  CHECK_THROWS_AS(backward(sum(Tensor::zeros({2})), ps), Error);
}

TEST_CASE("three-layer perceptron matches central differences") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Tensor> leaves{random_param({4, 5}, rng), random_param({5}, rng),
                               random_param({5, 6}, rng), random_param({6}, rng),
                               random_param({6, 1}, rng), random_param({1}, rng)};
    const Tensor x = random_param({3, 4}, rng).detach();
    auto loss = [&](const std::vector<Tensor>& w) {
      Tensor h = sigmoid(add(matmul(x, w[0]), w[1]));
      h = sigmoid(add(matmul(h, w[2]), w[3]));
      return sum(add(matmul(h, w[4]), w[5]));
    };
    CHECK(gradcheck::max_relative_error(loss, leaves) < 1e-4);
  }
}

TEST_CASE("tape linearity: gradient of a sum is the sum of gradients") {
  std::mt19937_64 rng(3);
  ParameterSet ps;
  Tensor a = ps.add("a", {3, 3}, std::vector<double>(9, 0.0));
  for (auto& v : a.mutable_data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  auto l1 = [&] { return sum(sigmoid(matmul(a, a))); };
  auto l2 = [&] { return mean(exp(scale(a, 0.3))); };
  const Gradients g1 = backward(l1(), ps);
  const Gradients g2 = backward(l2(), ps);
  const Gradients g12 = backward(add(l1(), l2()), ps);
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(g12.values[0][i] == doctest::Approx(g1.values[0][i] + g2.values[0][i]).epsilon(1e-12));
  }
}

TEST_CASE("softmax rows sum to one with entries in (0, 1)") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 5.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(4 * 7);
    for (auto& x : v) x = n(rng);
    const Tensor s = softmax_lastdim(Tensor({4, 7}, v));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t k = 0; k < 7; ++k) {
        const double e = s.at({r, k});
        CHECK(e > 0.0);
        CHECK(e < 1.0);
        total += e;
      }
      CHECK(std::fabs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("bilinear_sample examples") {
  std::mt19937_64 rng(5);
  const Tensor grid = random_param({3, 4, 2}, rng).detach();
  const Tensor at = bilinear_sample(grid, Tensor({1, 2}, {1.0, 2.0}));
  CHECK(at.data()[0] == grid.at({1, 2, 0}));
  CHECK(at.data()[1] == grid.at({1, 2, 1}));

  const Tensor small({2, 2, 1}, {1.0, 2.0, 4.0, 8.0});
  CHECK(bilinear_sample(small, Tensor({1, 2}, {0.5, 0.5})).item() == doctest::Approx(15.0 / 4.0));
  CHECK(bilinear_sample(small, Tensor({1, 2}, {-5.0, -5.0})).item() == 0.0);
  CHECK_THROWS_AS(bilinear_sample(Tensor::zeros({1, 4, 1}), Tensor::zeros({1, 2})), ShapeError);
}

TEST_CASE("bilinear_sample is Lipschitz in its coordinates") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 5.0);
  for (int trial = 0; trial < 30; ++trial) {
    const Tensor grid = random_param({5, 5, 1}, rng).detach();
    double L = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        const double v = grid.at({i, j, 0});
        L = std::max(L, std::fabs(v));  // step to the zero border
        if (i + 1 < 5) L = std::max(L, std::fabs(v - grid.at({i + 1, j, 0})));
        if (j + 1 < 5) L = std::max(L, std::fabs(v - grid.at({i, j + 1, 0})));
      }
    }
    const double r = u(rng), c = u(rng), delta = 1e-3;
    const double a = bilinear_sample(grid, Tensor({1, 2}, {r, c})).item();
    const double b = bilinear_sample(grid, Tensor({1, 2}, {r + delta, c})).item();
    const double d = bilinear_sample(grid, Tensor({1, 2}, {r, c + delta})).item();
    CHECK(std::fabs(a - b) <= L * delta + 1e-12);
    CHECK(std::fabs(a - d) <= L * delta + 1e-12);
  }
}

TEST_CASE("layout ops round-trip values") {
  const Tensor a({2, 3}, {0, 1, 2, 3, 4, 5});
  const Tensor t = transpose(a);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.at({2, 1}) == 5.0);
  const Tensor c = concat({a, a}, 1);
  CHECK(c.shape() == Shape{2, 6});
  CHECK(c.at({1, 4}) == 4.0);
  const Tensor s = slice(c, 1, 2, 5);
  CHECK(s.shape() == Shape{2, 3});
  CHECK(s.at({0, 0}) == 2.0);
  CHECK(s.at({0, 1}) == 0.0);
  CHECK(index_rows(a, {1, 1, 0}).at({1, 2}) == 5.0);
  CHECK(reduce_min(a, 1).data()[1] == 3.0);
  CHECK(reduce_max(a, 0).data()[2] == 5.0);
}

TEST_CASE("differentiable sinusoidal encoding interleaves sin and cos") {
  const Tensor e = nn::sinusoidal(Tensor({1, 1}, {0.0}), 8, 10000.0, 1.0);
  CHECK(e.shape() == Shape{1, 8});
  for (std::size_t k = 0; k < 8; ++k) CHECK(e.at({0, k}) == (k % 2 == 0 ? 0.0 : 1.0));
}

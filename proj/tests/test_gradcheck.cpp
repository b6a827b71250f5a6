#include <doctest.h>

#include <algorithm>

#include "reltopo/gradcheck.hpp"

using namespace reltopo;

TEST_CASE("gradcheck suite: every primitive and composite passes over 20 seeded cases") {
  const auto results = gradcheck::run_suite(20);
  const auto names = gradcheck::suite_names();
  REQUIRE(results.size() == names.size());
  for (const char* required :
       {"add", "mul", "div", "matmul", "batched_matmul", "softmax_lastdim", "layer_norm", "bilinear_sample",
        "deformable_sample", "geometry_biased_sa", "curve_guided_ca", "l2l_relation_embedding", "l2l_predict",
        "l2t_head", "focal_loss", "giou_loss", "l1_loss", "bezier_chamfer_loss", "infonce_loss", "total_loss"}) {
    CHECK(std::find(names.begin(), names.end(), required) != names.end());
  }
  for (const auto& r : results) {
    INFO(r.name << " err=" << r.max_rel_error << " " << r.failure);
    CHECK(r.cases == 20);
    CHECK(r.passed);
    CHECK(r.max_rel_error < gradcheck::kTolerance);
  }
}

TEST_CASE("gradcheck suite: a corrupted backward is caught and named") {
  testing::corrupt_backward("sigmoid");
  const auto results = gradcheck::run_suite(2);
  testing::corrupt_backward("");
  bool sigmoid_failed = false, add_passed = false;
  for (const auto& r : results) {
    if (r.name == "sigmoid") sigmoid_failed = !r.passed;
    if (r.name == "add") add_passed = r.passed;
  }
  CHECK(sigmoid_failed);
  CHECK(add_passed);
  CHECK(testing::corrupted_op().empty());
}

TEST_CASE("gradcheck: case count must be positive") {
  CHECK_THROWS(gradcheck::run_suite(0));
}

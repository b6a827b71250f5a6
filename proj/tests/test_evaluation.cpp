#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>

#include "reltopo/error.hpp"
#include "reltopo/evaluation.hpp"

using namespace reltopo;
using namespace reltopo::eval;

namespace {

geom::BezierLane straight(double x0, double y0, double x1, double y1, double conf = 1.0) {
  geom::BezierLane l;
  for (int k = 0; k < 4; ++k) l.control_points.row(k) << x0 + (x1 - x0) * k / 3.0, y0 + (y1 - y0) * k / 3.0, 0.0;
  l.confidence = conf;
  return l;
}

geom::BezierLane lane_from_json(const nlohmann::json& cp, double conf = 1.0) {
  geom::BezierLane l;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 3; ++c) l.control_points(r, c) = cp.at(r).at(c).get<double>();
  l.confidence = conf;
  return l;
}

scenes::Adjacency adjacency_from_json(const nlohmann::json& j) { return j.get<scenes::Adjacency>(); }

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j.at(0).size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index k = 0; k < m.cols(); ++k) m(i, k) = j.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(k));
  return m;
}

scenes::Scene two_lane_scene() {
  scenes::Scene s;
  s.lanes = {straight(0, 0, 10, 0), straight(10, 0, 20, 0)};
  s.adj_l2l = {{0, 1}, {0, 0}};
  scenes::TrafficElement a, b;
  a.cx = 100; a.cy = 50; a.w = 20; a.h = 40; a.class_id = 0;
  b.cx = 300; b.cy = 60; b.w = 30; b.h = 30; b.class_id = 0;
  s.traffic_elements = {a, b};
  s.adj_l2t = {{1, 0}, {0, 1}};
  return s;
}

MetricsReport run(const scenes::Scene& s, const ScenePrediction& p) { return evaluate({{&s, &p}}); }

std::string text(const MetricsReport& r) {
  std::ostringstream os;
  r.write_text(os);
  return os.str();
}

}  // namespace

TEST_CASE("average precision: hand-computed curves") {
  CHECK(average_precision(std::vector<bool>{true, false, true}, 2).ap == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0));
  CHECK(average_precision(std::vector<bool>{true}, 2).ap == doctest::Approx(0.5));
  CHECK(average_precision(std::vector<bool>{}, 3).ap == 0.0);
  // Interpolation lifts the early false positive's precision dip.
  CHECK(average_precision(std::vector<bool>{false, true, true}, 2).ap == doctest::Approx(2.0 / 3.0));
  const auto empty = average_precision(std::vector<bool>{}, 0);
  CHECK(empty.ap == 1.0);
  CHECK(empty.empty_convention);
  CHECK(average_precision(std::vector<bool>{false}, 0).ap == 0.0);
  // Ties rank by group then index.
  const auto tie = average_precision({{0.5, false, 0, 1}, {0.5, true, 0, 0}}, 1);
  CHECK(tie.ap == 1.0);
}

TEST_CASE("box iou") {
  TeDetection a{0, 0, 2, 2, 0, 1}, b{1, 0, 2, 2, 0, 1};
  CHECK(box_iou(a, a) == doctest::Approx(1.0));
  CHECK(box_iou(a, b) == doctest::Approx(2.0 / 6.0));
  CHECK(box_iou(a, TeDetection{5, 5, 1, 1, 0, 1}) == 0.0);
}

TEST_CASE("det_l fixtures") {
  const auto s = two_lane_scene();
  ScenePrediction p = ground_truth_prediction(s);
  auto r = run(s, p);
  CHECK(r.det_l == doctest::Approx(1.0));

  ScenePrediction none = p;
  none.lanes.clear();
  none.l2l = Eigen::MatrixXd::Zero(0, 0);
  none.l2t = Eigen::MatrixXd::Zero(0, 2);
  r = run(s, none);
  CHECK(r.det_l == 0.0);

  ScenePrediction one = p;
  one.lanes = {s.lanes[0]};
  one.l2l = Eigen::MatrixXd::Zero(1, 1);
  one.l2t = Eigen::MatrixXd::Zero(1, 2);
  r = run(s, one);
  for (double ap : r.det_l_at) CHECK(ap == doctest::Approx(0.5));

  // 1.5 m lateral offset: a miss at 1 m, a hit at 2 and 3 m.
  ScenePrediction off = p;
  off.lanes = {straight(0, 1.5, 10, 1.5), straight(10, 1.5, 20, 1.5)};
  r = run(s, off);
  CHECK(r.det_l_at[0] == 0.0);
  CHECK(r.det_l_at[1] == doctest::Approx(1.0));
  CHECK(r.det_l == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("det_l: empty ground truth conventions") {
  scenes::Scene s;
  ScenePrediction p;
  p.l2l = Eigen::MatrixXd::Zero(0, 0);
  p.l2t = Eigen::MatrixXd::Zero(0, 0);
  auto r = run(s, p);
  CHECK(r.det_l == 1.0);
  CHECK(r.lanes_empty_convention);
  CHECK(r.det_t == 1.0);
  CHECK(r.tes_empty_convention);
  CHECK(r.top_ll == 0.0);
  CHECK(r.top_ll_undefined);
  CHECK(text(r).find("flag.top_ll_no_gt_edges = 1") != std::string::npos);
  p.lanes = {straight(0, 0, 10, 0, 0.5)};
  p.l2l = Eigen::MatrixXd::Zero(1, 1);
  p.l2t = Eigen::MatrixXd::Zero(1, 0);
  r = run(s, p);
  CHECK(r.det_l == 0.0);
  CHECK_FALSE(r.lanes_empty_convention);
}

TEST_CASE("det_t fixtures") {
  const auto s = two_lane_scene();
  ScenePrediction p = ground_truth_prediction(s);
  CHECK(run(s, p).det_t == doctest::Approx(1.0));
  // Shift by a third of the width: IoU = (2/3)/(4/3) = 0.5.
  ScenePrediction shifted = p;
  for (auto& d : shifted.tes) d.cx += d.w / 3.0;
  CHECK(box_iou(shifted.tes[0], p.tes[0]) == doctest::Approx(0.5));
  CHECK(run(s, shifted).det_t == 0.0);
  ScenePrediction half = p;
  half.tes = {p.tes[0]};
  half.l2t = Eigen::MatrixXd::Zero(2, 1);
  const auto r = run(s, half);
  CHECK(r.det_t == doctest::Approx(0.5));
  REQUIRE(r.det_t_per_class.size() == 1);
  CHECK(r.det_t_per_class[0].second == doctest::Approx(0.5));
  // Wrong class never matches.
  ScenePrediction wrong = p;
  for (auto& d : wrong.tes) d.class_id = 1;
  CHECK(run(s, wrong).det_t == 0.0);
}

TEST_CASE("topology: perfect, strictly ordered and zero-score cases") {
  const auto s = two_lane_scene();
  ScenePrediction p = ground_truth_prediction(s);
  auto r = run(s, p);
  CHECK(r.top_ll == doctest::Approx(1.0));
  CHECK(r.top_lt == doctest::Approx(1.0));
  CHECK(r.ols == doctest::Approx(1.0));
  // Any scores that put every GT edge above every non-edge give 1.
  p.l2l << 0.2, 0.7, 0.1, 0.3;
  p.l2t << 0.9, 0.4, 0.35, 0.6;
  r = run(s, p);
  CHECK(r.top_ll == doctest::Approx(1.0));
  CHECK(r.top_lt == doctest::Approx(1.0));
  // All-zero scores: ranking by index. L2T row 1 ranks (T0 miss, T1 hit) -> 0.5,
  // column T1 ranks (L0 miss, L1 hit) -> 0.5, the other two vertices get 1.
  p.l2t.setZero();
  r = run(s, p);
  CHECK(r.top_lt == doctest::Approx(0.75));
  CHECK(r.top_lt_vertices == 4);
}

TEST_CASE("topology: pairs with an undetected lane count as missed, whatever the index order") {
  const auto s = two_lane_scene();
  const ScenePrediction gt = ground_truth_prediction(s);
  ScenePrediction p;
  p.lanes = {gt.lanes[0]};
  p.tes = gt.tes;
  p.l2l = Eigen::MatrixXd::Zero(1, 1);
  p.l2t = Eigen::MatrixXd(1, 2);
  p.l2t << 0.9, 0.1;
  const auto r = run(s, p);
  // Both L2L vertices need lane 1, which was never detected.
  CHECK(r.top_ll == 0.0);
  CHECK(r.top_ll_vertices == 2);
  // L2T: row L0 and column T0 are perfect; row L1 and column T1 are missed.
  CHECK(r.top_lt == doctest::Approx(0.5));
  CHECK(r.top_lt_vertices == 4);
}

TEST_CASE("topology: committed 3-lane chain fixture matches the exhaustive oracle") {
  std::ifstream f(std::string(RELTOPO_FIXTURE_DIR) + "/topology_chain.json");
  REQUIRE(f.good());
  const auto j = nlohmann::json::parse(f);
  scenes::Scene s;
  for (const auto& cp : j["gt"]["lanes"]) s.lanes.push_back(lane_from_json(cp));
  for (const auto& te : j["gt"]["traffic_elements"]) {
    scenes::TrafficElement t;
    t.cx = te["box"][0]; t.cy = te["box"][1]; t.w = te["box"][2]; t.h = te["box"][3];
    t.class_id = te["class_id"];
    s.traffic_elements.push_back(t);
  }
  s.adj_l2l = adjacency_from_json(j["gt"]["adj_l2l"]);
  s.adj_l2t = adjacency_from_json(j["gt"]["adj_l2t"]);
  ScenePrediction p;
  for (const auto& l : j["prediction"]["lanes"]) p.lanes.push_back(lane_from_json(l["control_points"], l["confidence"]));
  for (const auto& te : j["prediction"]["traffic_elements"]) {
    p.tes.push_back({te["box"][0], te["box"][1], te["box"][2], te["box"][3], te["class_id"], te["confidence"]});
  }
  p.l2l = matrix_from_json(j["prediction"]["l2l"]);
  p.l2t = matrix_from_json(j["prediction"]["l2t"]);

  const auto lm = match_lanes(p.lanes, s.lanes, 1.0);
  const auto tm = match_tes(p.tes, s.traffic_elements);
  CHECK(lm.gt_to_pred == j["expected"]["lane_gt_to_pred"].get<std::vector<int>>());
  CHECK(tm.gt_to_pred == j["expected"]["te_gt_to_pred"].get<std::vector<int>>());
  const auto r = run(s, p);
  CHECK(std::fabs(r.top_ll - j["expected"]["top_ll"].get<double>()) < 1e-9);
  CHECK(std::fabs(r.top_lt - j["expected"]["top_lt"].get<double>()) < 1e-9);
  CHECK(r.top_ll_vertices == j["expected"]["top_ll_vertex_aps"].size());
  CHECK(r.top_lt_vertices == j["expected"]["top_lt_vertex_aps"].size());
}

TEST_CASE("ols: published rows, extremes and domain errors") {
  CHECK(std::fabs(100.0 * ols(0.338, 0.509, 0.292, 0.322) - 48.9) <= 0.05);
  CHECK(std::fabs(100.0 * ols(0.285, 0.505, 0.217, 0.273) - 44.5) <= 0.05);
  CHECK(ols(1, 1, 1, 1) == 1.0);
  CHECK(ols(0, 0, 0, 0) == 0.0);
  CHECK_THROWS_AS(ols(1.1, 0, 0, 0), ConfigError);
  CHECK_THROWS_AS(ols(0, 0, -0.1, 0), ConfigError);
  CHECK_THROWS_AS(ols(0, 0, 0, std::nan("")), ConfigError);
}

TEST_CASE("evaluate: invariants on generated scenes with noisy predictions") {
  scenes::SceneConfig sc;
  std::vector<scenes::Scene> scenes_;
  std::vector<ScenePrediction> preds;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> jitter(0.0, 0.8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::uint64_t k = 0; k < 6; ++k) {
    scenes_.push_back(scenes::generate_scene(sc, 300 + k));
    ScenePrediction p = ground_truth_prediction(scenes_.back());
    for (auto& l : p.lanes) {
      l.control_points += Eigen::Matrix<double, 4, 3>::NullaryExpr([&] { return jitter(rng); });
      l.confidence = u(rng);
    }
    for (auto& t : p.tes) {
      t.cx += 3.0 * jitter(rng);
      t.confidence = u(rng);
    }
    p.l2l = p.l2l.unaryExpr([&](double v) { return 0.5 * v + 0.5 * u(rng); });
    p.l2t = p.l2t.unaryExpr([&](double v) { return 0.5 * v + 0.5 * u(rng); });
    preds.push_back(p);
  }
  std::vector<EvalItem> items;
  for (std::size_t k = 0; k < preds.size(); ++k) items.push_back({&scenes_[k], &preds[k]});
  const auto r = evaluate(items);
  CHECK(r.det_l_at[2] >= r.det_l_at[1]);
  CHECK(r.det_l_at[1] >= r.det_l_at[0]);
  CHECK(std::fabs(r.ols - 0.25 * (r.det_l + r.det_t + std::sqrt(r.top_ll) + std::sqrt(r.top_lt))) < 1e-9);
  for (double v : {r.det_l, r.det_t, r.top_ll, r.top_lt, r.ols}) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  // Reversing prediction order (with matrices permuted alongside) changes nothing.
  std::vector<ScenePrediction> rev;
  for (const auto& p : preds) {
    ScenePrediction q = p;
    std::reverse(q.lanes.begin(), q.lanes.end());
    std::reverse(q.tes.begin(), q.tes.end());
    q.l2l = p.l2l.colwise().reverse().rowwise().reverse();
    q.l2t = p.l2t.colwise().reverse().rowwise().reverse();
    rev.push_back(q);
  }
  std::vector<EvalItem> rev_items;
  for (std::size_t k = 0; k < rev.size(); ++k) rev_items.push_back({&scenes_[k], &rev[k]});
  CHECK(text(evaluate(rev_items)) == text(r));
  CHECK(text(evaluate(items)) == text(r));

  std::vector<ScenePrediction> truth;
  for (const auto& s : scenes_) truth.push_back(ground_truth_prediction(s));
  std::vector<EvalItem> t_items;
  for (std::size_t k = 0; k < truth.size(); ++k) t_items.push_back({&scenes_[k], &truth[k]});
  const auto perfect = evaluate(t_items);
  CHECK(perfect.det_l == 1.0);
  CHECK(perfect.det_t == 1.0);
  CHECK(perfect.top_ll == 1.0);
  CHECK(perfect.top_lt == 1.0);
  CHECK(perfect.ols == 1.0);
}

TEST_CASE("report text and csv layout") {
  const auto s = two_lane_scene();
  const auto r = run(s, ground_truth_prediction(s));
  const std::string t = text(r);
  CHECK(t.rfind("DET_l = 1.0000000000\nDET_l@1.0m = ", 0) == 0);
  CHECK(t.find("OLS = 1.0000000000\n") != std::string::npos);
  CHECK(MetricsReport::csv_header() == "DET_l,DET_l@1m,DET_l@2m,DET_l@3m,DET_t,TOP_ll,TOP_lt,OLS");
  const std::string row = r.csv_row();
  CHECK(std::count(row.begin(), row.end(), ',') == 7);
}

TEST_CASE("topology: mismatched matrices are data errors") {
  const auto s = two_lane_scene();
  ScenePrediction p = ground_truth_prediction(s);
  p.l2l = Eigen::MatrixXd::Zero(3, 3);
  CHECK_THROWS_AS(run(s, p), DataError);
}

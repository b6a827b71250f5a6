// Acceptance checks. `reltopo_acceptance --criterion N` runs one check and
// prints a single "CRITERION N: PASS|FAIL ..." line after its diagnostics;
// without --criterion every check runs in order.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <sys/wait.h>

#include "oracles.hpp"
#include "reltopo/attention.hpp"
#include "reltopo/error.hpp"
#include "reltopo/experiment.hpp"
#include "reltopo/gradcheck.hpp"
#include "reltopo/report.hpp"
#include "reltopo/scenes.hpp"

namespace fs = std::filesystem;
using namespace reltopo;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1. OLS formula on every published row.
Outcome criterion1() {
  const auto t0 = Clock::now();
  const auto rows = report::load_table(std::string(RELTOPO_FIXTURE_DIR) + "/table1.json");
  std::vector<report::OlsCheck> checks;
  std::size_t ok = 0, rounding = 0, inconsistent = 0;
  for (const auto& r : rows) {
    checks.push_back(report::check_ols(r));
    if (checks.back().within) {
      ++ok;
    } else if (checks.back().consistent_with_rounding) {
      ++rounding;
    } else {
      ++inconsistent;
    }
  }
  report::write_ols_table(checks, std::cout);
  const double secs = seconds_since(t0);
  return {ok == rows.size() && secs < 1.0,
          fmt("%zu/%zu rows within 0.05 (%zu off only through rounding of the printed components, %zu not reachable "
              "by any rounding), %.3f s",
              ok, rows.size(), rounding, inconsistent, secs)};
}

// 2. Finite-difference gradient suite.
Outcome criterion2() {
  const auto t0 = Clock::now();
  const auto results = gradcheck::run_suite(20, 2024);
  const double secs = seconds_since(t0);
  std::size_t passed = 0;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& r : results) {
    std::printf("  %-26s cases=%d max_rel_err=%.3e %s %s\n", r.name.c_str(), r.cases, r.max_rel_error,
                r.passed ? "PASS" : "FAIL", r.failure.c_str());
    passed += r.passed;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
  }
  const bool cases_ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.cases >= 20; });
  return {passed == results.size() && cases_ok && secs < 120.0,
          fmt("%zu/%zu ops pass at 20 cases each, worst %.2e (%s), %.1f s", passed, results.size(), worst,
              worst_name.c_str(), secs)};
}

// 3. Hungarian, Fréchet and Bézier against independent oracles.
Outcome criterion3() {
  std::size_t hung_bad = 0, hung_total = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> dim(1, 6);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    const int p = dim(rng), g = dim(rng);
    Eigen::MatrixXd c(p, g);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < g; ++j) c(i, j) = u(rng);
    const auto m = train::hungarian_match(c);
    double sum = 0.0;
    for (int i = 0; i < p; ++i)
      if (m.assignment[i] >= 0) sum += c(i, m.assignment[i]);
    ++hung_total;
    if (sum != test_oracles::assignment_brute(c) || m.total_cost != sum) ++hung_bad;
  }
  std::size_t fre_bad = 0, fre_total = 0;
  double fre_worst = 0.0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    const int n = 1 + static_cast<int>(seed % 6), k = 1 + static_cast<int>((seed / 6) % 6);
    geom::Points<double> a(n, 3), b(k, 3);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < 3; ++d) a(i, d) = u(rng);
    for (int i = 0; i < k; ++i)
      for (int d = 0; d < 3; ++d) b(i, d) = u(rng);
    const double err = std::fabs(geom::discrete_frechet(a, b) - test_oracles::frechet_by_paths(a, b));
    fre_worst = std::max(fre_worst, err);
    ++fre_total;
    if (err > 1e-12) ++fre_bad;
  }
  double bez_worst = 0.0;
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(-50.0, 50.0), ut(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    geom::BezierLane lane;
    for (int r = 0; r < 4; ++r)
      for (int d = 0; d < 3; ++d) lane.control_points(r, d) = u(rng);
    const double t = ut(rng);
    const Eigen::Vector3d oracle = test_oracles::de_casteljau(lane.control_points, t);
    bez_worst = std::max(bez_worst, (geom::bezier_eval(lane, t) - oracle).cwiseAbs().maxCoeff());
  }
  return {hung_bad == 0 && fre_bad == 0 && bez_worst < 1e-12,
          fmt("Hungarian exact on %zu/%zu matrices up to 6x6; Frechet %zu/%zu within 1e-12 (worst %.1e); "
              "Bezier vs de Casteljau worst %.1e on 1000 pairs",
              hung_total - hung_bad, hung_total, fre_total - fre_bad, fre_total, fre_worst, bez_worst)};
}

// 4. Loss fixtures.
Outcome criterion4() {
  const double nce = train::infonce_single(Tensor::scalar(0.0), Tensor({1}, {0.0})).item();
  const double focal = train::focal_loss(Tensor({1}, {0.0}), Tensor({1}, {1.0})).item();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-6.0, 6.0);
    const std::size_t k = 1 + seed % 7;
    std::vector<double> line(k + 1);
    for (double& v : line) v = u(rng);
    const std::size_t p = seed % (k + 1);
    train::Adjacency gt{std::vector<std::uint8_t>(k + 1, 0)};
    gt[0][p] = 1;
    std::vector<double> negs;
    for (std::size_t j = 0; j <= k; ++j)
      if (j != p) negs.push_back(line[j]);
    std::sort(negs.rbegin(), negs.rend());
    negs.resize(std::min<std::size_t>(negs.size(), 3));
    const double single = train::infonce_single(Tensor::scalar(line[p]), Tensor({negs.size()}, negs)).item();
    const double multi = train::infonce_topology_loss(Tensor({1, k + 1}, line), gt, 3).item();
    worst = std::max(worst, std::fabs(single - multi));
  }
  // 0.04332 is the rounded display of 0.25*0.25*ln 2 = 0.0433217..; the 1e-6 tolerance applies to the formula.
  const double focal_ref = 0.25 * 0.25 * std::log(2.0);
  const double nce_err = std::fabs(nce - std::log(2.0)), focal_err = std::fabs(focal - focal_ref);
  const bool rounds = std::fabs(focal - 0.04332) < 5e-6;
  return {nce_err < 1e-9 && focal_err < 1e-6 && rounds && worst < 1e-12,
          fmt("InfoNCE single pair %.12f (|err| %.1e); focal p=0.5 %.8f (|err| %.1e vs formula, rounds to 0.04332: "
              "%s); multi vs single-positive worst %.1e over 500 instances",
              nce, nce_err, focal, focal_err, rounds ? "yes" : "no", worst)};
}

// 5. Committed topology fixture.
Outcome criterion5() {
  std::ifstream f(std::string(RELTOPO_FIXTURE_DIR) + "/topology_chain.json");
  if (!f) throw DataError("missing topology_chain.json");
  const auto j = nlohmann::json::parse(f);
  auto lane = [](const nlohmann::json& cp, double conf) {
    geom::BezierLane l;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 3; ++c) l.control_points(r, c) = cp[r][c].get<double>();
    l.confidence = conf;
    return l;
  };
  auto adjacency = [](const nlohmann::json& a) {
    scenes::Adjacency out;
    for (const auto& row : a) out.push_back(row.get<std::vector<std::uint8_t>>());
    return out;
  };
  auto matrix = [](const nlohmann::json& a) {
    Eigen::MatrixXd m(a.size(), a[0].size());
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t k = 0; k < a[i].size(); ++k) m(i, k) = a[i][k].get<double>();
    return m;
  };
  scenes::Scene s;
  for (const auto& cp : j["gt"]["lanes"]) s.lanes.push_back(lane(cp, 1.0));
  for (const auto& te : j["gt"]["traffic_elements"]) {
    scenes::TrafficElement t;
    t.cx = te["box"][0];
    t.cy = te["box"][1];
    t.w = te["box"][2];
    t.h = te["box"][3];
    t.class_id = te["class_id"];
    s.traffic_elements.push_back(t);
  }
  s.adj_l2l = adjacency(j["gt"]["adj_l2l"]);
  s.adj_l2t = adjacency(j["gt"]["adj_l2t"]);
  eval::ScenePrediction p;
  for (const auto& l : j["prediction"]["lanes"]) p.lanes.push_back(lane(l["control_points"], l["confidence"]));
  for (const auto& te : j["prediction"]["traffic_elements"]) {
    p.tes.push_back({te["box"][0], te["box"][1], te["box"][2], te["box"][3], te["class_id"], te["confidence"]});
  }
  p.l2l = matrix(j["prediction"]["l2l"]);
  p.l2t = matrix(j["prediction"]["l2t"]);
  const auto r = eval::evaluate({{&s, &p}});
  const double ell = std::fabs(r.top_ll - j["expected"]["top_ll"].get<double>());
  const double elt = std::fabs(r.top_lt - j["expected"]["top_lt"].get<double>());
  return {ell < 1e-9 && elt < 1e-9,
          fmt("TOP_ll %.12f vs oracle %.12f, TOP_lt %.12f vs oracle %.12f", r.top_ll,
              j["expected"]["top_ll"].get<double>(), r.top_lt, j["expected"]["top_lt"].get<double>())};
}

// 6. Single-scene overfit with the default toy config.
Outcome criterion6() {
  const auto t0 = Clock::now();
  RunConfig cfg = parse_run_config(nlohmann::json::object());
  cfg.train.steps = 500;
  const auto data = experiment::prepare_all({scenes::generate_scene(cfg.scene, 7)}, cfg.scene);
  const auto t = experiment::train_model(cfg, data);
  double early = 0.0;
  for (std::size_t i = 0; i < 10; ++i) early += t.records[i].total;
  early /= 10.0;
  double last = 0.0;
  for (std::size_t i = t.records.size() - 10; i < t.records.size(); ++i) last += t.records[i].total;
  last /= 10.0;
  const double drop = 1.0 - last / early;
  const auto report = experiment::evaluate_model(t.model, data);
  const double secs = seconds_since(t0);
  return {drop >= 0.9 && report.det_l_at[0] == 1.0 && secs < 180.0,
          fmt("loss %.4f -> %.4f (mean of first vs last 10 steps, drop %.1f%%), DET_l@1.0m %.4f, %.1f s", early, last,
              100.0 * drop, report.det_l_at[0], secs)};
}

// 7. Baseline vs full ablation trend on 200 scenes, 3 seeds.
Outcome criterion7() {
  const auto t0 = Clock::now();
  // The committed config fixes the dataset size, split, steps and seeds.
  RunConfig cfg = load_run_config(std::string(RELTOPO_CONFIG_DIR) + "/ablation.json");
  cfg.ablation_variants = {"baseline", "full"};
  if (cfg.dataset_count != 200 || cfg.ablation_seeds != 3) throw ConfigError("ablation.json must use 200 scenes and 3 seeds");
  std::vector<scenes::Scene> scenes_(cfg.dataset_count);
  for (std::size_t i = 0; i < scenes_.size(); ++i) scenes_[i] = scenes::generate_scene(cfg.scene, cfg.seed + i);
  auto all = experiment::prepare_all(scenes_, cfg.scene);
  const std::size_t split = experiment::holdout_split(all.size(), cfg.holdout_fraction);
  std::vector<train::PreparedScene> test(all.begin() + static_cast<std::ptrdiff_t>(split), all.end());
  all.resize(split);
  const auto runs = experiment::run_ablation(cfg, all, test, &std::cout);
  const auto summary = experiment::summarize(runs);
  report::write_ablation_table(summary, {cfg.seed, cfg.seed + 1, cfg.seed + 2}, all.size(), test.size(), std::cout);
  const auto& base = summary.at(0).mean;
  const auto& full = summary.at(1).mean;
  const double gap = 100.0 * (full.top_ll - base.top_ll);
  const double secs = seconds_since(t0);
  return {gap >= 5.0 && full.ols > base.ols && secs < 45 * 60.0,
          fmt("mean TOP_ll full %.2f vs baseline %.2f (gap %.2f points, need >= 5); mean OLS full %.2f vs baseline "
              "%.2f; %zu steps per run; %.0f s",
              100 * full.top_ll, 100 * base.top_ll, gap, 100 * full.ols, 100 * base.ols,
              static_cast<std::size_t>(cfg.train.steps), secs)};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(RELTOPO_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// 8. generate + train + eval twice, byte-compare the reports.
Outcome criterion8() {
  const fs::path root = fs::temp_directory_path() / "reltopo_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream(root / "config.json") << R"({"seed": 11, "train": {"steps": 60}})";
  std::vector<std::string> reports;
  for (int k = 0; k < 2; ++k) {
    const fs::path run = root / ("run" + std::to_string(k));
    const std::string cfg = " --config " + (root / "config.json").string();
    if (run_cli("generate --count 6" + cfg + " --out " + (run / "data").string()) != 0 ||
        run_cli("train" + cfg + " --data " + (run / "data").string() + " --out " + (run / "train").string()) != 0 ||
        run_cli("eval" + cfg + " --checkpoint " + (run / "train" / "checkpoint.bin").string() + " --data " +
                (run / "data").string() + " --out " + (run / "eval").string()) != 0) {
      return {false, "a pipeline command failed"};
    }
    reports.push_back(slurp(run / "eval" / "metrics.txt") + slurp(run / "eval" / "metrics.csv") +
                      slurp(run / "train" / "metrics.txt"));
  }
  const bool same_ckpt = slurp(root / "run0" / "train" / "checkpoint.bin") == slurp(root / "run1" / "train" / "checkpoint.bin");
  return {!reports[0].empty() && reports[0] == reports[1] && same_ckpt,
          fmt("metric reports %s, checkpoints %s (%zu report bytes)", reports[0] == reports[1] ? "identical" : "DIFFER",
              same_ckpt ? "identical" : "DIFFER", reports[0].size())};
}

// 9. Invariant suites.
Outcome criterion9() {
  std::vector<std::string> failures;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> ux(2.0, 30.0), uy(-6.0, 6.0), uz(-0.2, 0.2), uq(-3.0, 3.0);
  auto random_lane = [&] {
    geom::BezierLane l;
    const double x0 = ux(rng), y0 = uy(rng), x1 = ux(rng), y1 = uy(rng);
    for (int r = 0; r < 4; ++r) {
      const double t = r / 3.0;
      l.control_points.row(r) << x0 + t * (x1 - x0) + uz(rng), y0 + t * (y1 - y0) + uz(rng), uz(rng);
    }
    return l;
  };
  ParameterSet ps;
  const auto gb = attn::GeometryBiasParams::create(ps, "gb", {}, 16, 4, rng);
  double asym = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<geom::BezierLane> lanes;
    for (int i = 0; i < 6; ++i) lanes.push_back(random_lane());
    const Tensor b = attn::geometry_bias_matrix(lanes, gb);
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) asym = std::max(asym, std::fabs(b.at({h, i, j}) - b.at({h, j, i})));
  }
  if (asym > 1e-9) failures.push_back(fmt("geometry bias asymmetry %.1e", asym));

  auto ca = attn::DeformableAttentionParams::create(ps, "ca", 8, 4, 11, 2, rng);
  double werr = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> qv(6 * 8);
    for (double& v : qv) v = uq(rng);
    const Tensor w = attn::deformable_weights(Tensor({6, 8}, qv), ca);
    for (std::size_t l = 0; l < 6; ++l)
      for (std::size_t m = 0; m < 4; ++m) {
        double s = 0.0;
        for (std::size_t j = 0; j < 22; ++j) s += w.at({l, m, j});
        werr = std::max(werr, std::fabs(s - 1.0));
      }
  }
  if (werr > 1e-9) failures.push_back(fmt("deformable weights row sum error %.1e", werr));

  double serr = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(5 * 7);
    for (double& x : v) x = 20.0 * uq(rng);
    const Tensor s = softmax_lastdim(Tensor({5, 7}, v));
    for (std::size_t i = 0; i < 5; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 7; ++j) sum += s.at({i, j});
      serr = std::max(serr, std::fabs(sum - 1.0));
    }
  }
  if (serr > 1e-12) failures.push_back(fmt("softmax row sum error %.1e", serr));

  const scenes::SceneConfig sc;
  std::size_t invalid = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    try {
      const auto s = scenes::generate_scene(sc, seed);
      s.validate();
      for (std::size_t i = 0; i < s.lanes.size(); ++i) {
        if (s.adj_l2l[i][i]) throw DataError("self edge");
        for (std::size_t j = 0; j < s.lanes.size(); ++j)
          if (s.adj_l2l[i][j] && (s.lanes[i].end() - s.lanes[j].start()).norm() >= 0.2) throw DataError("gap");
      }
    } catch (const Error&) {
      ++invalid;
    }
  }
  if (invalid) failures.push_back(fmt("%zu/1000 generated scenes invalid", invalid));

  const fs::path dir = fs::temp_directory_path() / "reltopo_acceptance_roundtrip";
  fs::create_directories(dir);
  std::size_t mismatched = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = scenes::generate_scene(sc, seed);
    scenes::save_scene(s, dir / "s.json");
    if (!(scenes::load_scene(dir / "s.json") == s)) ++mismatched;
  }
  if (mismatched) failures.push_back(fmt("%zu/200 scene files did not round-trip", mismatched));

  std::string detail = fmt("bias asymmetry %.1e, weight-sum err %.1e, softmax err %.1e, 1000 scenes valid=%zu, "
                           "200 round-trips exact=%zu",
                           asym, werr, serr, 1000 - invalid, 200 - mismatched);
  for (const auto& f : failures) detail += "; " + f;
  return {failures.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reltopo acceptance checks"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::function<Outcome()>> checks{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                     criterion6, criterion7, criterion8, criterion9};
  bool all = true;
  for (int k = 1; k <= 9; ++k) {
    if (only && k != only) continue;
    Outcome o;
    try {
      o = checks[static_cast<std::size_t>(k - 1)]();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::cout << "CRITERION " << k << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << std::endl;
    all = all && o.pass;
  }
  return all ? 0 : 5;
}

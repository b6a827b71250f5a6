#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "reltopo/error.hpp"
#include "reltopo/scenes.hpp"

using namespace reltopo;
using namespace reltopo::scenes;

namespace {

std::filesystem::path temp_dir(const char* name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double channel_sum(const FeatureGrid& g, std::size_t ch) {
  double s = 0.0;
  const auto d = g.values.data();
  for (std::size_t i = ch; i < d.size(); i += g.channels()) s += d[i];
  return s;
}

}  // namespace

TEST_CASE("generation is deterministic per seed") {
  SceneConfig cfg;
  const auto dir = temp_dir("reltopo_scene_det");
  for (std::uint64_t seed : {0ull, 7ull, 123456789ull}) {
    const Scene a = generate_scene(cfg, seed);
    const Scene b = generate_scene(cfg, seed);
    CHECK(a == b);
    save_scene(a, dir / "a.json");
    save_scene(b, dir / "b.json");
    CHECK(read_file(dir / "a.json") == read_file(dir / "b.json"));
  }
  CHECK_FALSE(generate_scene(cfg, 1) == generate_scene(cfg, 2));
  std::filesystem::remove_all(dir);
}

TEST_CASE("generator invariants hold over 1000 seeds") {
  SceneConfig cfg;
  std::size_t lanes = 0, edges = 0, tes = 0, lt = 0, splits = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Scene s = generate_scene(cfg, seed);
    REQUIRE_NOTHROW(s.validate());
    const std::size_t n = s.lanes.size();
    lanes += n;
    tes += s.traffic_elements.size();
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(s.adj_l2l[i][i] == 0);
      std::size_t succ = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (!s.adj_l2l[i][j]) continue;
        ++succ;
        CHECK(geom::endpoint_min_distance(s.lanes[i], s.lanes[j]) < 0.2);
        CHECK((s.lanes[i].end() - s.lanes[j].start()).norm() < 0.2);
      }
      edges += succ;
      splits += succ > 1 ? 1 : 0;
      for (auto v : s.adj_l2t[i]) lt += v;
    }
    for (const auto& l : s.lanes) {
      for (int r = 0; r < 4; ++r) {
        CHECK(l.control_points(r, 0) >= cfg.bev_extent.x_min);
        CHECK(l.control_points(r, 0) <= cfg.bev_extent.x_max);
        CHECK(l.control_points(r, 1) >= cfg.bev_extent.y_min);
        CHECK(l.control_points(r, 1) <= cfg.bev_extent.y_max);
        CHECK(std::fabs(l.control_points(r, 2)) <= 0.5);
      }
    }
    for (const auto& t : s.traffic_elements) {
      CHECK(t.cx - t.w / 2 >= 0.0);
      CHECK(t.cx + t.w / 2 <= s.camera.width);
      CHECK(t.cy - t.h / 2 >= 0.0);
      CHECK(t.cy + t.h / 2 <= s.camera.height);
    }
  }
  MESSAGE("mean lanes " << lanes / 1000.0 << ", L2L edges " << edges / 1000.0 << ", TEs " << tes / 1000.0
                        << ", L2T edges " << lt / 1000.0 << ", split lanes " << splits / 1000.0);
  CHECK(edges > 0);
  CHECK(lt > 0);
  CHECK(splits > 0);
}

TEST_CASE("without intersections the lane graph is a set of chains") {
  SceneConfig cfg;
  cfg.intersection_probability = 0.0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Scene s = generate_scene(cfg, seed);
    const std::size_t n = s.lanes.size();
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t succ = 0, pred = 0;
      for (std::size_t j = 0; j < n; ++j) {
        succ += s.adj_l2l[i][j];
        pred += s.adj_l2l[j][i];
      }
      CHECK(succ <= 1);
      CHECK(pred <= 1);
    }
  }
}

TEST_CASE("infeasible configurations are rejected") {
  SceneConfig cfg;
  cfg.corridors_min = cfg.corridors_max = 9;
  CHECK_THROWS_AS(generate_scene(cfg, 0), ConfigError);
  SceneConfig seg;
  seg.segments_max = 40;
  CHECK_THROWS_AS(generate_scene(seg, 0), ConfigError);
  SceneConfig neg;
  neg.noise = -1.0;
  CHECK_THROWS_AS(neg.validate(), ConfigError);
}

TEST_CASE("rasterizing an empty scene leaves only noise") {
  SceneConfig cfg;
  Scene s = generate_scene(cfg, 3);
  s.lanes.clear();
  s.traffic_elements.clear();
  s.adj_l2l.clear();
  s.adj_l2t.clear();
  cfg.noise = 0.0;
  const auto clean = rasterize(s, cfg);
  for (double v : clean.bev.values.data()) CHECK(v == 0.0);
  for (double v : clean.fv.values.data()) CHECK(v == 0.0);
  cfg.noise = 0.1;
  const auto noisy = rasterize(s, cfg);
  double var = 0.0;
  for (double v : noisy.bev.values.data()) var += v * v;
  var /= static_cast<double>(noisy.bev.values.numel());
  CHECK(std::sqrt(var) == doctest::Approx(0.1).epsilon(0.05));
}

TEST_CASE("a straight lane fills its cells and nothing far away") {
  SceneConfig cfg;
  cfg.noise = 0.0;
  Scene s = generate_scene(cfg, 4);
  s.lanes.clear();
  s.traffic_elements.clear();
  geom::BezierLane lane;
  for (int r = 0; r < 4; ++r) lane.control_points.row(r) << 4.0 + 18.0 * r, 0.0, 0.0;
  s.lanes.push_back(lane);
  s.adj_l2l = {{0}};
  s.adj_l2t = {{}};
  const auto r = rasterize(s, cfg);
  const FeatureGrid& g = r.bev;
  // y = 0 falls between rows 15 and 16; cells at x in [6, 56] should be strongly lit.
  for (std::size_t col = 6; col < 56; ++col) {
    CHECK(g.values.at({15, col, 0}) > 0.6);
    CHECK(g.values.at({16, col, 0}) > 0.6);
    CHECK(g.values.at({15, col, 2}) > 0.6);  // heading along +x
    CHECK(std::fabs(g.values.at({15, col, 1})) < 1e-9);
    CHECK(g.values.at({2, col, 0}) == 0.0);
    CHECK(g.values.at({29, col, 0}) == 0.0);
  }
  const auto again = rasterize(s, cfg);
  CHECK(std::equal(g.values.data().begin(), g.values.data().end(), again.bev.values.data().begin()));
}

TEST_CASE("occupancy mass is Lipschitz in lane displacement") {
  SceneConfig cfg;
  cfg.noise = 0.0;
  const Scene base = generate_scene(cfg, 11);
  const double m0 = channel_sum(rasterize(base, cfg).bev, 0);
  double worst = 0.0;
  for (double eps : {1e-3, 1e-2, 5e-2}) {
    Scene moved = base;
    for (auto& l : moved.lanes) l.control_points.col(1).array() += eps;
    const double m1 = channel_sum(rasterize(moved, cfg).bev, 0);
    worst = std::max(worst, std::fabs(m1 - m0) / eps);
  }
  // Bound: every stroke sample moves by eps; the Gaussian kernel slope is at
  // most 1/(sigma sqrt(e)) per cell and a lane touches a bounded number of cells.
  CHECK(worst < 200.0 * static_cast<double>(base.lanes.size()));
}

TEST_CASE("scene files round-trip exactly") {
  SceneConfig cfg;
  const auto dir = temp_dir("reltopo_scene_rt");
  for (std::uint64_t seed = 100; seed < 200; ++seed) {
    const Scene s = generate_scene(cfg, seed);
    save_scene(s, dir / "s.json");
    CHECK(load_scene(dir / "s.json") == s);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("malformed scene files produce structured errors") {
  SceneConfig cfg;
  const auto dir = temp_dir("reltopo_scene_bad");
  save_scene(generate_scene(cfg, 5), dir / "s.json");
  const std::string text = read_file(dir / "s.json");

  std::ofstream(dir / "trunc.json") << text.substr(0, text.size() / 2);
  CHECK_THROWS_AS(load_scene(dir / "trunc.json"), DataError);

  std::string v2 = text;
  v2.replace(v2.find("\"version\": 1"), 12, "\"version\": 2");
  std::ofstream(dir / "v2.json") << v2;
  try {
    load_scene(dir / "v2.json");
    FAIL("expected a version error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  std::string bad = text;
  bad.replace(bad.find("\"confidence\""), 12, "\"confidenze\"");
  std::ofstream(dir / "bad.json") << bad;
  try {
    load_scene(dir / "bad.json");
    FAIL("expected a field error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("lanes[0].confidence") != std::string::npos);
  }
  CHECK_THROWS_AS(load_scene(dir / "missing.json"), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("datasets write a manifest") {
  SceneConfig cfg;
  const auto dir = temp_dir("reltopo_dataset");
  CHECK(generate_dataset(cfg, 10, 0, dir / "empty").empty());
  CHECK(read_manifest(dir / "empty").empty());
  const auto entries = generate_dataset(cfg, 10, 4, dir / "four");
  REQUIRE(entries.size() == 4);
  CHECK(entries[2].seed == 12);
  const auto scenes = load_dataset(dir / "four");
  REQUIRE(scenes.size() == 4);
  CHECK(scenes[3] == generate_scene(cfg, 13));
  std::filesystem::remove_all(dir);
}

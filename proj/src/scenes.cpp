#include "reltopo/scenes.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "reltopo/error.hpp"
#include "reltopo/parallel.hpp"

namespace reltopo::scenes {

using geom::Vec3;
using json = nlohmann::json;

namespace {

// Lateral profile shared by every corridor: y = offset + kappa (x - xm)^2, z linear.
struct Profile {
  double kappa = 0.0, xm = 32.0;
  double z0 = 0.0, slope = 0.0;

  Vec3<double> at(double x, double offset) const {
    const double dx = x - xm;
    return {x, offset + kappa * dx * dx, z0 + slope * x};
  }
  Vec3<double> tangent(double x) const { return {1.0, 2.0 * kappa * (x - xm), slope}; }
};

// Cubic Bezier between two points on (possibly different) corridors,
// following the profile tangent at both ends. Exact for a single corridor.
geom::BezierLane span(const Profile& p, double x0, double off0, double x1, double off1) {
  const double h = (x1 - x0) / 3.0;
  geom::BezierLane lane;
  const Vec3<double> a = p.at(x0, off0), b = p.at(x1, off1);
  lane.control_points.row(0) = a.transpose();
  lane.control_points.row(1) = (a + h * p.tangent(x0)).transpose();
  lane.control_points.row(2) = (b - h * p.tangent(x1)).transpose();
  lane.control_points.row(3) = b.transpose();
  lane.confidence = 1.0;
  return lane;
}

geom::BezierLane reversed(const geom::BezierLane& l) {
  geom::BezierLane r = l;
  for (int i = 0; i < 4; ++i) r.control_points.row(i) = l.control_points.row(3 - i);
  return r;
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

geom::CameraModel make_camera(const SceneConfig& cfg, double yaw) {
  geom::CameraModel cam;
  cam.intrinsics << cfg.focal, 0, cfg.image_width / 2.0, 0, cfg.focal, cfg.image_height / 2.0, 0, 0, 1;
  geom::Mat3<double> axes;  // world (forward x, left y, up z) -> camera (right, down, forward)
  axes << 0, -1, 0, 0, 0, -1, 1, 0, 0;
  geom::Mat3<double> yaw_rot;
  yaw_rot << std::cos(yaw), std::sin(yaw), 0, -std::sin(yaw), std::cos(yaw), 0, 0, 0, 1;
  cam.rotation = axes * yaw_rot;
  cam.translation = -cam.rotation * Vec3<double>(0.0, 0.0, cfg.camera_height);
  cam.width = cfg.image_width;
  cam.height = cfg.image_height;
  return cam;
}

// Pixel bounding box of a camera-facing world rectangle; false if any corner is not visible.
bool project_box(const geom::CameraModel& cam, const Vec3<double>& anchor, double w, double h, TrafficElement& te) {
  geom::Points<double> corners(4, 3);
  corners << anchor.x(), anchor.y() - w / 2, anchor.z() - h / 2, anchor.x(), anchor.y() + w / 2,
      anchor.z() - h / 2, anchor.x(), anchor.y() - w / 2, anchor.z() + h / 2, anchor.x(), anchor.y() + w / 2,
      anchor.z() + h / 2;
  const auto proj = geom::project_to_image(cam, corners);
  if (std::find(proj.valid.begin(), proj.valid.end(), false) != proj.valid.end()) return false;
  const double u0 = proj.pixels.col(0).minCoeff(), u1 = proj.pixels.col(0).maxCoeff();
  const double v0 = proj.pixels.col(1).minCoeff(), v1 = proj.pixels.col(1).maxCoeff();
  te.cx = (u0 + u1) / 2;
  te.cy = (v0 + v1) / 2;
  te.w = u1 - u0;
  te.h = v1 - v0;
  te.anchor = anchor;
  return true;
}

}  // namespace

void SceneConfig::validate() const {
  auto range = [](const char* name, double lo, double hi) {
    if (!(lo <= hi)) throw ConfigError(std::string("scene config: empty range for ") + name);
  };
  range("corridors", corridors_min, corridors_max);
  range("segments", segments_min, segments_max);
  range("traffic elements", te_min, te_max);
  if (corridors_min < 1 || segments_min < 1 || te_min < 0) throw ConfigError("scene config: counts must be positive");
  if (!(noise >= 0.0)) throw ConfigError("scene config: noise must be >= 0");
  if (!(intersection_probability >= 0.0 && intersection_probability <= 1.0) ||
      !(oncoming_probability >= 0.0 && oncoming_probability <= 1.0)) {
    throw ConfigError("scene config: probabilities must lie in [0, 1]");
  }
  if (!(curvature_max >= 0.0) || !(z_jitter >= 0.0) || !(lane_spacing > 0.0)) {
    throw ConfigError("scene config: curvature, z jitter and spacing must be non-negative");
  }
  if (bev_rows < 2 || bev_cols < 2 || fv_rows < 2 || fv_cols < 2) throw ConfigError("scene config: grids need >= 2 cells");
  if (!(bev_extent.x_max > bev_extent.x_min) || !(bev_extent.y_max > bev_extent.y_min)) {
    throw ConfigError("scene config: degenerate BEV extent");
  }
  if (image_width <= 0 || image_height <= 0 || !(focal > 0.0)) throw ConfigError("scene config: bad camera");
  const double length = bev_extent.x_max - bev_extent.x_min - 4.0;
  if (length < 4.0 * segments_max) throw ConfigError("scene config: too many segments for the BEV extent");
  const double bend = curvature_max * length * length / 4.0;
  const double width = (corridors_max - 1) * lane_spacing + 2.0 * bend + 2.0;
  if (width > bev_extent.y_max - bev_extent.y_min) {
    throw ConfigError("scene config: corridors do not fit laterally in the BEV extent");
  }
}

void Scene::validate() const {
  const std::size_t n = lanes.size(), m = traffic_elements.size();
  for (const auto& l : lanes) l.validate();
  if (adj_l2l.size() != n) throw DataError("scene " + scene_id + ": adj_l2l has wrong row count");
  for (std::size_t i = 0; i < n; ++i) {
    if (adj_l2l[i].size() != n) throw DataError("scene " + scene_id + ": adj_l2l is not square");
    if (adj_l2l[i][i]) throw DataError("scene " + scene_id + ": adj_l2l has a self loop");
    for (std::size_t j = 0; j < n; ++j) {
      if (adj_l2l[i][j] > 1) throw DataError("scene " + scene_id + ": adj_l2l entries must be 0 or 1");
      if (adj_l2l[i][j] && (lanes[i].end() - lanes[j].start()).norm() >= 0.2) {
        throw DataError("scene " + scene_id + ": connected lanes " + std::to_string(i) + "->" + std::to_string(j) +
                        " do not share endpoints");
      }
    }
  }
  if (adj_l2t.size() != n) throw DataError("scene " + scene_id + ": adj_l2t has wrong row count");
  for (const auto& row : adj_l2t) {
    if (row.size() != m) throw DataError("scene " + scene_id + ": adj_l2t has wrong column count");
    for (auto v : row)
      if (v > 1) throw DataError("scene " + scene_id + ": adj_l2t entries must be 0 or 1");
  }
  for (const auto& te : traffic_elements) {
    if (!(te.w > 0.0 && te.h > 0.0)) throw DataError("scene " + scene_id + ": traffic element with empty box");
  }
  try {
    camera.validate();
  } catch (const ConfigError& e) {
    throw DataError("scene " + scene_id + ": " + e.what());
  }
}

bool Scene::operator==(const Scene& o) const {
  if (scene_id != o.scene_id || seed != o.seed || lanes.size() != o.lanes.size() ||
      traffic_elements.size() != o.traffic_elements.size() || adj_l2l != o.adj_l2l || adj_l2t != o.adj_l2t) {
    return false;
  }
  for (std::size_t i = 0; i < lanes.size(); ++i) {
    if (lanes[i].control_points != o.lanes[i].control_points || lanes[i].confidence != o.lanes[i].confidence ||
        lanes[i].class_id != o.lanes[i].class_id) {
      return false;
    }
  }
  for (std::size_t i = 0; i < traffic_elements.size(); ++i) {
    const auto &a = traffic_elements[i], &b = o.traffic_elements[i];
    if (a.cx != b.cx || a.cy != b.cy || a.w != b.w || a.h != b.h || a.class_id != b.class_id || a.anchor != b.anchor) {
      return false;
    }
  }
  return camera.intrinsics == o.camera.intrinsics && camera.rotation == o.camera.rotation &&
         camera.translation == o.camera.translation && camera.width == o.camera.width &&
         camera.height == o.camera.height && bev_extent.x_min == o.bev_extent.x_min &&
         bev_extent.x_max == o.bev_extent.x_max && bev_extent.y_min == o.bev_extent.y_min &&
         bev_extent.y_max == o.bev_extent.y_max;
}

Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Scene s;
  char id[32];
  std::snprintf(id, sizeof id, "scene_%llu", static_cast<unsigned long long>(seed));
  s.scene_id = id;
  s.seed = seed;
  s.bev_extent = cfg.bev_extent;

  const auto& ex = cfg.bev_extent;
  const double x0 = ex.x_min + 2.0, x1 = ex.x_max - 2.0;
  Profile prof;
  prof.xm = (x0 + x1) / 2;
  prof.kappa = uniform(rng, -cfg.curvature_max, cfg.curvature_max);
  prof.z0 = uniform(rng, -cfg.z_jitter, cfg.z_jitter) / 2;
  prof.slope = uniform(rng, -1.0, 1.0) * cfg.z_jitter / (2.0 * (x1 - ex.x_min + 1.0));

  const int corridors = uniform_int(rng, cfg.corridors_min, cfg.corridors_max);
  const int segments = uniform_int(rng, cfg.segments_min, cfg.segments_max);

  // Shared breakpoints with jitter.
  std::vector<double> breaks(static_cast<std::size_t>(segments) + 1);
  const double seg_len = (x1 - x0) / segments;
  for (int b = 0; b <= segments; ++b) {
    const double jitter = (b == 0 || b == segments) ? 0.0 : uniform(rng, -0.25, 0.25) * seg_len;
    breaks[static_cast<std::size_t>(b)] = x0 + b * seg_len + jitter;
  }

  // Lateral offsets: a contiguous block placed randomly inside the extent.
  const double bend = std::fabs(prof.kappa) * (x1 - prof.xm) * (x1 - prof.xm);
  const double block = (corridors - 1) * cfg.lane_spacing;
  const double lo = ex.y_min + 1.0 + (prof.kappa < 0 ? bend : 0.0);
  const double hi = ex.y_max - 1.0 - block - (prof.kappa > 0 ? bend : 0.0);
  const double base = hi > lo ? uniform(rng, lo, hi) : (lo + hi) / 2;
  std::vector<double> offset(static_cast<std::size_t>(corridors));
  std::vector<bool> oncoming(static_cast<std::size_t>(corridors), false);
  for (int c = 0; c < corridors; ++c) {
    offset[static_cast<std::size_t>(c)] = base + c * cfg.lane_spacing;
    // Oncoming traffic only on the left-most corridors so same-direction lanes stay adjacent.
  }
  for (int c = corridors - 1; c >= 1; --c) {
    if (std::bernoulli_distribution(cfg.oncoming_probability)(rng)) {
      oncoming[static_cast<std::size_t>(c)] = true;
    } else {
      break;
    }
  }

  // Graph nodes are (corridor, breakpoint); lanes connect when end node == start node.
  struct Node {
    int corridor, brk;
    bool operator==(const Node&) const = default;
  };
  std::vector<Node> start_node, end_node;
  auto add_lane = [&](const geom::BezierLane& forward, Node a, Node b, bool against) {
    s.lanes.push_back(against ? reversed(forward) : forward);
    start_node.push_back(against ? b : a);
    end_node.push_back(against ? a : b);
  };
  for (int c = 0; c < corridors; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    for (int g = 0; g < segments; ++g) {
      const auto gu = static_cast<std::size_t>(g);
      add_lane(span(prof, breaks[gu], offset[cu], breaks[gu + 1], offset[cu]), {c, g}, {c, g + 1}, oncoming[cu]);
    }
  }
  // Lane-change connectors between adjacent same-direction corridors.
  for (int c = 0; c + 1 < corridors; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    if (oncoming[cu] != oncoming[cu + 1]) continue;
    for (int g = 0; g < segments; ++g) {
      const auto gu = static_cast<std::size_t>(g);
      if (!std::bernoulli_distribution(cfg.intersection_probability)(rng)) continue;
      const bool up = std::bernoulli_distribution(0.5)(rng);
      const int from = up ? c : c + 1, to = up ? c + 1 : c;
      const auto fu = static_cast<std::size_t>(from), tu = static_cast<std::size_t>(to);
      if (!oncoming[cu]) {
        add_lane(span(prof, breaks[gu], offset[fu], breaks[gu + 1], offset[tu]), {from, g}, {to, g + 1}, false);
      } else {
        // Travelling towards -x: start on `from` at the far break.
        add_lane(span(prof, breaks[gu], offset[tu], breaks[gu + 1], offset[fu]), {to, g}, {from, g + 1}, true);
      }
    }
  }

  const std::size_t n = s.lanes.size();
  s.adj_l2l.assign(n, std::vector<std::uint8_t>(n, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && end_node[i] == start_node[j]) s.adj_l2l[i][j] = 1;

  s.camera = make_camera(cfg, uniform(rng, -cfg.yaw_jitter, cfg.yaw_jitter));

  // Traffic elements at one stop line govern the forward lanes that end there.
  std::vector<int> forward;
  for (int c = 0; c < corridors; ++c)
    if (!oncoming[static_cast<std::size_t>(c)]) forward.push_back(c);
  const int stop = segments >= 2 ? uniform_int(rng, 1, segments - 1) : 1;
  const int te_count = forward.empty() ? 0 : uniform_int(rng, cfg.te_min, cfg.te_max);
  std::shuffle(forward.begin(), forward.end(), rng);
  std::vector<int> governed_corridor;
  for (int t = 0; t < te_count; ++t) {
    const int corridor = forward[static_cast<std::size_t>(t) % forward.size()];
    TrafficElement te;
    te.class_id = std::bernoulli_distribution(0.5)(rng) ? 1 : 0;
    const double y = prof.at(breaks[static_cast<std::size_t>(stop)], offset[static_cast<std::size_t>(corridor)]).y();
    const double side = te.class_id == 1 ? uniform(rng, 1.0, 2.0) : uniform(rng, -0.5, 0.5);
    const Vec3<double> anchor(breaks[static_cast<std::size_t>(stop)] + uniform(rng, 1.0, 3.0), y - side,
                              te.class_id == 1 ? uniform(rng, 2.5, 3.5) : uniform(rng, 4.5, 5.5));
    const double w = te.class_id == 1 ? 2.0 : 1.4, h = te.class_id == 1 ? 2.0 : 2.8;
    if (!project_box(s.camera, anchor, w, h, te)) continue;
    s.traffic_elements.push_back(te);
    governed_corridor.push_back(corridor);
  }
  const std::size_t m = s.traffic_elements.size();
  s.adj_l2t.assign(n, std::vector<std::uint8_t>(m, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < m; ++t)
      if (end_node[i].brk == stop && end_node[i].corridor == governed_corridor[t] &&
          !oncoming[static_cast<std::size_t>(end_node[i].corridor)]) {
        s.adj_l2t[i][t] = 1;
      }
  s.validate();
  return s;
}

Rasters rasterize(const Scene& scene, const SceneConfig& cfg) {
  const std::size_t H = cfg.bev_rows, W = cfg.bev_cols;
  const auto& ex = scene.bev_extent;
  const double ch = (ex.y_max - ex.y_min) / static_cast<double>(H);
  const double cw = (ex.x_max - ex.x_min) / static_cast<double>(W);
  std::vector<double> bev(H * W * kBevChannels, 0.0);
  constexpr double kStroke = 0.6, kNode = 1.0;
  auto splat = [&](double x, double y, double sigma, auto&& write) {
    const double r = (y - ex.y_min) / ch - 0.5, c = (x - ex.x_min) / cw - 0.5;
    const int rr = static_cast<int>(std::ceil(3.0 * sigma / ch)), rc = static_cast<int>(std::ceil(3.0 * sigma / cw));
    for (int i = static_cast<int>(std::floor(r)) - rr; i <= static_cast<int>(std::ceil(r)) + rr; ++i) {
      if (i < 0 || i >= static_cast<int>(H)) continue;
      for (int j = static_cast<int>(std::floor(c)) - rc; j <= static_cast<int>(std::ceil(c)) + rc; ++j) {
        if (j < 0 || j >= static_cast<int>(W)) continue;
        const double dy = (i - r) * ch, dx = (j - c) * cw;
        write(static_cast<std::size_t>(i) * W + static_cast<std::size_t>(j),
              std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)));
      }
    }
  };
  for (const auto& lane : scene.lanes) {
    const auto pts = geom::bezier_sample(lane, 200);
    for (int k = 0; k < pts.rows(); ++k) {
      const int a = std::max(k - 1, 0), b = std::min<int>(k + 1, static_cast<int>(pts.rows()) - 1);
      const double hx = pts(b, 0) - pts(a, 0), hy = pts(b, 1) - pts(a, 1);
      const double hn = std::hypot(hx, hy);
      splat(pts(k, 0), pts(k, 1), kStroke, [&](std::size_t cell, double w) {
        double* v = &bev[cell * kBevChannels];
        if (w > v[0]) {
          v[0] = w;
          v[1] = hn > 0 ? w * hy / hn : 0.0;
          v[2] = hn > 0 ? w * hx / hn : 0.0;
        }
      });
    }
    splat(lane.start().x(), lane.start().y(), kNode, [&](std::size_t cell, double w) {
      bev[cell * kBevChannels + 3] = std::max(bev[cell * kBevChannels + 3], w);
    });
    splat(lane.end().x(), lane.end().y(), kNode, [&](std::size_t cell, double w) {
      bev[cell * kBevChannels + 4] = std::max(bev[cell * kBevChannels + 4], w);
    });
  }

  const std::size_t FH = cfg.fv_rows, FW = cfg.fv_cols;
  const double fch = static_cast<double>(scene.camera.height) / static_cast<double>(FH);
  const double fcw = static_cast<double>(scene.camera.width) / static_cast<double>(FW);
  std::vector<double> fv(FH * FW * kFvChannels, 0.0);
  for (const auto& te : scene.traffic_elements) {
    const double u0 = te.cx - te.w / 2, u1 = te.cx + te.w / 2, v0 = te.cy - te.h / 2, v1 = te.cy + te.h / 2;
    for (std::size_t i = 0; i < FH; ++i) {
      const double oy = std::max(0.0, std::min(v1, (i + 1) * fch) - std::max(v0, i * fch));
      if (oy <= 0) continue;
      for (std::size_t j = 0; j < FW; ++j) {
        const double ox = std::max(0.0, std::min(u1, (j + 1) * fcw) - std::max(u0, j * fcw));
        double& v = fv[(i * FW + j) * kFvChannels + static_cast<std::size_t>(te.class_id)];
        v = std::max(v, ox * oy / (fch * fcw));
      }
    }
  }
  for (const auto& lane : scene.lanes) {
    const auto proj = geom::project_to_image(scene.camera, geom::bezier_sample(lane, 200));
    for (int k = 0; k < proj.pixels.rows(); ++k) {
      if (!proj.valid[static_cast<std::size_t>(k)]) continue;
      const double r = proj.pixels(k, 1) / fch - 0.5, c = proj.pixels(k, 0) / fcw - 0.5;
      for (int i = static_cast<int>(std::floor(r)) - 2; i <= static_cast<int>(std::ceil(r)) + 2; ++i) {
        if (i < 0 || i >= static_cast<int>(FH)) continue;
        for (int j = static_cast<int>(std::floor(c)) - 2; j <= static_cast<int>(std::ceil(c)) + 2; ++j) {
          if (j < 0 || j >= static_cast<int>(FW)) continue;
          const double d2 = (i - r) * (i - r) + (j - c) * (j - c);
          double& v = fv[(static_cast<std::size_t>(i) * FW + static_cast<std::size_t>(j)) * kFvChannels + 2];
          v = std::max(v, std::exp(-d2 / (2 * 0.6 * 0.6)));
        }
      }
    }
  }

  if (cfg.noise > 0.0) {
    std::mt19937_64 rng(scene.seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> nd(0.0, cfg.noise);
    for (double& v : bev) v += nd(rng);
    for (double& v : fv) v += nd(rng);
  }
  Rasters out;
  out.bev.values = Tensor({H, W, kBevChannels}, std::move(bev));
  out.bev.extent = ex;
  out.bev.frame = Frame::BEV;
  out.fv.values = Tensor({FH, FW, kFvChannels}, std::move(fv));
  out.fv.extent = {0.0, static_cast<double>(scene.camera.width), 0.0, static_cast<double>(scene.camera.height)};
  out.fv.frame = Frame::FV;
  return out;
}

// ---- serialisation ----------------------------------------------------------

namespace {

json vec3_json(const Vec3<double>& v) { return json::array({v.x(), v.y(), v.z()}); }

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
  const std::string path = where.empty() ? key : where + "." + key;
  if (!j.is_object() || !j.contains(key)) throw DataError("scene file: missing field '" + path + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw DataError("scene file: field '" + path + "' has the wrong type");
  }
}

double number(const json& j, const std::string& path) {
  if (!j.is_number()) throw DataError("scene file: field '" + path + "' must be a number");
  return j.get<double>();
}

Vec3<double> read_vec3(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 3) throw DataError("scene file: field '" + path + "' must be a 3-vector");
  return {number(j[0], path + "[0]"), number(j[1], path + "[1]"), number(j[2], path + "[2]")};
}

geom::Mat3<double> read_mat3(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 3) throw DataError("scene file: field '" + path + "' must be 3x3");
  geom::Mat3<double> m;
  for (int r = 0; r < 3; ++r) m.row(r) = read_vec3(j[static_cast<std::size_t>(r)], path + "[" + std::to_string(r) + "]").transpose();
  return m;
}

json mat3_json(const geom::Mat3<double>& m) {
  json out = json::array();
  for (int r = 0; r < 3; ++r) out.push_back(vec3_json(m.row(r).transpose()));
  return out;
}

Adjacency read_adjacency(const json& j, const std::string& path) {
  if (!j.is_array()) throw DataError("scene file: field '" + path + "' must be a matrix");
  Adjacency a;
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_array()) throw DataError("scene file: field '" + path + "[" + std::to_string(i) + "]' must be a row");
    std::vector<std::uint8_t> row;
    for (const auto& v : j[i]) {
      if (!v.is_number_integer() || (v.get<int>() != 0 && v.get<int>() != 1)) {
        throw DataError("scene file: field '" + path + "[" + std::to_string(i) + "]' must hold 0/1");
      }
      row.push_back(static_cast<std::uint8_t>(v.get<int>()));
    }
    a.push_back(std::move(row));
  }
  return a;
}

json scene_json(const Scene& s) {
  json j;
  j["version"] = kSceneFormatVersion;
  j["scene_id"] = s.scene_id;
  j["seed"] = s.seed;
  j["bev_extent"] = {{"x_min", s.bev_extent.x_min}, {"x_max", s.bev_extent.x_max},
                     {"y_min", s.bev_extent.y_min}, {"y_max", s.bev_extent.y_max}};
  json lanes = json::array();
  for (const auto& l : s.lanes) {
    json cp = json::array();
    for (int r = 0; r < 4; ++r) cp.push_back(vec3_json(l.control_points.row(r).transpose()));
    lanes.push_back({{"control_points", cp}, {"confidence", l.confidence}, {"class_id", l.class_id}});
  }
  j["lanes"] = lanes;
  json tes = json::array();
  for (const auto& t : s.traffic_elements) {
    tes.push_back({{"box", {t.cx, t.cy, t.w, t.h}}, {"class_id", t.class_id}, {"anchor", vec3_json(t.anchor)}});
  }
  j["traffic_elements"] = tes;
  j["adj_l2l"] = s.adj_l2l;
  j["adj_l2t"] = s.adj_l2t;
  j["camera"] = {{"intrinsics", mat3_json(s.camera.intrinsics)},
                 {"rotation", mat3_json(s.camera.rotation)},
                 {"translation", vec3_json(s.camera.translation)},
                 {"width", s.camera.width},
                 {"height", s.camera.height}};
  return j;
}

Scene scene_from_json(const json& j) {
  if (!j.is_object()) throw DataError("scene file: top level must be an object");
  const int version = field<int>(j, "version", "");
  if (version != kSceneFormatVersion) {
    throw DataError("scene file: unsupported version " + std::to_string(version) + " (expected " +
                    std::to_string(kSceneFormatVersion) + ")");
  }
  Scene s;
  s.scene_id = field<std::string>(j, "scene_id", "");
  s.seed = field<std::uint64_t>(j, "seed", "");
  const json& ex = field<json>(j, "bev_extent", "");
  s.bev_extent = {field<double>(ex, "x_min", "bev_extent"), field<double>(ex, "x_max", "bev_extent"),
                  field<double>(ex, "y_min", "bev_extent"), field<double>(ex, "y_max", "bev_extent")};
  const json lanes = field<json>(j, "lanes", "");
  if (!lanes.is_array()) throw DataError("scene file: field 'lanes' must be an array");
  for (std::size_t i = 0; i < lanes.size(); ++i) {
    const std::string where = "lanes[" + std::to_string(i) + "]";
    const json cp = field<json>(lanes[i], "control_points", where);
    if (!cp.is_array() || cp.size() != 4) throw DataError("scene file: field '" + where + ".control_points' needs 4 points");
    geom::BezierLane l;
    for (int r = 0; r < 4; ++r) {
      l.control_points.row(r) =
          read_vec3(cp[static_cast<std::size_t>(r)], where + ".control_points[" + std::to_string(r) + "]").transpose();
    }
    l.confidence = field<double>(lanes[i], "confidence", where);
    l.class_id = field<int>(lanes[i], "class_id", where);
    s.lanes.push_back(l);
  }
  const json tes = field<json>(j, "traffic_elements", "");
  if (!tes.is_array()) throw DataError("scene file: field 'traffic_elements' must be an array");
  for (std::size_t i = 0; i < tes.size(); ++i) {
    const std::string where = "traffic_elements[" + std::to_string(i) + "]";
    const json box = field<json>(tes[i], "box", where);
    if (!box.is_array() || box.size() != 4) throw DataError("scene file: field '" + where + ".box' needs 4 numbers");
    TrafficElement t;
    t.cx = number(box[0], where + ".box[0]");
    t.cy = number(box[1], where + ".box[1]");
    t.w = number(box[2], where + ".box[2]");
    t.h = number(box[3], where + ".box[3]");
    t.class_id = field<int>(tes[i], "class_id", where);
    t.anchor = read_vec3(field<json>(tes[i], "anchor", where), where + ".anchor");
    s.traffic_elements.push_back(t);
  }
  s.adj_l2l = read_adjacency(field<json>(j, "adj_l2l", ""), "adj_l2l");
  s.adj_l2t = read_adjacency(field<json>(j, "adj_l2t", ""), "adj_l2t");
  const json cam = field<json>(j, "camera", "");
  s.camera.intrinsics = read_mat3(field<json>(cam, "intrinsics", "camera"), "camera.intrinsics");
  s.camera.rotation = read_mat3(field<json>(cam, "rotation", "camera"), "camera.rotation");
  s.camera.translation = read_vec3(field<json>(cam, "translation", "camera"), "camera.translation");
  s.camera.width = field<int>(cam, "width", "camera");
  s.camera.height = field<int>(cam, "height", "camera");
  s.validate();
  return s;
}

}  // namespace

void save_scene(const Scene& scene, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write scene file " + path.string());
  out << scene_json(scene).dump(1) << '\n';
  if (!out) throw DataError("failed writing scene file " + path.string());
}

Scene load_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read scene file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("scene file " + path.string() + ": parse error at byte " + std::to_string(e.byte));
  }
  return scene_from_json(j);
}

std::vector<ManifestEntry> generate_dataset(const SceneConfig& cfg, std::uint64_t base_seed, std::size_t count,
                                            const std::filesystem::path& dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create dataset directory " + dir.string());
  std::vector<ManifestEntry> entries(count);
  parallel_for(count, [&](std::size_t i) {
    const std::uint64_t seed = base_seed + i;
    const Scene s = generate_scene(cfg, seed);
    char name[32];
    std::snprintf(name, sizeof name, "scene_%05zu.json", i);
    save_scene(s, dir / name);
    entries[i] = {s.scene_id, seed, name};
  });
  json m;
  m["version"] = kSceneFormatVersion;
  m["base_seed"] = base_seed;
  m["count"] = count;
  m["scenes"] = json::array();
  for (const auto& e : entries) m["scenes"].push_back({{"scene_id", e.scene_id}, {"seed", e.seed}, {"file", e.file}});
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  out << m.dump(1) << '\n';
  return entries;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("no manifest.json in " + dir.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("manifest: parse error at byte " + std::to_string(e.byte));
  }
  if (field<int>(m, "version", "") != kSceneFormatVersion) throw DataError("manifest: unsupported version");
  const json scenes = field<json>(m, "scenes", "");
  std::vector<ManifestEntry> out;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const std::string where = "scenes[" + std::to_string(i) + "]";
    out.push_back({field<std::string>(scenes[i], "scene_id", where), field<std::uint64_t>(scenes[i], "seed", where),
                   field<std::string>(scenes[i], "file", where)});
  }
  return out;
}

std::vector<Scene> load_dataset(const std::filesystem::path& dir) {
  const auto entries = read_manifest(dir);
  std::vector<Scene> out(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) { out[i] = load_scene(dir / entries[i].file); });
  return out;
}

}  // namespace reltopo::scenes

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "reltopo/feature_grid.hpp"
#include "reltopo/geometry.hpp"

namespace reltopo::scenes {

inline constexpr int kSceneFormatVersion = 1;

struct TrafficElement {
  double cx = 0.0, cy = 0.0, w = 1.0, h = 1.0;  // FV pixels
  int class_id = 0;                             // 0 light, 1 sign
  geom::Vec3<double> anchor = geom::Vec3<double>::Zero();  // world position
};

using Adjacency = std::vector<std::vector<std::uint8_t>>;

struct Scene {
  std::string scene_id;
  std::uint64_t seed = 0;
  std::vector<geom::BezierLane> lanes;
  std::vector<TrafficElement> traffic_elements;
  Adjacency adj_l2l;  // i -> j: lane j continues from the end of lane i
  Adjacency adj_l2t;  // lane x traffic element
  geom::CameraModel camera;
  Extent bev_extent;

  /// Throws DataError naming the violated invariant.
  void validate() const;
  bool operator==(const Scene& other) const;
};

struct SceneConfig {
  int corridors_min = 2, corridors_max = 3;
  int segments_min = 2, segments_max = 3;
  double intersection_probability = 0.5;
  double oncoming_probability = 0.3;
  double curvature_max = 0.004;  // lateral offset coefficient per m^2
  int te_min = 1, te_max = 3;
  double noise = 0.05;
  double z_jitter = 0.3;
  double lane_spacing = 3.6;
  std::size_t bev_rows = 32, bev_cols = 64;
  std::size_t fv_rows = 24, fv_cols = 48;
  Extent bev_extent{0.0, 64.0, -16.0, 16.0};
  int image_width = 480, image_height = 240;
  double focal = 240.0;
  double camera_height = 1.6;
  double yaw_jitter = 0.02;

  void validate() const;
};

inline constexpr std::size_t kBevChannels = 5;  // occupancy, sin, cos, start, end
inline constexpr std::size_t kFvChannels = 3;   // light box, sign box, lane stroke

Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed);

struct Rasters {
  FeatureGrid bev;
  FeatureGrid fv;
};

Rasters rasterize(const Scene& scene, const SceneConfig& cfg);

void save_scene(const Scene& scene, const std::filesystem::path& path);
Scene load_scene(const std::filesystem::path& path);

struct ManifestEntry {
  std::string scene_id;
  std::uint64_t seed = 0;
  std::string file;
};

/// Writes `count` scenes and manifest.json; scene i uses seed base_seed + i.
std::vector<ManifestEntry> generate_dataset(const SceneConfig& cfg, std::uint64_t base_seed, std::size_t count,
                                            const std::filesystem::path& dir);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);
std::vector<Scene> load_dataset(const std::filesystem::path& dir);

}  // namespace reltopo::scenes

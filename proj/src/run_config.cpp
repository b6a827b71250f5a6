#include "reltopo/run_config.hpp"

#include <fstream>
#include <set>

#include "reltopo/error.hpp"

namespace reltopo {

namespace {

using json = nlohmann::json;

// Reads known keys out of one object and rejects anything left over.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: '" + path_ + "." + key + "' has the wrong type");
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json& at(const char* key) const { return j_.at(key); }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + (path_.empty() ? k : path_ + "." + k) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json extent_json(const Extent& e) { return json::array({e.x_min, e.x_max, e.y_min, e.y_max}); }

Extent extent_from(const json& j) {
  if (!j.is_array() || j.size() != 4) throw ConfigError("config: 'scene.bev_extent' must be [x_min, x_max, y_min, y_max]");
  try {
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  } catch (const json::exception&) {
    throw ConfigError("config: 'scene.bev_extent' must hold numbers");
  }
}

}  // namespace

ModelConfig RunConfig::resolved_model() const {
  ModelConfig m = model;
  m.bev_extent = scene.bev_extent;
  m.image_width = scene.image_width;
  m.image_height = scene.image_height;
  m.topology.channels = m.lane.channels;
  return m;
}

train::LossOptions RunConfig::resolved_loss() const {
  train::LossOptions o = loss;
  o.contrastive = !model.flags.no_contrastive;
  return o;
}

train::TrainConfig RunConfig::resolved_train() const {
  train::TrainConfig t = train;
  t.seed = seed;
  return t;
}

void RunConfig::validate() const {
  scene.validate();
  const ModelConfig m = resolved_model();
  m.lane.validate();
  weights.validate();
  if (m.te.queries == 0 || m.topology.hidden == 0) throw ConfigError("config: model sizes must be positive");
  if (train.batch_size == 0) throw ConfigError("config: train.batch_size must be positive");
  if (!(train.optim.base_lr > 0.0) || train.optim.min_lr < 0.0 || train.optim.min_lr > train.optim.base_lr) {
    throw ConfigError("config: need 0 <= train.min_lr <= train.lr and train.lr > 0");
  }
  if (train.grad_clip < 0.0) throw ConfigError("config: train.grad_clip must be >= 0");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw ConfigError("config: holdout_fraction must be in [0, 1)");
  if (loss.n_neg == 0) throw ConfigError("config: loss.n_neg must be positive");
  if (ablation_seeds == 0) throw ConfigError("config: ablation.seeds must be positive");
  for (const auto& v : ablation_variants) ablation_variant(v);
}

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  Section top(j, "");
  top.get("seed", c.seed);
  top.get("eval_every", c.eval_every);
  top.get("dataset_count", c.dataset_count);
  top.get("holdout_fraction", c.holdout_fraction);

  if (top.has("scene")) {
    auto& s = c.scene;
    Section r(top.at("scene"), "scene");
    r.get("corridors_min", s.corridors_min);
    r.get("corridors_max", s.corridors_max);
    r.get("segments_min", s.segments_min);
    r.get("segments_max", s.segments_max);
    r.get("intersection_probability", s.intersection_probability);
    r.get("oncoming_probability", s.oncoming_probability);
    r.get("curvature_max", s.curvature_max);
    r.get("te_min", s.te_min);
    r.get("te_max", s.te_max);
    r.get("noise", s.noise);
    r.get("z_jitter", s.z_jitter);
    r.get("lane_spacing", s.lane_spacing);
    r.get("bev_rows", s.bev_rows);
    r.get("bev_cols", s.bev_cols);
    r.get("fv_rows", s.fv_rows);
    r.get("fv_cols", s.fv_cols);
    if (r.has("bev_extent")) s.bev_extent = extent_from(r.at("bev_extent"));
    r.get("image_width", s.image_width);
    r.get("image_height", s.image_height);
    r.get("focal", s.focal);
    r.get("camera_height", s.camera_height);
    r.get("yaw_jitter", s.yaw_jitter);
    r.finish();
  }
  if (top.has("model")) {
    auto& m = c.model;
    Section r(top.at("model"), "model");
    r.get("layers", m.lane.layers);
    r.get("lane_queries", m.lane.queries);
    r.get("channels", m.lane.channels);
    r.get("heads", m.lane.heads);
    r.get("offsets", m.lane.offsets);
    r.get("samples", m.lane.samples);
    r.get("ffn_hidden", m.lane.ffn_hidden);
    r.get("ge_hidden", m.lane.ge_hidden);
    r.get("normalized_coordinates", m.lane.normalized_coordinates);
    r.get("geometry_encoding_dim", m.lane.geometry_encoding.output_dim);
    r.get("geometry_encoding_temperature", m.lane.geometry_encoding.temperature);
    r.get("geometry_encoding_scale", m.lane.geometry_encoding.input_scale);
    r.get("te_queries", m.te.queries);
    r.get("topology_hidden", m.topology.hidden);
    r.get("topology_samples", m.topology.samples);
    r.get("endpoint_encoding_dim", m.topology.endpoint_encoding.output_dim);
    r.get("distance_encoding_dim", m.topology.distance_encoding.output_dim);
    r.get("distance_encoding_scale", m.topology.distance_encoding.input_scale);
    r.get("l2t_max_pool", m.topology.l2t_max_pool);
    r.get("detach_topology_geometry", m.detach_topology_geometry);
    r.get("detach_topology_queries", m.detach_topology_queries);
    r.get("per_point_normalization", m.flags.per_point_normalization);
    r.finish();
  }
  if (top.has("loss")) {
    auto& w = c.weights;
    Section r(top.at("loss"), "loss");
    r.get("lambda_te_cls", w.te_cls);
    r.get("lambda_te_l1", w.te_l1);
    r.get("lambda_te_giou", w.te_giou);
    r.get("lambda_lane_cls", w.lane_cls);
    r.get("lambda_lane_l1", w.lane_l1);
    r.get("lambda_lane_chamfer", w.lane_chamfer);
    r.get("lambda_topo_cls", w.topo_cls);
    r.get("lambda_contrastive", w.contrastive);
    r.get("focal_alpha", c.loss.focal_alpha);
    r.get("focal_gamma", c.loss.focal_gamma);
    r.get("chamfer_samples", c.loss.samples);
    r.get("n_neg", c.loss.n_neg);
    r.get("topology_every_layer", c.loss.topology_every_layer);
    r.finish();
  }
  if (top.has("train")) {
    auto& t = c.train;
    Section r(top.at("train"), "train");
    r.get("steps", t.steps);
    r.get("batch_size", t.batch_size);
    r.get("lr", t.optim.base_lr);
    r.get("min_lr", t.optim.min_lr);
    r.get("weight_decay", t.optim.weight_decay);
    r.get("beta1", t.optim.beta1);
    r.get("beta2", t.optim.beta2);
    r.get("eps", t.optim.eps);
    r.get("grad_clip", t.grad_clip);
    r.finish();
  }
  if (top.has("ablation")) {
    auto& f = c.model.flags;
    Section r(top.at("ablation"), "ablation");
    r.get("plain_sa", f.plain_sa);
    r.get("no_curve_ca", f.no_curve_ca);
    r.get("baseline_l2l", f.baseline_l2l);
    r.get("baseline_l2t", f.baseline_l2t);
    r.get("no_contrastive", f.no_contrastive);
    r.get("variants", c.ablation_variants);
    r.get("seeds", c.ablation_seeds);
    r.finish();
  }
  top.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON (" + e.what() + ")");
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& c) {
  const auto& s = c.scene;
  const auto& m = c.model;
  const auto& w = c.weights;
  const auto& t = c.train;
  json j;
  j["seed"] = c.seed;
  j["eval_every"] = c.eval_every;
  j["dataset_count"] = c.dataset_count;
  j["holdout_fraction"] = c.holdout_fraction;
  j["scene"] = {{"corridors_min", s.corridors_min},
                {"corridors_max", s.corridors_max},
                {"segments_min", s.segments_min},
                {"segments_max", s.segments_max},
                {"intersection_probability", s.intersection_probability},
                {"oncoming_probability", s.oncoming_probability},
                {"curvature_max", s.curvature_max},
                {"te_min", s.te_min},
                {"te_max", s.te_max},
                {"noise", s.noise},
                {"z_jitter", s.z_jitter},
                {"lane_spacing", s.lane_spacing},
                {"bev_rows", s.bev_rows},
                {"bev_cols", s.bev_cols},
                {"fv_rows", s.fv_rows},
                {"fv_cols", s.fv_cols},
                {"bev_extent", extent_json(s.bev_extent)},
                {"image_width", s.image_width},
                {"image_height", s.image_height},
                {"focal", s.focal},
                {"camera_height", s.camera_height},
                {"yaw_jitter", s.yaw_jitter}};
  j["model"] = {{"layers", m.lane.layers},
                {"lane_queries", m.lane.queries},
                {"channels", m.lane.channels},
                {"heads", m.lane.heads},
                {"offsets", m.lane.offsets},
                {"samples", m.lane.samples},
                {"ffn_hidden", m.lane.ffn_hidden},
                {"ge_hidden", m.lane.ge_hidden},
                {"normalized_coordinates", m.lane.normalized_coordinates},
                {"geometry_encoding_dim", m.lane.geometry_encoding.output_dim},
                {"geometry_encoding_temperature", m.lane.geometry_encoding.temperature},
                {"geometry_encoding_scale", m.lane.geometry_encoding.input_scale},
                {"te_queries", m.te.queries},
                {"topology_hidden", m.topology.hidden},
                {"topology_samples", m.topology.samples},
                {"endpoint_encoding_dim", m.topology.endpoint_encoding.output_dim},
                {"distance_encoding_dim", m.topology.distance_encoding.output_dim},
                {"distance_encoding_scale", m.topology.distance_encoding.input_scale},
                {"l2t_max_pool", m.topology.l2t_max_pool},
                {"detach_topology_geometry", m.detach_topology_geometry},
                {"detach_topology_queries", m.detach_topology_queries},
                {"per_point_normalization", m.flags.per_point_normalization}};
  j["loss"] = {{"lambda_te_cls", w.te_cls},
               {"lambda_te_l1", w.te_l1},
               {"lambda_te_giou", w.te_giou},
               {"lambda_lane_cls", w.lane_cls},
               {"lambda_lane_l1", w.lane_l1},
               {"lambda_lane_chamfer", w.lane_chamfer},
               {"lambda_topo_cls", w.topo_cls},
               {"lambda_contrastive", w.contrastive},
               {"focal_alpha", c.loss.focal_alpha},
               {"focal_gamma", c.loss.focal_gamma},
               {"chamfer_samples", c.loss.samples},
               {"n_neg", c.loss.n_neg},
               {"topology_every_layer", c.loss.topology_every_layer}};
  j["train"] = {{"steps", t.steps},
                {"batch_size", t.batch_size},
                {"lr", t.optim.base_lr},
                {"min_lr", t.optim.min_lr},
                {"weight_decay", t.optim.weight_decay},
                {"beta1", t.optim.beta1},
                {"beta2", t.optim.beta2},
                {"eps", t.optim.eps},
                {"grad_clip", t.grad_clip}};
  j["ablation"] = {{"plain_sa", m.flags.plain_sa},
                   {"no_curve_ca", m.flags.no_curve_ca},
                   {"baseline_l2l", m.flags.baseline_l2l},
                   {"baseline_l2t", m.flags.baseline_l2t},
                   {"no_contrastive", m.flags.no_contrastive},
                   {"variants", c.ablation_variants},
                   {"seeds", c.ablation_seeds}};
  return j;
}

void write_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json(cfg).dump(2) << "\n";
  if (!out) throw DataError("failed writing " + path.string());
}

const std::vector<std::string>& ablation_variant_names() {
  static const std::vector<std::string> names{"baseline", "sa", "sa_ca", "sa_ca_heads", "full"};
  return names;
}

AblationFlags ablation_variant(const std::string& name) {
  AblationFlags f;
  f.plain_sa = true;
  f.no_curve_ca = true;
  f.baseline_l2l = true;
  f.baseline_l2t = true;
  f.no_contrastive = true;
  if (name == "baseline") return f;
  f.plain_sa = false;
  if (name == "sa") return f;
  f.no_curve_ca = false;
  if (name == "sa_ca") return f;
  f.baseline_l2l = false;
  f.baseline_l2t = false;
  if (name == "sa_ca_heads") return f;
  f.no_contrastive = false;
  if (name == "full") return f;
  throw ConfigError("unknown ablation variant '" + name + "'");
}

}  // namespace reltopo

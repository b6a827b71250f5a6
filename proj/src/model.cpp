#include "reltopo/model.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <random>

namespace reltopo {

namespace {

DecoderLayer make_layer(ParameterSet& ps, const std::string& name, const LaneDecoderConfig& cfg,
                        std::size_t points, std::size_t reg_out, std::size_t cls_out, bool geometry,
                        std::mt19937_64& rng) {
  const std::size_t c = cfg.channels;
  DecoderLayer l;
  l.sa = attn::MultiHeadAttention::create(ps, name + ".sa", c, cfg.heads, rng);
  if (geometry) {
    l.bias = attn::GeometryBiasParams::create(ps, name + ".geometry", cfg.geometry_encoding, cfg.ge_hidden,
                                              cfg.heads, rng);
  }
  l.ca = attn::DeformableAttentionParams::create(ps, name + ".ca", c, cfg.heads, points, cfg.offsets, rng);
  l.norm1 = nn::LayerNorm::create(ps, name + ".norm1", c);
  l.norm2 = nn::LayerNorm::create(ps, name + ".norm2", c);
  l.norm3 = nn::LayerNorm::create(ps, name + ".norm3", c);
  l.ffn = nn::Mlp::create(ps, name + ".ffn", c, cfg.ffn_hidden, c, rng);
  l.reg = nn::Linear::create(ps, name + ".reg", c, reg_out, rng);
  l.cls = nn::Linear::create(ps, name + ".cls", c, cls_out, rng);
  return l;
}

void require_grid(const char* op, const FeatureGrid& g, Frame frame, std::size_t channels) {
  g.validate();
  if (g.frame != frame) throw ConfigError(std::string(op) + ": wrong grid frame");
  if (g.channels() != channels) {
    throw ConfigError(std::string(op) + ": grid has " + std::to_string(g.channels()) + " channels, model expects " +
                      std::to_string(channels));
  }
}

Tensor curve_lo(const ModelConfig& cfg) {
  return Tensor({3}, {cfg.bev_extent.x_min, cfg.bev_extent.y_min, cfg.z_min});
}

Tensor curve_size(const ModelConfig& cfg) {
  return Tensor({3}, {cfg.bev_extent.x_max - cfg.bev_extent.x_min, cfg.bev_extent.y_max - cfg.bev_extent.y_min,
                      cfg.z_max - cfg.z_min});
}

Tensor normalised_curves(const Tensor& curves, const ModelConfig& cfg) {
  const std::size_t n = curves.dim(0);
  return reshape(div(sub(curves, curve_lo(cfg)), curve_size(cfg)), {n, 12});
}

std::vector<geom::BezierLane> detached_lanes(const Tensor& curves) {
  const auto d = curves.data();
  std::vector<geom::BezierLane> out(curves.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i)
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 3; ++c) out[i].control_points(r, c) = d[i * 12 + static_cast<std::size_t>(r * 3 + c)];
  return out;
}

FeatureGrid project_grid(const FeatureGrid& g, const nn::Linear& proj) {
  FeatureGrid out = g;
  out.values = proj(g.values);
  return out;
}

}  // namespace

void LaneDecoderConfig::validate() const {
  if (layers < 1) throw ConfigError("lane decoder: layers must be >= 1");
  if (samples < 2 || samples % 2 == 0) throw ConfigError("lane decoder: samples must be odd and >= 3");
  if (queries < 1) throw ConfigError("lane decoder: queries must be >= 1");
  if (heads == 0 || channels % heads != 0) throw ConfigError("lane decoder: channels not divisible by heads");
  if (channels % 4 != 0) throw ConfigError("lane decoder: channels must be a multiple of 4");
  if (offsets == 0) throw ConfigError("lane decoder: offsets must be >= 1");
  geometry_encoding.validate();
}

namespace {

// Initial lanes: straight, heading along +x, tiled over three longitudinal
// windows and evenly spaced lateral slots. Unit coordinates in [0, 1].
std::vector<double> lane_reference_layout(std::size_t n) {
  constexpr std::size_t kWindows = 3;
  const std::size_t slots = (n + kWindows - 1) / kWindows;
  std::vector<double> out;
  out.reserve(n * 12);
  for (std::size_t i = 0; i < n; ++i) {
    const double x0 = 0.03 + 0.32 * static_cast<double>(i % kWindows);
    const double y = (static_cast<double>(i / kWindows) + 0.5) / static_cast<double>(slots);
    for (int k = 0; k < 4; ++k) {
      out.push_back(x0 + 0.3 * k / 3.0);
      out.push_back(y);
      out.push_back(0.5);
    }
  }
  return out;
}

// Initial TE boxes: a row of small boxes across the middle band of the image.
std::vector<double> te_reference_layout(std::size_t n) {
  std::vector<double> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.insert(out.end(), {0.2 + 0.6 * (static_cast<double>(i) + 0.5) / static_cast<double>(n), 0.42, 0.03, 0.08});
  }
  return out;
}

// Rewrites the query embeddings so that ref(query_i) lands exactly on layout
// row i. Each query keeps its random component in the null space of the
// reference weights, so the queries still differ as features.
void spread_references(Tensor& queries, const nn::Linear& ref, const std::vector<double>& unit, bool through_sigmoid) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto n = static_cast<Eigen::Index>(queries.dim(0)), c = static_cast<Eigen::Index>(queries.dim(1));
  const auto k = static_cast<Eigen::Index>(ref.bias.numel());
  if (c < k) return;  // too narrow to place every query; keep the random start
  const Eigen::Map<const Mat> w(ref.weight.data().data(), c, k);
  const Eigen::Map<const Eigen::RowVectorXd> bias(ref.bias.data().data(), k);
  Mat target(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      const double u = unit[static_cast<std::size_t>(i * k + j)];
      target(i, j) = (through_sigmoid ? std::log(u / (1.0 - u)) : u) - bias(j);
    }
  }
  const Mat pinv = (w.transpose() * w).ldlt().solve(w.transpose());  // k x c
  Eigen::Map<Mat> q(queries.mutable_data().data(), n, c);
  const Mat keep = q - (q * w) * pinv;  // null-space part of the random init
  q = target * pinv + keep;
}

}  // namespace

Model Model::create(const ModelConfig& config, std::uint64_t seed) {
  config.lane.validate();
  if (config.te.queries == 0 || config.te.classes == 0) throw ConfigError("te decoder: empty configuration");
  if (config.topology.channels != config.lane.channels) {
    throw ConfigError("topology channels must equal decoder channels");
  }
  Model m;
  m.config = config;
  std::mt19937_64 rng(seed);
  auto& ps = m.params;
  const auto& lc = config.lane;
  const std::size_t c = lc.channels;

  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> q(lc.queries * c);
  for (double& v : q) v = nd(rng);
  m.lane_queries = ps.add("lane.queries", {lc.queries, c}, q);
  m.lane_ref = nn::Linear::create(ps, "lane.ref", c, 12, rng);
  spread_references(m.lane_queries, m.lane_ref, lane_reference_layout(lc.queries), lc.normalized_coordinates);
  m.lane_pos = nn::Linear::create(ps, "lane.pos", 12, c, rng);
  m.bev_in = nn::Linear::create(ps, "lane.bev_in", config.bev_channels, c, rng);
  const std::size_t points = config.flags.no_curve_ca ? 4 : lc.samples;
  for (std::size_t l = 0; l < lc.layers; ++l) {
    m.lane_layers.push_back(make_layer(ps, "lane.layer" + std::to_string(l), lc, points, 12, 1, true, rng));
    m.lane_layers.back().ca.joint_normalization = !config.flags.per_point_normalization;
  }

  std::vector<double> tq(config.te.queries * c);
  for (double& v : tq) v = nd(rng);
  m.te_queries = ps.add("te.queries", {config.te.queries, c}, tq);
  m.te_ref = nn::Linear::create(ps, "te.ref", c, 4, rng);
  spread_references(m.te_queries, m.te_ref, te_reference_layout(config.te.queries), true);
  m.te_pos = nn::Linear::create(ps, "te.pos", 4, c, rng);
  m.fv_in = nn::Linear::create(ps, "te.fv_in", config.fv_channels, c, rng);
  for (std::size_t l = 0; l < lc.layers; ++l) {
    m.te_layers.push_back(make_layer(ps, "te.layer" + std::to_string(l), lc, 1, 4, config.te.classes, false, rng));
  }

  const topo::EndpointFrame frame{config.bev_extent.x_min, config.bev_extent.x_max - config.bev_extent.x_min,
                                  config.bev_extent.y_min, config.bev_extent.y_max - config.bev_extent.y_min,
                                  config.z_min, config.z_max - config.z_min};
  const auto& tc = config.topology;
  if (config.flags.baseline_l2l) {
    m.l2l_baseline = topo::BaselinePairHead::create(ps, "l2l_baseline", c, tc.hidden, rng);
  } else {
    m.l2l = topo::L2LHead::create(ps, "l2l", tc, frame, rng);
  }
  if (config.flags.baseline_l2t) {
    m.l2t_baseline = topo::BaselinePairHead::create(ps, "l2t_baseline", c, tc.hidden, rng);
  } else {
    m.l2t = topo::L2THead::create(ps, "l2t", tc, config.fv_channels, rng);
  }
  return m;
}

std::vector<geom::BezierLane> LanePredictions::lanes(std::size_t layer) const {
  auto out = detached_lanes(curves.at(layer));
  const auto lg = logits.at(layer).data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i].confidence = 1.0 / (1.0 + std::exp(-lg[i]));
  return out;
}

Tensor curves_from_logits(const Tensor& logits, const ModelConfig& cfg) {
  const std::size_t n = logits.dim(0);
  const Tensor unit = cfg.lane.normalized_coordinates ? sigmoid(logits) : logits;
  return add(mul(reshape(unit, {n, 4, 3}), curve_size(cfg)), curve_lo(cfg));
}

LanePredictions lane_decoder_forward(const Model& model, const FeatureGrid& bev) {
  const auto& cfg = model.config;
  require_grid("lane_decoder_forward", bev, Frame::BEV, cfg.bev_channels);
  const auto& flags = cfg.flags;
  const FeatureGrid grid = project_grid(bev, model.bev_in);
  const std::size_t n = cfg.lane.queries;

  LanePredictions out;
  Tensor x = model.lane_queries;
  Tensor logits = model.lane_ref(x);
  for (const auto& layer : model.lane_layers) {
    const Tensor curves = curves_from_logits(logits, cfg);
    const Tensor pos = model.lane_pos(normalised_curves(curves, cfg));
    if (!flags.zero_attention) {
      Tensor sa;
      if (flags.plain_sa) {
        sa = attn::self_attention(x, layer.sa, nullptr, &pos);
      } else {
        const auto lanes = detached_lanes(curves);
        sa = attn::geometry_biased_self_attention(x, lanes, layer.sa, layer.bias, &pos);
      }
      x = layer.norm1(add(x, sa));
      const Tensor q = add(x, pos);
      Tensor ca;
      if (flags.no_curve_ca) {
        const Tensor refs = grid.to_cell(slice(curves, 2, 0, 2));  // [N, 4, 2]
        ca = attn::deformable_cross_attention(q, refs, grid.values, layer.ca);
      } else {
        ca = attn::curve_guided_cross_attention(q, curves, grid, layer.ca, cfg.lane.samples);
      }
      x = layer.norm2(add(x, ca));
    }
    x = layer.norm3(add(x, layer.ffn(x)));
    logits = add(logits, layer.reg(x));
    out.curves.push_back(curves_from_logits(logits, cfg));
    out.logits.push_back(layer.cls(x));
  }
  out.queries = x;
  const Tensor& last = out.curves.back();
  out.starts = reshape(slice(last, 1, 0, 1), {n, 3});
  out.ends = reshape(slice(last, 1, 3, 4), {n, 3});
  return out;
}

TePredictions te_decoder_forward(const Model& model, const FeatureGrid& fv) {
  const auto& cfg = model.config;
  require_grid("te_decoder_forward", fv, Frame::FV, cfg.fv_channels);
  const FeatureGrid grid = project_grid(fv, model.fv_in);
  const std::size_t m = cfg.te.queries;
  const Tensor image_size({2}, {static_cast<double>(cfg.image_width), static_cast<double>(cfg.image_height)});

  TePredictions out;
  Tensor x = model.te_queries;
  Tensor logits = model.te_ref(x);
  for (const auto& layer : model.te_layers) {
    const Tensor box = sigmoid(logits);
    const Tensor pos = model.te_pos(box);
    if (!cfg.flags.zero_attention) {
      x = layer.norm1(add(x, attn::self_attention(x, layer.sa, nullptr, &pos)));
      const Tensor refs = reshape(grid.to_cell(mul(slice(box, 1, 0, 2), image_size)), {m, 1, 2});
      x = layer.norm2(add(x, attn::deformable_cross_attention(add(x, pos), refs, grid.values, layer.ca)));
    }
    x = layer.norm3(add(x, layer.ffn(x)));
    logits = add(logits, layer.reg(x));
    out.boxes.push_back(sigmoid(logits));
    out.logits.push_back(layer.cls(x));
  }
  out.queries = x;
  return out;
}

ForwardOutput full_forward(const Model& model, const FeatureGrid& bev, const FeatureGrid& fv,
                           const geom::CameraModel& cam) {
  ForwardOutput out;
  out.lanes = lane_decoder_forward(model, bev);
  out.tes = te_decoder_forward(model, fv);
  const auto& flags = model.config.flags;
  const bool cut_q = model.config.detach_topology_queries;
  const Tensor ql = cut_q ? out.lanes.queries.detach() : out.lanes.queries;
  const Tensor qt = cut_q ? out.tes.queries.detach() : out.tes.queries;
  const bool cut = model.config.detach_topology_geometry;
  const Tensor starts = cut ? out.lanes.starts.detach() : out.lanes.starts;
  const Tensor ends = cut ? out.lanes.ends.detach() : out.lanes.ends;
  const Tensor curves = cut ? out.lanes.curves.back().detach() : out.lanes.curves.back();
  const Tensor boxes = cut ? out.tes.boxes.back().detach() : out.tes.boxes.back();
  if (flags.baseline_l2l) {
    out.l2l = topo::baseline_pair_predict(ql, ql, model.l2l_baseline, topo::RelationKind::L2L);
  } else {
    const auto g = topo::l2l_relation_embedding(ql, starts, ends, model.l2l);
    out.l2l = topo::l2l_predict(g, topo::l2l_dist_embed(starts, ends, model.l2l), model.l2l);
  }
  if (flags.baseline_l2t) {
    out.l2t = topo::baseline_pair_predict(ql, qt, model.l2t_baseline, topo::RelationKind::L2T);
  } else {
    out.l2t = topo::l2t_align_and_predict(ql, curves, cam, fv, qt, boxes, model.l2t);
  }
  return out;
}

}  // namespace reltopo

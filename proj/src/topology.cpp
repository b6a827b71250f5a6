#include "reltopo/topology.hpp"

#include <algorithm>
#include <numbers>

#include "reltopo/attention.hpp"

namespace reltopo::topo {

namespace {

Tensor encode(const Tensor& x, const geom::SinusoidalConfig& cfg) {
  return nn::sinusoidal(x, static_cast<std::size_t>(cfg.output_dim), cfg.temperature, cfg.input_scale);
}

Tensor normalise(const Tensor& pts, const EndpointFrame& f) {
  const Tensor lo({3}, {f.x_min, f.y_min, f.z_min});
  const Tensor inv({3}, {1.0 / f.x_size, 1.0 / f.y_size, 1.0 / f.z_size});
  return mul(sub(pts, lo), inv);
}

// rows [N, C], cols [M, C] -> [N, M, C] holding rows_i + cols_j.
Tensor pair_sum(const Tensor& rows, const Tensor& cols) {
  const std::size_t c = rows.dim(1);
  return add(reshape(rows, {rows.dim(0), 1, c}), reshape(cols, {1, cols.dim(0), c}));
}

Tensor squeeze_last(const Tensor& t) {
  Shape s = t.shape();
  s.pop_back();
  return reshape(t, s);
}

void require_points(const char* op, const Tensor& t, std::size_t n) {
  if (t.shape() != Shape{n, 3}) {
    throw ShapeError(std::string(op) + ": expected endpoints [" + std::to_string(n) + ",3], got " +
                     shape_string(t.shape()));
  }
}

}  // namespace

L2LHead L2LHead::create(ParameterSet& ps, const std::string& name, const TopologyConfig& cfg,
                        const EndpointFrame& frame, std::mt19937_64& rng) {
  cfg.endpoint_encoding.validate();
  cfg.distance_encoding.validate();
  const std::size_t c = cfg.channels, h = cfg.hidden;
  const auto pe_in = 3 * static_cast<std::size_t>(cfg.endpoint_encoding.output_dim);
  const auto d_in = static_cast<std::size_t>(cfg.distance_encoding.output_dim);
  L2LHead p;
  p.cfg = cfg;
  p.frame = frame;
  p.mlp_row = nn::Mlp::create(ps, name + ".mlp1", c, h, c, rng);
  p.mlp_col = nn::Mlp::create(ps, name + ".mlp2", c, h, c, rng);
  p.reduce_row = nn::Linear::create(ps, name + ".reduce_row", c, c, rng);
  p.reduce_col = nn::Linear::create(ps, name + ".reduce_col", c, c, rng);
  p.pe_end = nn::Linear::create(ps, name + ".pe_end", pe_in, c, rng);
  p.pe_start = nn::Linear::create(ps, name + ".pe_start", pe_in, c, rng);
  p.dist_mlp = nn::Mlp::create(ps, name + ".dist", d_in, h, c, rng);
  p.out = nn::Mlp::create(ps, name + ".out", c, h, 1, rng);
  return p;
}

RelationEmbedding l2l_relation_embedding(const Tensor& q_lane, const Tensor& starts, const Tensor& ends,
                                         const L2LHead& head) {
  if (q_lane.rank() != 2 || q_lane.dim(0) == 0) {
    throw ShapeError("l2l_relation_embedding: expected non-empty [N, C], got " + shape_string(q_lane.shape()));
  }
  const std::size_t n = q_lane.dim(0);
  require_points("l2l_relation_embedding", starts, n);
  require_points("l2l_relation_embedding", ends, n);
  // Concatenation followed by a linear map equals the sum of two half-maps.
  const Tensor rows = add(head.reduce_row(head.mlp_row(q_lane)),
                          head.pe_end(encode(normalise(ends, head.frame), head.cfg.endpoint_encoding)));
  const Tensor cols = add(head.reduce_col(head.mlp_col(q_lane)),
                          head.pe_start(encode(normalise(starts, head.frame), head.cfg.endpoint_encoding)));
  return {pair_sum(rows, cols), RelationKind::L2L};
}

Tensor l2l_dist_embed(const Tensor& starts, const Tensor& ends, const L2LHead& head) {
  const std::size_t n = starts.dim(0);
  require_points("l2l_dist_embed", starts, n);
  require_points("l2l_dist_embed", ends, n);
  const Tensor e = slice(ends, 1, 0, 2);
  const Tensor s = slice(starts, 1, 0, 2);
  const Tensor gap = sub(reshape(e, {n, 1, 2}), reshape(s, {1, n, 2}));  // [N, N, 2]
  const Tensor dist = reshape(norm_lastdim(gap), {n, n, 1});
  return head.dist_mlp(encode(dist, head.cfg.distance_encoding));
}

AdjacencyLogits l2l_predict(const RelationEmbedding& g, const Tensor& dist_embed, const L2LHead& head) {
  if (g.values.shape() != dist_embed.shape()) {
    throw ShapeError("l2l_predict: relation " + shape_string(g.values.shape()) + " vs distance " +
                     shape_string(dist_embed.shape()));
  }
  return {squeeze_last(head.out(add(g.values, dist_embed))), RelationKind::L2L};
}

BaselinePairHead BaselinePairHead::create(ParameterSet& ps, const std::string& name, std::size_t channels,
                                          std::size_t hidden, std::mt19937_64& rng) {
  BaselinePairHead p;
  p.row = nn::Linear::create(ps, name + ".row", channels, hidden, rng);
  p.col = nn::Linear::create(ps, name + ".col", channels, hidden, rng);
  p.out = nn::Linear::create(ps, name + ".out", hidden, 1, rng);
  return p;
}

AdjacencyLogits baseline_pair_predict(const Tensor& rows, const Tensor& cols, const BaselinePairHead& head,
                                      RelationKind kind) {
  const Tensor hidden = relu(pair_sum(head.row(rows), head.col(cols)));
  return {squeeze_last(head.out(hidden)), kind};
}

L2THead L2THead::create(ParameterSet& ps, const std::string& name, const TopologyConfig& cfg,
                        std::size_t fv_channels, std::mt19937_64& rng) {
  if (cfg.channels % 4 != 0) throw ConfigError("l2t head: channels must be a multiple of 4");
  const std::size_t c = cfg.channels, h = cfg.hidden;
  L2THead p;
  p.cfg = cfg;
  p.fv_proj = nn::Linear::create(ps, name + ".fv_proj", fv_channels, c, rng);
  p.mlp_lane = nn::Mlp::create(ps, name + ".mlp1", c, h, c, rng);
  p.mlp_te = nn::Mlp::create(ps, name + ".mlp2", c, h, c, rng);
  p.reduce_row = nn::Linear::create(ps, name + ".reduce_row", c, c, rng);
  p.reduce_col = nn::Linear::create(ps, name + ".reduce_col", c, c, rng);
  p.out = nn::Mlp::create(ps, name + ".out", c, h, 1, rng);
  return p;
}

LaneAlignment l2t_align(const Tensor& curves, const geom::CameraModel& cam, const FeatureGrid& fv,
                        const L2THead& head) {
  cam.validate();
  const std::size_t n = curves.dim(0), k = head.cfg.samples, c = head.cfg.channels;
  const Tensor pts = attn::sample_curves(curves, k);  // [N, K, 3]
  const Tensor rt({3, 3}, {cam.rotation(0, 0), cam.rotation(1, 0), cam.rotation(2, 0),
                           cam.rotation(0, 1), cam.rotation(1, 1), cam.rotation(2, 1),
                           cam.rotation(0, 2), cam.rotation(1, 2), cam.rotation(2, 2)});
  const Tensor pc = add(matmul(pts, rt), Tensor({3}, {cam.translation.x(), cam.translation.y(), cam.translation.z()}));

  // Validity is decided on values and enters the tape as a constant mask.
  const auto pcd = pc.data();
  std::vector<double> mask(n * k, 0.0), inv_mask(n * k, 1.0);
  LaneAlignment out;
  out.valid_counts.assign(n, 0);
  for (std::size_t i = 0; i < n * k; ++i) {
    const double z = pcd[i * 3 + 2];
    if (z <= geom::kMinProjectionDepth) continue;
    const double u = cam.fx() * pcd[i * 3] / z + cam.cx();
    const double v = cam.fy() * pcd[i * 3 + 1] / z + cam.cy();
    if (u >= 0.0 && v >= 0.0 && u < cam.width && v < cam.height) {
      mask[i] = 1.0;
      inv_mask[i] = 0.0;
      ++out.valid_counts[i / k];
    }
  }
  const Tensor m({n, k, 1}, mask);
  const Tensor z_safe = add(mul(slice(pc, 2, 2, 3), m), Tensor({n, k, 1}, inv_mask));
  const Tensor uv = add(mul(div(slice(pc, 2, 0, 2), z_safe), Tensor({2}, {cam.fx(), cam.fy()})),
                        Tensor({2}, {cam.cx(), cam.cy()}));  // [N, K, 2]

  std::vector<double> inv_count(n), has(n);
  for (std::size_t i = 0; i < n; ++i) {
    inv_count[i] = 1.0 / static_cast<double>(std::max<std::size_t>(out.valid_counts[i], 1));
    has[i] = out.valid_counts[i] > 0 ? 1.0 : 0.0;
  }
  const Tensor inv_n({n, 1}, inv_count);
  const Tensor has_t({n, 1}, has);

  const Tensor value = head.fv_proj(fv.values);
  const Tensor cells = reshape(fv.to_cell(uv), {n * k, 2});
  const Tensor feats = reshape(bilinear_sample(value, cells), {n, k, c});
  if (head.cfg.l2t_max_pool) {
    const Tensor floor_invalid = scale(Tensor({n, k, 1}, inv_mask), -1e6);
    out.features = mul(reduce_max(add(mul(feats, m), floor_invalid), 1), has_t);
  } else {
    out.features = mul(sum(mul(feats, m), 1), inv_n);
  }

  const Tensor uv_norm = mul(uv, Tensor({2}, {1.0 / cam.width, 1.0 / cam.height}));
  const Tensor mean_uv = mul(sum(mul(uv_norm, m), 1), inv_n);  // [N, 2]
  out.positional = mul(nn::sinusoidal(mean_uv, c / 2, 10000.0, 2.0 * std::numbers::pi), has_t);
  return out;
}

AdjacencyLogits l2t_align_and_predict(const Tensor& q_lane, const Tensor& curves,
                                      const geom::CameraModel& cam, const FeatureGrid& fv,
                                      const Tensor& q_te, const Tensor& te_boxes, const L2THead& head) {
  const std::size_t c = head.cfg.channels;
  if (q_lane.rank() != 2 || q_te.rank() != 2 || te_boxes.shape() != Shape{q_te.dim(0), 4}) {
    throw ShapeError("l2t_align_and_predict: lanes " + shape_string(q_lane.shape()) + ", tes " +
                     shape_string(q_te.shape()) + ", boxes " + shape_string(te_boxes.shape()));
  }
  const LaneAlignment al = l2t_align(curves, cam, fv, head);
  const Tensor lane = add(add(head.mlp_lane(q_lane), al.features), al.positional);
  const Tensor centers = slice(te_boxes, 1, 0, 2);
  const Tensor te = add(head.mlp_te(q_te), nn::sinusoidal(centers, c / 2, 10000.0, 2.0 * std::numbers::pi));
  const Tensor g = pair_sum(head.reduce_row(lane), head.reduce_col(te));
  return {squeeze_last(head.out(g)), RelationKind::L2T};
}

}  // namespace reltopo::topo

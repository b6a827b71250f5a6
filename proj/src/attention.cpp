#include "reltopo/attention.hpp"

#include <cmath>

namespace reltopo::attn {

namespace {

// [N, C] -> [M, N, C/M]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t n = x.dim(0), c = x.dim(1);
  return permute(reshape(x, {n, heads, c / heads}), {1, 0, 2});
}

}  // namespace

MultiHeadAttention MultiHeadAttention::create(ParameterSet& ps, const std::string& name,
                                              std::size_t channels, std::size_t heads,
                                              std::mt19937_64& rng) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("attention: channels " + std::to_string(channels) +
                      " not divisible by heads " + std::to_string(heads));
  }
  MultiHeadAttention p;
  p.query = nn::Linear::create(ps, name + ".q", channels, channels, rng);
  p.key = nn::Linear::create(ps, name + ".k", channels, channels, rng);
  p.value = nn::Linear::create(ps, name + ".v", channels, channels, rng);
  p.out = nn::Linear::create(ps, name + ".out", channels, channels, rng);
  p.heads = heads;
  return p;
}

Tensor self_attention(const Tensor& x, const MultiHeadAttention& p, const Tensor* bias,
                      const Tensor* pos) {
  if (x.rank() != 2) throw ShapeError("self_attention: expected [N, C], got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), m = p.heads;
  const Tensor qk_in = pos ? add(x, *pos) : x;
  const Tensor q = split_heads(p.query(qk_in), m);
  const Tensor k = split_heads(p.key(qk_in), m);
  const Tensor v = split_heads(p.value(x), m);
  Tensor logits = scale(batched_matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(c / m)));
  if (bias) {
    if (bias->shape() != Shape{m, n, n} && bias->shape() != Shape{1, n, n}) {
      throw ShapeError("self_attention: bias " + shape_string(bias->shape()) + " for " +
                       std::to_string(m) + " heads over " + std::to_string(n) + " queries");
    }
    logits = add(logits, *bias);
  }
  const Tensor heads_out = batched_matmul(softmax_lastdim(logits), v);  // [M, N, d]
  return p.out(reshape(permute(heads_out, {1, 0, 2}), {n, c}));
}

GeometryBiasParams GeometryBiasParams::create(ParameterSet& ps, const std::string& name,
                                              const geom::SinusoidalConfig& encoding,
                                              std::size_t hidden, std::size_t heads,
                                              std::mt19937_64& rng) {
  encoding.validate();
  GeometryBiasParams p;
  p.encoding = encoding;
  p.heads = heads;
  p.ge = nn::Mlp::create(ps, name + ".ge", 2 * static_cast<std::size_t>(encoding.output_dim), hidden, heads, rng);
  return p;
}

Tensor geometry_bias_matrix(std::span<const geom::BezierLane> lanes, const GeometryBiasParams& p) {
  const std::size_t n = lanes.size();
  if (n == 0) throw ShapeError("geometry_bias_matrix: no lanes");
  std::vector<double> pairs(n * n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double d = geom::endpoint_min_distance(lanes[i], lanes[j]);
      const double a = geom::angle_difference(lanes[i], lanes[j]);
      pairs[(i * n + j) * 2] = pairs[(j * n + i) * 2] = d;
      pairs[(i * n + j) * 2 + 1] = pairs[(j * n + i) * 2 + 1] = a;
    }
  }
  const Tensor enc = nn::sinusoidal(Tensor({n * n, 2}, std::move(pairs)),
                                    static_cast<std::size_t>(p.encoding.output_dim),
                                    p.encoding.temperature, p.encoding.input_scale);
  return permute(reshape(p.ge(enc), {n, n, p.heads}), {2, 0, 1});
}

Tensor geometry_biased_self_attention(const Tensor& queries, std::span<const geom::BezierLane> lanes,
                                      const MultiHeadAttention& mha, const GeometryBiasParams& bias,
                                      const Tensor* pos) {
  if (queries.rank() != 2 || queries.dim(0) != lanes.size()) {
    throw ShapeError("geometry_biased_self_attention: " + std::to_string(lanes.size()) +
                     " lanes for queries " + shape_string(queries.shape()));
  }
  const Tensor b = geometry_bias_matrix(lanes, bias);
  return self_attention(queries, mha, &b, pos);
}

DeformableAttentionParams DeformableAttentionParams::create(ParameterSet& ps, const std::string& name,
                                                            std::size_t channels, std::size_t heads,
                                                            std::size_t points, std::size_t offsets,
                                                            std::mt19937_64& rng) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("deformable attention: channels not divisible by heads");
  }
  if (points == 0 || offsets == 0) throw ConfigError("deformable attention: empty sampling set");
  DeformableAttentionParams p;
  p.heads = heads;
  p.points = points;
  p.offsets = offsets;
  const std::size_t s = heads * points * offsets;
  p.offset_head = nn::Linear::create(ps, name + ".offsets", channels, s * 2, rng);
  p.weight_head = nn::Linear::create(ps, name + ".weights", channels, s, rng);
  p.value_proj = nn::Linear::create(ps, name + ".value", channels, channels, rng);
  p.out_proj = nn::Linear::create(ps, name + ".out", channels, channels, rng);
  p.offset_scale = ps.add_constant(name + ".offset_scale", {heads}, 1.0);
  return p;
}

Tensor deformable_weights(const Tensor& query, const DeformableAttentionParams& p) {
  const std::size_t l = query.dim(0), m = p.heads, k = p.points, n = p.offsets;
  const Tensor raw = p.weight_head(query);
  if (p.joint_normalization) return softmax_lastdim(reshape(raw, {l, m, k * n}));
  return reshape(softmax_lastdim(reshape(raw, {l, m, k, n})), {l, m, k * n});
}

Tensor deformable_cross_attention(const Tensor& query, const Tensor& refs, const Tensor& grid_values,
                                  const DeformableAttentionParams& p) {
  const std::size_t l = query.dim(0), m = p.heads, k = p.points, n = p.offsets;
  if (refs.shape() != Shape{l, k, 2}) {
    throw ShapeError("deformable_cross_attention: refs " + shape_string(refs.shape()) + " for " +
                     std::to_string(l) + " queries with " + std::to_string(k) + " points");
  }
  const Tensor offsets = mul(reshape(p.offset_head(query), {l, m, k, n, 2}),
                             reshape(p.offset_scale, {1, m, 1, 1, 1}));
  const Tensor locs = reshape(add(offsets, reshape(refs, {l, 1, k, 1, 2})), {l, m, k * n, 2});
  const Tensor value = p.value_proj(grid_values);
  return p.out_proj(deformable_sample(value, locs, deformable_weights(query, p)));
}

Tensor bernstein_basis(std::size_t samples) {
  const auto b = geom::bernstein_matrix<double>(static_cast<int>(samples));
  std::vector<double> data(samples * 4);
  for (std::size_t r = 0; r < samples; ++r)
    for (std::size_t c = 0; c < 4; ++c) data[r * 4 + c] = b(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  return Tensor({samples, 4}, std::move(data));
}

Tensor sample_curves(const Tensor& curves, std::size_t samples) {
  if (curves.rank() != 3 || curves.dim(1) != 4 || curves.dim(2) != 3) {
    throw ShapeError("sample_curves: expected [L, 4, 3], got " + shape_string(curves.shape()));
  }
  const Tensor basis_t = transpose(bernstein_basis(samples));  // [4, K]
  return permute(matmul(permute(curves, {0, 2, 1}), basis_t), {0, 2, 1});
}

Tensor curve_guided_cross_attention(const Tensor& query, const Tensor& curves, const FeatureGrid& grid,
                                    const DeformableAttentionParams& p, std::size_t samples) {
  if (samples != p.points) {
    throw ConfigError("curve_guided_cross_attention: sampler K=" + std::to_string(samples) +
                      " but attention expects " + std::to_string(p.points));
  }
  const Tensor pts = sample_curves(curves, samples);
  const Tensor refs = grid.to_cell(slice(pts, 2, 0, 2));
  return deformable_cross_attention(query, refs, grid.values, p);
}

Tensor curve_guided_cross_attention(const Tensor& query, const geom::BezierLane& lane,
                                    const FeatureGrid& grid, const DeformableAttentionParams& p,
                                    std::size_t samples) {
  const std::size_t c = query.numel();
  const Tensor out = curve_guided_cross_attention(reshape(query, {1, c}), lanes_to_tensor({&lane, 1}),
                                                  grid, p, samples);
  return reshape(out, {c});
}

Tensor lanes_to_tensor(std::span<const geom::BezierLane> lanes) {
  std::vector<double> data;
  data.reserve(lanes.size() * 12);
  for (const auto& lane : lanes)
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 3; ++c) data.push_back(lane.control_points(r, c));
  return Tensor({lanes.size(), 4, 3}, std::move(data));
}

}  // namespace reltopo::attn

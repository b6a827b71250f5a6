#pragma once

#include <random>
#include <span>
#include <string>

#include "reltopo/feature_grid.hpp"
#include "reltopo/geometry.hpp"
#include "reltopo/nn.hpp"

namespace reltopo::attn {

struct MultiHeadAttention {
  nn::Linear query, key, value, out;
  std::size_t heads = 1;

  static MultiHeadAttention create(ParameterSet& ps, const std::string& name, std::size_t channels,
                                   std::size_t heads, std::mt19937_64& rng);
};

/// Multi-head self-attention over x [N, C]. `bias` ([heads, N, N]) is added to
/// the scaled logits when given; `pos` ([N, C]) is added to queries and keys.
Tensor self_attention(const Tensor& x, const MultiHeadAttention& p, const Tensor* bias = nullptr,
                      const Tensor* pos = nullptr);

/// Sinusoidal encoding of (distance, angle) followed by a two-layer MLP with
/// one output per head.
struct GeometryBiasParams {
  geom::SinusoidalConfig encoding;
  nn::Mlp ge;
  std::size_t heads = 1;

  static GeometryBiasParams create(ParameterSet& ps, const std::string& name,
                                   const geom::SinusoidalConfig& encoding, std::size_t hidden,
                                   std::size_t heads, std::mt19937_64& rng);
};

/// Pairwise bias [heads, N, N]. Distances and angles are constants on the tape.
Tensor geometry_bias_matrix(std::span<const geom::BezierLane> lanes, const GeometryBiasParams& p);

Tensor geometry_biased_self_attention(const Tensor& queries, std::span<const geom::BezierLane> lanes,
                                      const MultiHeadAttention& mha, const GeometryBiasParams& bias,
                                      const Tensor* pos = nullptr);

struct DeformableAttentionParams {
  std::size_t heads = 1;
  std::size_t points = 1;   // reference points per query (K)
  std::size_t offsets = 1;  // sampling offsets per reference point (N)
  bool joint_normalization = true;  // softmax over K*N per head, else over N per point
  nn::Linear offset_head;  // C -> M*K*N*2
  nn::Linear weight_head;  // C -> M*K*N
  nn::Linear value_proj;
  nn::Linear out_proj;
  Tensor offset_scale;  // [M], learnable, starts at 1

  static DeformableAttentionParams create(ParameterSet& ps, const std::string& name,
                                          std::size_t channels, std::size_t heads,
                                          std::size_t points, std::size_t offsets,
                                          std::mt19937_64& rng);
};

/// Normalised sampling weights [L, M, K*N].
Tensor deformable_weights(const Tensor& query, const DeformableAttentionParams& p);

/// query [L, C], refs [L, K, 2] as (row, col) cells, grid values [H, W, C] -> [L, C].
Tensor deformable_cross_attention(const Tensor& query, const Tensor& refs, const Tensor& grid_values,
                                  const DeformableAttentionParams& p);

/// Constant Bernstein basis [K, 4] at t = k / (K - 1).
Tensor bernstein_basis(std::size_t samples);

/// curves [L, 4, 3] world control points -> [L, K, 3] on-curve samples.
Tensor sample_curves(const Tensor& curves, std::size_t samples);

/// References are the K on-curve samples of each lane mapped into grid cells.
/// Differentiable through the control points. Throws when `samples` != p.points.
Tensor curve_guided_cross_attention(const Tensor& query, const Tensor& curves, const FeatureGrid& grid,
                                    const DeformableAttentionParams& p, std::size_t samples);

/// Single-lane form: query [C] -> [C].
Tensor curve_guided_cross_attention(const Tensor& query, const geom::BezierLane& lane,
                                    const FeatureGrid& grid, const DeformableAttentionParams& p,
                                    std::size_t samples);

/// Packs lanes into a constant [L, 4, 3] tensor.
Tensor lanes_to_tensor(std::span<const geom::BezierLane> lanes);

}  // namespace reltopo::attn

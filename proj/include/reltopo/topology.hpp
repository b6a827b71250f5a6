#pragma once

#include <random>
#include <string>

#include "reltopo/feature_grid.hpp"
#include "reltopo/geometry.hpp"
#include "reltopo/nn.hpp"

namespace reltopo::topo {

enum class RelationKind { L2L, L2T };

struct RelationEmbedding {
  Tensor values;  // [N, N, C] or [N, M, C]
  RelationKind kind = RelationKind::L2L;
};

struct AdjacencyLogits {
  Tensor logits;  // [N, N] or [N, M]
  RelationKind kind = RelationKind::L2L;
};

struct TopologyConfig {
  std::size_t channels = 32;
  std::size_t hidden = 64;
  std::size_t samples = 11;  // on-curve points projected by the L2T head
  geom::SinusoidalConfig endpoint_encoding{16, 10000.0, 6.283185307179586};
  geom::SinusoidalConfig distance_encoding{16, 10000.0, 1.0};
  bool l2t_max_pool = false;
};

/// Normalises world points into [0, 1] over an extent before positional encoding.
struct EndpointFrame {
  double x_min = 0.0, x_size = 1.0;
  double y_min = 0.0, y_size = 1.0;
  double z_min = 0.0, z_size = 1.0;
};

struct L2LHead {
  TopologyConfig cfg;
  EndpointFrame frame;
  nn::Mlp mlp_row, mlp_col;   // MLP1 and MLP2 on the lane queries
  nn::Linear reduce_row;      // the two halves of the 2C -> C projection
  nn::Linear reduce_col;      // applied to the broadcast concatenation
  nn::Linear pe_end, pe_start;
  nn::Mlp dist_mlp;
  nn::Mlp out;

  static L2LHead create(ParameterSet& ps, const std::string& name, const TopologyConfig& cfg,
                        const EndpointFrame& frame, std::mt19937_64& rng);
};

/// G = reduce(MLP1(Q) (+) MLP2(Q)) + PE. `starts`, `ends` are [N, 3] world points.
RelationEmbedding l2l_relation_embedding(const Tensor& q_lane, const Tensor& starts, const Tensor& ends,
                                         const L2LHead& head);
/// Entry (i, j) embeds the BEV gap from lane i's end to lane j's start.
Tensor l2l_dist_embed(const Tensor& starts, const Tensor& ends, const L2LHead& head);
AdjacencyLogits l2l_predict(const RelationEmbedding& g, const Tensor& dist_embed, const L2LHead& head);

/// MLP over the broadcast concatenation of lane queries with themselves.
struct BaselinePairHead {
  nn::Linear row, col;
  nn::Linear out;

  static BaselinePairHead create(ParameterSet& ps, const std::string& name, std::size_t channels,
                                 std::size_t hidden, std::mt19937_64& rng);
};
AdjacencyLogits baseline_pair_predict(const Tensor& rows, const Tensor& cols, const BaselinePairHead& head,
                                      RelationKind kind);

struct L2THead {
  TopologyConfig cfg;
  nn::Linear fv_proj;  // FV channels -> C
  nn::Mlp mlp_lane, mlp_te;
  nn::Linear reduce_row, reduce_col;
  nn::Mlp out;

  static L2THead create(ParameterSet& ps, const std::string& name, const TopologyConfig& cfg,
                        std::size_t fv_channels, std::mt19937_64& rng);
};

/// Per-lane projected FV evidence: mean of features at valid projections and
/// the encoded mean valid pixel. Both rows are zero for lanes with no valid point.
struct LaneAlignment {
  Tensor features;    // [N, C]
  Tensor positional;  // [N, C]
  std::vector<std::size_t> valid_counts;
};

LaneAlignment l2t_align(const Tensor& curves, const geom::CameraModel& cam, const FeatureGrid& fv,
                        const L2THead& head);

/// curves [N, 4, 3] world; te_boxes [M, 4] normalised (cx, cy, w, h).
AdjacencyLogits l2t_align_and_predict(const Tensor& q_lane, const Tensor& curves,
                                      const geom::CameraModel& cam, const FeatureGrid& fv,
                                      const Tensor& q_te, const Tensor& te_boxes, const L2THead& head);

}  // namespace reltopo::topo

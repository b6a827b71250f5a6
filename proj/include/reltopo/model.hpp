#pragma once

#include <cstdint>
#include <vector>

#include "reltopo/attention.hpp"
#include "reltopo/topology.hpp"

namespace reltopo {

struct LaneDecoderConfig {
  std::size_t layers = 2;
  std::size_t queries = 20;
  std::size_t channels = 32;
  std::size_t heads = 4;
  std::size_t offsets = 2;
  std::size_t samples = 11;
  std::size_t ffn_hidden = 64;
  std::size_t ge_hidden = 32;
  bool normalized_coordinates = true;
  geom::SinusoidalConfig geometry_encoding{16, 10000.0, 1.0};

  void validate() const;
};

struct TeDecoderConfig {
  std::size_t queries = 8;
  std::size_t classes = 2;
};

/// Component switches for the ablation harness.
struct AblationFlags {
  bool plain_sa = false;
  bool no_curve_ca = false;  // control points stand in for the on-curve references
  bool baseline_l2l = false;
  bool baseline_l2t = false;
  bool no_contrastive = false;  // consumed by the loss
  bool per_point_normalization = false;
  bool zero_attention = false;  // diagnostic: attention outputs dropped
};

struct ModelConfig {
  LaneDecoderConfig lane;
  TeDecoderConfig te;
  topo::TopologyConfig topology;
  AblationFlags flags;
  Extent bev_extent{0.0, 64.0, -16.0, 16.0};
  double z_min = -2.0, z_max = 2.0;
  std::size_t bev_channels = 5;
  std::size_t fv_channels = 3;
  int image_width = 480, image_height = 240;
  /// Topology heads see lane and box geometry without passing gradients back into it.
  bool detach_topology_geometry = true;
  // Topology heads read decoder queries without sending gradient back into
  // the decoders; at toy width the topology loss otherwise swamps lane fitting.
  bool detach_topology_queries = true;
};

struct DecoderLayer {
  attn::MultiHeadAttention sa;
  attn::GeometryBiasParams bias;  // unused by the traffic-element decoder
  attn::DeformableAttentionParams ca;
  nn::LayerNorm norm1, norm2, norm3;
  nn::Mlp ffn;
  nn::Linear reg;
  nn::Linear cls;
};

struct Model {
  ModelConfig config;
  ParameterSet params;

  Tensor lane_queries;     // [N_lane, C]
  nn::Linear lane_ref;     // C -> 12 reference-curve logits
  nn::Linear lane_pos;     // 12 -> C positional embedding of the current curve
  nn::Linear bev_in;       // BEV channels -> C
  std::vector<DecoderLayer> lane_layers;

  Tensor te_queries;
  nn::Linear te_ref;       // C -> 4 reference-box logits
  nn::Linear te_pos;       // 4 -> C
  nn::Linear fv_in;
  std::vector<DecoderLayer> te_layers;

  topo::L2LHead l2l;
  topo::L2THead l2t;
  topo::BaselinePairHead l2l_baseline;
  topo::BaselinePairHead l2t_baseline;

  static Model create(const ModelConfig& config, std::uint64_t seed);
};

struct LanePredictions {
  std::vector<Tensor> curves;      // per layer [N, 4, 3] world meters
  std::vector<Tensor> logits;      // per layer [N, 1]
  Tensor queries;                  // final Q_lane [N, C]
  Tensor starts, ends;             // final P_lane [N, 3]

  /// Detached lanes of one layer with sigmoid confidences.
  std::vector<geom::BezierLane> lanes(std::size_t layer) const;
};

struct TePredictions {
  std::vector<Tensor> boxes;   // per layer [M, 4] normalised (cx, cy, w, h)
  std::vector<Tensor> logits;  // per layer [M, classes]
  Tensor queries;
};

struct ForwardOutput {
  LanePredictions lanes;
  TePredictions tes;
  topo::AdjacencyLogits l2l;
  topo::AdjacencyLogits l2t;
};

/// Maps curve logits [N, 12] into world control points [N, 4, 3].
Tensor curves_from_logits(const Tensor& logits, const ModelConfig& cfg);

LanePredictions lane_decoder_forward(const Model& model, const FeatureGrid& bev);
TePredictions te_decoder_forward(const Model& model, const FeatureGrid& fv);
ForwardOutput full_forward(const Model& model, const FeatureGrid& bev, const FeatureGrid& fv,
                           const geom::CameraModel& cam);

}  // namespace reltopo

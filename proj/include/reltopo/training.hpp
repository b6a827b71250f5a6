#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "reltopo/model.hpp"
#include "reltopo/optim.hpp"
#include "reltopo/scenes.hpp"

namespace reltopo::train {

struct LossWeights {
  double te_cls = 2.0;        // lambda 1
  double te_l1 = 5.0;         // lambda 2
  double te_giou = 2.0;       // lambda 3
  double lane_cls = 1.5;      // lambda 4
  double lane_l1 = 0.05;      // lambda 5
  double lane_chamfer = 0.02; // lambda 6
  double topo_cls = 5.0;      // lambda 7
  double contrastive = 0.1;   // lambda 8

  void validate() const;
};

struct MatchResult {
  std::vector<int> assignment;  // prediction -> ground truth, -1 when unmatched
  double total_cost = 0.0;
};

/// Minimum-cost injective assignment for a rectangular P x G cost matrix.
MatchResult hungarian_match(const Eigen::MatrixXd& cost);

enum class Reduction { Mean, Sum };

/// Binary focal loss on logits; targets must be 0 or 1.
Tensor focal_loss(const Tensor& logits, const Tensor& targets, double alpha = 0.25, double gamma = 2.0,
                  Reduction reduction = Reduction::Mean);

/// Boxes [B, 4] as (cx, cy, w, h) -> per-pair 1 - GIoU, shape [B].
Tensor giou_loss(const Tensor& pred, const Tensor& gt);
double giou_loss(const Eigen::Vector4d& pred, const Eigen::Vector4d& gt);

/// Control points [B, 4, 3] -> per-pair symmetric Chamfer over K samples, shape [B].
Tensor bezier_chamfer_loss(const Tensor& pred, const Tensor& gt, std::size_t samples = 11);

using Adjacency = scenes::Adjacency;

/// Multi-positive InfoNCE over rows and columns with hard-negative mining.
Tensor infonce_topology_loss(const Tensor& logits, const Adjacency& gt, std::size_t n_neg = 3);

/// Single-positive form: log(1 + sum_neg exp(v- - v+)).
Tensor infonce_single(const Tensor& positive, const Tensor& negatives);

struct SceneTargets {
  Tensor lane_curves;  // [G, 4, 3]
  std::vector<geom::BezierLane> lanes;
  Tensor te_boxes;     // [T, 4] normalised
  std::vector<int> te_classes;
  Adjacency adj_l2l;
  Adjacency adj_l2t;
};

SceneTargets make_targets(const scenes::Scene& scene);

struct LossOptions {
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  std::size_t samples = 11;
  std::size_t n_neg = 3;
  bool contrastive = true;
  bool topology_every_layer = false;
};

struct LossResult {
  Tensor total;
  std::vector<std::pair<std::string, Tensor>> terms;  // weighted, summed over layers
  std::vector<MatchResult> lane_matches;  // per layer
  std::vector<MatchResult> te_matches;
};

/// Names of the loss terms in breakdown order.
const std::vector<std::string>& loss_term_names();

LossResult total_loss(const ForwardOutput& out, const SceneTargets& targets, const LossWeights& weights,
                      const LossOptions& options);

/// Scene with its rasters and targets, prepared once for training.
struct PreparedScene {
  scenes::Scene scene;
  scenes::Rasters grids;
  SceneTargets targets;
};

PreparedScene prepare(const scenes::Scene& scene, const scenes::SceneConfig& cfg);

struct TrainConfig {
  std::uint64_t steps = 500;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  AdamWConfig optim{.base_lr = 2e-3};  // toy-scale rate, see README
  double grad_clip = 0.0;  // max global norm, 0 disables
};

struct StepRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  std::vector<double> terms;
  double total = 0.0;
};

using StepCallback = std::function<void(const StepRecord&, const Model&)>;

/// Seeded shuffling, AdamW with cosine decay. Writes one log line per step
/// when `log` is given. NaN or Inf in any term aborts with NumericError.
std::vector<StepRecord> train(Model& model, const std::vector<PreparedScene>& data, const TrainConfig& cfg,
                              const LossWeights& weights, const LossOptions& options, std::ostream* log = nullptr,
                              const StepCallback& callback = {});

}  // namespace reltopo::train

#pragma once

#include <Eigen/Core>

#include <array>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "reltopo/geometry.hpp"
#include "reltopo/model.hpp"
#include "reltopo/scenes.hpp"

namespace reltopo::eval {

inline constexpr std::array<double, 3> kFrechetThresholds{1.0, 2.0, 3.0};
inline constexpr double kIouThreshold = 0.75;
inline constexpr int kFrechetSamples = 11;

/// Precision-recall curve plus all-point interpolated AP.
struct ApResult {
  double ap = 0.0;
  std::vector<double> precision, recall;  // one entry per ranked prediction
  std::size_t true_positives = 0, false_positives = 0, num_gt = 0;
  bool empty_convention = false;  // no GT and no predictions: AP reported as 1
};

/// `hits` ranked by descending score. AP = sum over recall steps of the
/// precision envelope (max precision at any later rank).
ApResult average_precision(const std::vector<bool>& hits, std::size_t num_gt);

struct RankedHit {
  double score;
  bool hit;
  std::size_t group, index;  // tie-break keys
};
/// Sorts by score (desc), then group, then index, and computes AP.
ApResult average_precision(std::vector<RankedHit> ranked, std::size_t num_gt);

/// Traffic-element detection in FV pixels.
struct TeDetection {
  double cx = 0.0, cy = 0.0, w = 1.0, h = 1.0;
  int class_id = 0;
  double confidence = 1.0;
};

double box_iou(const TeDetection& a, const TeDetection& b);

/// Everything the metrics need about one scene's predictions.
struct ScenePrediction {
  std::vector<geom::BezierLane> lanes;  // confidence in BezierLane::confidence
  std::vector<TeDetection> tes;
  Eigen::MatrixXd l2l;                  // [lanes, lanes] edge probabilities
  Eigen::MatrixXd l2t;                  // [lanes, tes]
};

/// Runs the model and converts its final-layer outputs. TE class is the
/// argmax of the class probabilities and confidence is that probability.
ScenePrediction predict(const Model& model, const scenes::Scene& scene, const scenes::Rasters& grids);

/// Ground truth in prediction form: confidences 1, adjacency 0/1.
ScenePrediction ground_truth_prediction(const scenes::Scene& scene);

/// Greedy confidence-ordered one-to-one matching. pred_to_gt[i] = -1 when unmatched.
struct Matching {
  std::vector<int> pred_to_gt;
  std::vector<int> gt_to_pred;
};

/// Lane i matches the unmatched GT with the smallest discrete Fréchet
/// distance strictly below `threshold`.
Matching match_lanes(const std::vector<geom::BezierLane>& pred, const std::vector<geom::BezierLane>& gt,
                     double threshold, int samples = kFrechetSamples);
/// Same-class, IoU >= threshold, best IoU first.
Matching match_tes(const std::vector<TeDetection>& pred, const std::vector<scenes::TrafficElement>& gt,
                   double threshold = kIouThreshold);

enum class TopologyKind { L2L, L2T };

/// Per-vertex topology AP accumulated over scenes.
struct TopologyAccumulator {
  double ap_sum = 0.0;
  std::size_t vertices = 0;
  /// Adds one scene. Predicted scores are routed to GT index pairs through
  /// the matchings; pairs involving an unmatched GT instance are left out of
  /// the ranking but their edges still count as positives. Every
  /// GT row vertex and column vertex with at least one edge ranks all of its
  /// candidate partners (self excluded for L2L), ties by ascending index.
  void add(const Eigen::MatrixXd& scores, const Matching& rows, const Matching& cols, const scenes::Adjacency& gt,
           TopologyKind kind);
  double value() const { return vertices == 0 ? 0.0 : ap_sum / static_cast<double>(vertices); }
  bool undefined() const { return vertices == 0; }
};

/// ¼·(DET_l + DET_t + sqrt(TOP_ll) + sqrt(TOP_lt)); throws ConfigError outside [0, 1].
double ols(double det_l, double det_t, double top_ll, double top_lt);

struct MetricsReport {
  double det_l = 0.0, det_t = 0.0, top_ll = 0.0, top_lt = 0.0, ols = 0.0;
  std::array<double, 3> det_l_at{};  // per Fréchet threshold
  std::vector<std::pair<int, double>> det_t_per_class;
  std::size_t scenes = 0;
  std::size_t gt_lanes = 0, pred_lanes = 0, matched_lanes = 0;  // matching at 1.0 m
  std::size_t gt_tes = 0, pred_tes = 0, matched_tes = 0;
  std::size_t top_ll_vertices = 0, top_lt_vertices = 0;
  bool lanes_empty_convention = false, tes_empty_convention = false;
  bool top_ll_undefined = false, top_lt_undefined = false;
  ApResult det_l_curve;  // at 1.0 m, for plotting
  std::vector<double> matched_scores, unmatched_scores;  // lane confidences at 1.0 m

  /// key = value lines in a fixed order.
  void write_text(std::ostream& os) const;
  static std::string csv_header();
  std::string csv_row() const;
};

struct EvalItem {
  const scenes::Scene* scene;
  const ScenePrediction* prediction;
};

/// Pools predictions over scenes: detection APs rank every prediction of
/// every scene together; topology APs average over all qualifying vertices.
MetricsReport evaluate(const std::vector<EvalItem>& items);

}  // namespace reltopo::eval

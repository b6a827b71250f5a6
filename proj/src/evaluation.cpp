#include "reltopo/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "reltopo/error.hpp"

namespace reltopo::eval {

ApResult average_precision(const std::vector<bool>& hits, std::size_t num_gt) {
  ApResult r;
  r.num_gt = num_gt;
  if (num_gt == 0) {
    r.false_positives = hits.size();
    r.empty_convention = hits.empty();
    r.ap = hits.empty() ? 1.0 : 0.0;
    return r;
  }
  for (bool h : hits) {
    (h ? r.true_positives : r.false_positives) += 1;
    const double tp = static_cast<double>(r.true_positives);
    r.precision.push_back(tp / static_cast<double>(r.true_positives + r.false_positives));
    r.recall.push_back(tp / static_cast<double>(num_gt));
  }
  if (r.true_positives > num_gt) throw ConfigError("average_precision: more hits than ground truth");
  std::vector<double> envelope = r.precision;
  for (std::size_t k = envelope.size(); k-- > 1;) envelope[k - 1] = std::max(envelope[k - 1], envelope[k]);
  double prev = 0.0;
  for (std::size_t k = 0; k < envelope.size(); ++k) {
    r.ap += (r.recall[k] - prev) * envelope[k];
    prev = r.recall[k];
  }
  return r;
}

ApResult average_precision(std::vector<RankedHit> ranked, std::size_t num_gt) {
  std::stable_sort(ranked.begin(), ranked.end(), [](const RankedHit& a, const RankedHit& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.group != b.group) return a.group < b.group;
    return a.index < b.index;
  });
  std::vector<bool> hits;
  hits.reserve(ranked.size());
  for (const auto& r : ranked) hits.push_back(r.hit);
  return average_precision(hits, num_gt);
}

double box_iou(const TeDetection& a, const TeDetection& b) {
  const double iw = std::min(a.cx + a.w / 2, b.cx + b.w / 2) - std::max(a.cx - a.w / 2, b.cx - b.w / 2);
  const double ih = std::min(a.cy + a.h / 2, b.cy + b.h / 2) - std::max(a.cy - a.h / 2, b.cy - b.h / 2);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Eigen::MatrixXd sigmoid_matrix(const Tensor& t) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  const auto d = t.data();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = sigmoid(d[static_cast<std::size_t>(i * m.cols() + j)]);
  return m;
}

// Prediction indices by descending confidence, ties by index.
template <typename F>
std::vector<std::size_t> confidence_order(std::size_t n, F&& conf) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return conf(a) > conf(b); });
  return order;
}

TeDetection as_detection(const scenes::TrafficElement& te) { return {te.cx, te.cy, te.w, te.h, te.class_id, 1.0}; }

}  // namespace

ScenePrediction predict(const Model& model, const scenes::Scene& scene, const scenes::Rasters& grids) {
  const ForwardOutput out = full_forward(model, grids.bev, grids.fv, scene.camera);
  ScenePrediction p;
  p.lanes = out.lanes.lanes(out.lanes.curves.size() - 1);
  const Tensor& boxes = out.tes.boxes.back();
  const Tensor& logits = out.tes.logits.back();
  const std::size_t classes = logits.dim(1);
  const auto bd = boxes.data();
  const auto ld = logits.data();
  for (std::size_t i = 0; i < boxes.dim(0); ++i) {
    TeDetection d;
    d.cx = bd[i * 4] * scene.camera.width;
    d.cy = bd[i * 4 + 1] * scene.camera.height;
    d.w = bd[i * 4 + 2] * scene.camera.width;
    d.h = bd[i * 4 + 3] * scene.camera.height;
    d.confidence = -1.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double prob = sigmoid(ld[i * classes + c]);
      if (prob > d.confidence) {
        d.confidence = prob;
        d.class_id = static_cast<int>(c);
      }
    }
    p.tes.push_back(d);
  }
  p.l2l = sigmoid_matrix(out.l2l.logits);
  p.l2t = sigmoid_matrix(out.l2t.logits);
  return p;
}

ScenePrediction ground_truth_prediction(const scenes::Scene& scene) {
  ScenePrediction p;
  p.lanes = scene.lanes;
  for (auto& l : p.lanes) l.confidence = 1.0;
  for (const auto& te : scene.traffic_elements) p.tes.push_back(as_detection(te));
  const auto n = static_cast<Eigen::Index>(scene.lanes.size());
  const auto m = static_cast<Eigen::Index>(scene.traffic_elements.size());
  p.l2l = Eigen::MatrixXd::Zero(n, n);
  p.l2t = Eigen::MatrixXd::Zero(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) p.l2l(i, j) = scene.adj_l2l[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    for (Eigen::Index j = 0; j < m; ++j) p.l2t(i, j) = scene.adj_l2t[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return p;
}

Matching match_lanes(const std::vector<geom::BezierLane>& pred, const std::vector<geom::BezierLane>& gt,
                     double threshold, int samples) {
  Matching m{std::vector<int>(pred.size(), -1), std::vector<int>(gt.size(), -1)};
  std::vector<geom::Points<double>> gs;
  for (const auto& g : gt) gs.push_back(geom::bezier_sample(g, samples));
  for (std::size_t i : confidence_order(pred.size(), [&](std::size_t k) { return pred[k].confidence; })) {
    const auto ps = geom::bezier_sample(pred[i], samples);
    double best = threshold;
    int pick = -1;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (m.gt_to_pred[j] >= 0) continue;
      const double d = geom::discrete_frechet(ps, gs[j]);
      if (d < best) {
        best = d;
        pick = static_cast<int>(j);
      }
    }
    if (pick >= 0) {
      m.pred_to_gt[i] = pick;
      m.gt_to_pred[static_cast<std::size_t>(pick)] = static_cast<int>(i);
    }
  }
  return m;
}

Matching match_tes(const std::vector<TeDetection>& pred, const std::vector<scenes::TrafficElement>& gt,
                   double threshold) {
  Matching m{std::vector<int>(pred.size(), -1), std::vector<int>(gt.size(), -1)};
  for (std::size_t i : confidence_order(pred.size(), [&](std::size_t k) { return pred[k].confidence; })) {
    double best = -1.0;
    int pick = -1;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (m.gt_to_pred[j] >= 0 || gt[j].class_id != pred[i].class_id) continue;
      const double iou = box_iou(pred[i], as_detection(gt[j]));
      if (iou >= threshold && iou > best) {
        best = iou;
        pick = static_cast<int>(j);
      }
    }
    if (pick >= 0) {
      m.pred_to_gt[i] = pick;
      m.gt_to_pred[static_cast<std::size_t>(pick)] = static_cast<int>(i);
    }
  }
  return m;
}

void TopologyAccumulator::add(const Eigen::MatrixXd& scores, const Matching& rows, const Matching& cols,
                              const scenes::Adjacency& gt, TopologyKind kind) {
  const std::size_t gr = rows.gt_to_pred.size(), gc = cols.gt_to_pred.size();
  if (gt.size() != gr) throw DataError("topology: ground-truth rows do not match the row matching");
  if (scores.rows() != static_cast<Eigen::Index>(rows.pred_to_gt.size()) ||
      scores.cols() != static_cast<Eigen::Index>(cols.pred_to_gt.size())) {
    throw DataError("topology: score matrix does not match the predictions");
  }
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(gr), static_cast<Eigen::Index>(gc));
  for (std::size_t i = 0; i < gr; ++i) {
    if (gt[i].size() != gc) throw DataError("topology: ground-truth row length mismatch");
    for (std::size_t j = 0; j < gc; ++j) {
      if (rows.gt_to_pred[i] >= 0 && cols.gt_to_pred[j] >= 0) {
        s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = scores(rows.gt_to_pred[i], cols.gt_to_pred[j]);
      }
    }
  }
  const bool self = kind == TopologyKind::L2L;
  auto vertex = [&](std::size_t v, bool is_row) {
    std::vector<RankedHit> ranked;
    std::size_t edges = 0;
    const std::size_t n = is_row ? gc : gr;
    for (std::size_t k = 0; k < n; ++k) {
      if (self && k == v) continue;
      const std::size_t i = is_row ? v : k, j = is_row ? k : v;
      const bool edge = gt[i][j] != 0;
      edges += edge;
      // No prediction for one end: the pair is never retrieved.
      if (rows.gt_to_pred[i] < 0 || cols.gt_to_pred[j] < 0) continue;
      ranked.push_back({s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), edge, 0, k});
    }
    if (edges == 0) return;
    ap_sum += average_precision(std::move(ranked), edges).ap;
    ++vertices;
  };
  for (std::size_t i = 0; i < gr; ++i) vertex(i, true);
  for (std::size_t j = 0; j < gc; ++j) vertex(j, false);
}

double ols(double det_l, double det_t, double top_ll, double top_lt) {
  for (double v : {det_l, det_t, top_ll, top_lt}) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("ols: components must lie in [0, 1]");
  }
  return 0.25 * (det_l + det_t + std::sqrt(top_ll) + std::sqrt(top_lt));
}

MetricsReport evaluate(const std::vector<EvalItem>& items) {
  MetricsReport r;
  r.scenes = items.size();
  std::vector<Matching> lane_match(items.size()), te_match(items.size());

  for (std::size_t t = 0; t < kFrechetThresholds.size(); ++t) {
    std::vector<RankedHit> ranked;
    std::size_t num_gt = 0;
    for (std::size_t s = 0; s < items.size(); ++s) {
      const auto& pred = items[s].prediction->lanes;
      const auto& gt = items[s].scene->lanes;
      const Matching m = match_lanes(pred, gt, kFrechetThresholds[t]);
      for (std::size_t i = 0; i < pred.size(); ++i) ranked.push_back({pred[i].confidence, m.pred_to_gt[i] >= 0, s, i});
      num_gt += gt.size();
      if (t == 0) lane_match[s] = m;
    }
    const ApResult ap = average_precision(std::move(ranked), num_gt);
    r.det_l_at[t] = ap.ap;
    if (t == 0) {
      r.det_l_curve = ap;
      r.lanes_empty_convention = ap.empty_convention;
      r.gt_lanes = num_gt;
      r.matched_lanes = ap.true_positives;
      r.pred_lanes = ap.true_positives + ap.false_positives;
    }
  }
  r.det_l = (r.det_l_at[0] + r.det_l_at[1] + r.det_l_at[2]) / 3.0;
  for (std::size_t s = 0; s < items.size(); ++s) {
    const auto& pred = items[s].prediction->lanes;
    for (std::size_t i = 0; i < pred.size(); ++i)
      (lane_match[s].pred_to_gt[i] >= 0 ? r.matched_scores : r.unmatched_scores).push_back(pred[i].confidence);
  }

  std::set<int> classes;
  for (std::size_t s = 0; s < items.size(); ++s) {
    const auto& pred = items[s].prediction->tes;
    const auto& gt = items[s].scene->traffic_elements;
    te_match[s] = match_tes(pred, gt);
    for (const auto& te : gt) classes.insert(te.class_id);
    r.gt_tes += gt.size();
    r.pred_tes += pred.size();
    for (int g : te_match[s].gt_to_pred) r.matched_tes += g >= 0;
  }
  if (classes.empty()) {
    r.tes_empty_convention = r.pred_tes == 0;
    r.det_t = r.tes_empty_convention ? 1.0 : 0.0;
  } else {
    double sum = 0.0;
    for (int c : classes) {
      std::vector<RankedHit> ranked;
      std::size_t num_gt = 0;
      for (std::size_t s = 0; s < items.size(); ++s) {
        const auto& pred = items[s].prediction->tes;
        for (std::size_t i = 0; i < pred.size(); ++i)
          if (pred[i].class_id == c) ranked.push_back({pred[i].confidence, te_match[s].pred_to_gt[i] >= 0, s, i});
        for (const auto& te : items[s].scene->traffic_elements) num_gt += te.class_id == c;
      }
      const double ap = average_precision(std::move(ranked), num_gt).ap;
      r.det_t_per_class.emplace_back(c, ap);
      sum += ap;
    }
    r.det_t = sum / static_cast<double>(classes.size());
  }

  TopologyAccumulator ll, lt;
  for (std::size_t s = 0; s < items.size(); ++s) {
    const auto& p = *items[s].prediction;
    ll.add(p.l2l, lane_match[s], lane_match[s], items[s].scene->adj_l2l, TopologyKind::L2L);
    lt.add(p.l2t, lane_match[s], te_match[s], items[s].scene->adj_l2t, TopologyKind::L2T);
  }
  r.top_ll = ll.value();
  r.top_lt = lt.value();
  r.top_ll_vertices = ll.vertices;
  r.top_lt_vertices = lt.vertices;
  r.top_ll_undefined = ll.undefined();
  r.top_lt_undefined = lt.undefined();
  r.ols = ols(r.det_l, r.det_t, r.top_ll, r.top_lt);
  return r;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10f", v);
  return buf;
}

}  // namespace

void MetricsReport::write_text(std::ostream& os) const {
  os << "DET_l = " << fmt(det_l) << "\n";
  for (std::size_t t = 0; t < kFrechetThresholds.size(); ++t) {
    char key[32];
    std::snprintf(key, sizeof key, "DET_l@%.1fm", kFrechetThresholds[t]);
    os << key << " = " << fmt(det_l_at[t]) << "\n";
  }
  os << "DET_t = " << fmt(det_t) << "\n";
  for (const auto& [c, ap] : det_t_per_class) os << "DET_t.class" << c << " = " << fmt(ap) << "\n";
  os << "TOP_ll = " << fmt(top_ll) << "\n"
     << "TOP_lt = " << fmt(top_lt) << "\n"
     << "OLS = " << fmt(ols) << "\n"
     << "scenes = " << scenes << "\n"
     << "gt_lanes = " << gt_lanes << "\n"
     << "pred_lanes = " << pred_lanes << "\n"
     << "matched_lanes@1.0m = " << matched_lanes << "\n"
     << "gt_tes = " << gt_tes << "\n"
     << "pred_tes = " << pred_tes << "\n"
     << "matched_tes = " << matched_tes << "\n"
     << "top_ll_vertices = " << top_ll_vertices << "\n"
     << "top_lt_vertices = " << top_lt_vertices << "\n"
     << "flag.lanes_empty_gt = " << lanes_empty_convention << "\n"
     << "flag.tes_empty_gt = " << tes_empty_convention << "\n"
     << "flag.top_ll_no_gt_edges = " << top_ll_undefined << "\n"
     << "flag.top_lt_no_gt_edges = " << top_lt_undefined << "\n";
}

std::string MetricsReport::csv_header() { return "DET_l,DET_l@1m,DET_l@2m,DET_l@3m,DET_t,TOP_ll,TOP_lt,OLS"; }

std::string MetricsReport::csv_row() const {
  std::ostringstream os;
  os << fmt(det_l) << ',' << fmt(det_l_at[0]) << ',' << fmt(det_l_at[1]) << ',' << fmt(det_l_at[2]) << ','
     << fmt(det_t) << ',' << fmt(top_ll) << ',' << fmt(top_lt) << ',' << fmt(ols);
  return os.str();
}

}  // namespace reltopo::eval

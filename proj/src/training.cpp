#include "reltopo/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

#include "reltopo/attention.hpp"
#include "reltopo/error.hpp"
#include "reltopo/parallel.hpp"

namespace reltopo::train {

namespace {

Tensor with_axis(const Tensor& t) {
  Shape s = t.shape();
  s.push_back(1);
  return reshape(t, s);
}

Tensor minimum(const Tensor& a, const Tensor& b) { return reduce_min(concat({with_axis(a), with_axis(b)}, a.rank()), a.rank()); }
Tensor maximum(const Tensor& a, const Tensor& b) { return reduce_max(concat({with_axis(a), with_axis(b)}, a.rank()), a.rank()); }

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Focal-style matching cost of labelling a logit positive.
double focal_cost(double logit, double alpha, double gamma) {
  const double p = sigmoid_d(logit);
  constexpr double eps = 1e-12;
  const double pos = alpha * std::pow(1.0 - p, gamma) * -std::log(p + eps);
  const double neg = (1.0 - alpha) * std::pow(p, gamma) * -std::log(1.0 - p + eps);
  return pos - neg;
}

Tensor box_corners(const Tensor& b, std::size_t lo_axis, bool upper) {
  const Tensor c = slice(b, 1, lo_axis, lo_axis + 1);
  const Tensor half = scale(slice(b, 1, lo_axis + 2, lo_axis + 3), 0.5);
  return upper ? add(c, half) : sub(c, half);
}

template <typename F>
Tensor guarded(const char* name, F&& compute) {
  try {
    return compute();
  } catch (const NumericError& e) {
    throw NumericError(std::string("non-finite loss term '") + name + "': " + e.what());
  }
}

Tensor matched_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  return index_rows(t, rows);
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {te_cls, te_l1, te_giou, lane_cls, lane_l1, lane_chamfer, topo_cls, contrastive}) {
    if (!(w >= 0.0)) throw ConfigError("loss weights must be non-negative");
  }
}

MatchResult hungarian_match(const Eigen::MatrixXd& cost) {
  if (!cost.allFinite()) throw NumericError("hungarian_match: non-finite cost");
  const Eigen::Index rows = cost.rows(), cols = cost.cols();
  MatchResult result;
  result.assignment.assign(static_cast<std::size_t>(rows), -1);
  if (rows == 0 || cols == 0) return result;
  const bool flip = rows > cols;
  const Eigen::MatrixXd a = flip ? Eigen::MatrixXd(cost.transpose()) : cost;
  const int n = static_cast<int>(a.rows()), m = static_cast<int>(a.cols());
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(m) + 1, 0), way(static_cast<std::size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m) + 1, inf);
    std::vector<bool> used(static_cast<std::size_t>(m) + 1, false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        if (used[ju]) continue;
        const double cur = a(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[ju];
        if (cur < minv[ju]) {
          minv[ju] = cur;
          way[ju] = j0;
        }
        if (minv[ju] < delta) {
          delta = minv[ju];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        if (used[ju]) {
          u[static_cast<std::size_t>(p[ju])] += delta;
          v[ju] -= delta;
        } else {
          minv[ju] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  for (int j = 1; j <= m; ++j) {
    const int i = p[static_cast<std::size_t>(j)];
    if (i == 0) continue;
    if (flip) {
      result.assignment[static_cast<std::size_t>(j - 1)] = i - 1;
    } else {
      result.assignment[static_cast<std::size_t>(i - 1)] = j - 1;
    }
  }
  for (std::size_t r = 0; r < result.assignment.size(); ++r) {
    if (result.assignment[r] >= 0) result.total_cost += cost(static_cast<Eigen::Index>(r), result.assignment[r]);
  }
  return result;
}

Tensor focal_loss(const Tensor& logits, const Tensor& targets, double alpha, double gamma, Reduction reduction) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("focal_loss: logits " + shape_string(logits.shape()) + " vs targets " +
                     shape_string(targets.shape()));
  }
  for (double t : targets.data()) {
    if (t != 0.0 && t != 1.0) throw DataError("focal_loss: targets must be 0 or 1");
  }
  const Tensor t = targets.detach();
  const Tensor one_minus_t = add_scalar(neg(t), 1.0);
  Tensor pos_mod = Tensor::full(logits.shape(), 1.0), neg_mod = pos_mod;
  if (gamma != 0.0) {
    pos_mod = pow(sigmoid(neg(logits)), gamma);  // (1 - p)^gamma
    neg_mod = pow(sigmoid(logits), gamma);       // p^gamma
  }
  const Tensor pos = scale(mul(mul(t, pos_mod), log_sigmoid(logits)), -alpha);
  const Tensor negative = scale(mul(mul(one_minus_t, neg_mod), log_sigmoid(neg(logits))), -(1.0 - alpha));
  const Tensor total = sum(add(pos, negative));
  return reduction == Reduction::Sum ? total : scale(total, 1.0 / static_cast<double>(std::max<std::size_t>(logits.numel(), 1)));
}

Tensor giou_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.rank() != 2 || pred.dim(1) != 4 || pred.shape() != gt.shape()) {
    throw ShapeError("giou_loss: boxes " + shape_string(pred.shape()) + " vs " + shape_string(gt.shape()));
  }
  for (const Tensor* b : {&pred, &gt}) {
    const auto d = b->data();
    for (std::size_t i = 0; i < b->dim(0); ++i) {
      if (!(d[i * 4 + 2] > 0.0 && d[i * 4 + 3] > 0.0)) throw DataError("giou_loss: boxes need positive width and height");
    }
  }
  const std::size_t b = pred.dim(0);
  const Tensor px0 = box_corners(pred, 0, false), px1 = box_corners(pred, 0, true);
  const Tensor py0 = box_corners(pred, 1, false), py1 = box_corners(pred, 1, true);
  const Tensor gx0 = box_corners(gt, 0, false), gx1 = box_corners(gt, 0, true);
  const Tensor gy0 = box_corners(gt, 1, false), gy1 = box_corners(gt, 1, true);
  const Tensor iw = relu(sub(minimum(px1, gx1), maximum(px0, gx0)));
  const Tensor ih = relu(sub(minimum(py1, gy1), maximum(py0, gy0)));
  const Tensor inter = mul(iw, ih);
  const Tensor area_p = mul(slice(pred, 1, 2, 3), slice(pred, 1, 3, 4));
  const Tensor area_g = mul(slice(gt, 1, 2, 3), slice(gt, 1, 3, 4));
  const Tensor uni = sub(add(area_p, area_g), inter);
  const Tensor hull = mul(sub(maximum(px1, gx1), minimum(px0, gx0)), sub(maximum(py1, gy1), minimum(py0, gy0)));
  const Tensor giou = sub(div(inter, uni), div(sub(hull, uni), hull));
  return reshape(add_scalar(neg(giou), 1.0), {b});
}

double giou_loss(const Eigen::Vector4d& pred, const Eigen::Vector4d& gt) {
  return giou_loss(Tensor({1, 4}, {pred[0], pred[1], pred[2], pred[3]}), Tensor({1, 4}, {gt[0], gt[1], gt[2], gt[3]})).item();
}

Tensor bezier_chamfer_loss(const Tensor& pred, const Tensor& gt, std::size_t samples) {
  if (pred.shape() != gt.shape() || pred.rank() != 3) {
    throw ShapeError("bezier_chamfer_loss: " + shape_string(pred.shape()) + " vs " + shape_string(gt.shape()));
  }
  const std::size_t b = pred.dim(0), k = samples;
  const Tensor a = attn::sample_curves(pred, k);
  const Tensor g = attn::sample_curves(gt, k);
  const Tensor d = norm_lastdim(sub(reshape(a, {b, k, 1, 3}), reshape(g, {b, 1, k, 3})));  // [B, K, K]
  const Tensor ab = mean(reduce_min(d, 2), 1);
  const Tensor ba = mean(reduce_min(d, 1), 1);
  return scale(add(ab, ba), 0.5);
}

Tensor infonce_single(const Tensor& positive, const Tensor& negatives) {
  // log(1 + sum exp(v- - v+)) = logsumexp([v+, v-...]) - v+
  const Tensor all = concat({reshape(positive, {1}), reshape(negatives, {negatives.numel()})}, 0);
  const auto d = all.data();
  const double m = *std::max_element(d.begin(), d.end());
  return sub(add_scalar(log(sum(exp(add_scalar(all, -m)))), m), reshape(positive, {}));
}

namespace {

// One line of the multi-positive loss: log(1 + sum_{+} sum_{-} exp(v- - v+)), stabilised.
Tensor line_loss(const Tensor& flat, const std::vector<std::size_t>& pos, const std::vector<std::size_t>& neg) {
  const Tensor vp = gather(flat, pos);
  const Tensor vn = gather(flat, neg);
  const Tensor diff = sub(reshape(vn, {1, neg.size()}), reshape(vp, {pos.size(), 1}));
  const auto dd = diff.data();
  const double m = std::max(0.0, *std::max_element(dd.begin(), dd.end()));
  return add_scalar(log(add_scalar(sum(exp(add_scalar(diff, -m))), std::exp(-m))), m);
}

}  // namespace

Tensor infonce_topology_loss(const Tensor& logits, const Adjacency& gt, std::size_t n_neg) {
  if (logits.rank() != 2 || gt.size() != logits.dim(0)) {
    throw ShapeError("infonce_topology_loss: logits " + shape_string(logits.shape()) + " vs " +
                     std::to_string(gt.size()) + " ground-truth rows");
  }
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  for (const auto& row : gt) {
    if (row.size() != m) throw ShapeError("infonce_topology_loss: ground-truth row length mismatch");
    for (auto v : row)
      if (v > 1) throw DataError("infonce_topology_loss: ground truth must be 0 or 1");
  }
  const Tensor flat = reshape(logits, {n * m});
  const auto lv = flat.data();
  std::vector<Tensor> directional;
  for (int dir = 0; dir < 2; ++dir) {
    const std::size_t lines = dir == 0 ? n : m, len = dir == 0 ? m : n;
    std::vector<Tensor> per_line;
    for (std::size_t a = 0; a < lines; ++a) {
      std::vector<std::size_t> pos, neg;
      for (std::size_t b = 0; b < len; ++b) {
        const std::size_t i = dir == 0 ? a : b, j = dir == 0 ? b : a;
        (gt[i][j] ? pos : neg).push_back(i * m + j);
      }
      if (pos.empty() || neg.empty()) continue;
      // Hardest negatives: highest logits, ties by position.
      std::stable_sort(neg.begin(), neg.end(), [&](std::size_t x, std::size_t y) { return lv[x] > lv[y]; });
      if (neg.size() > n_neg) neg.resize(n_neg);
      per_line.push_back(line_loss(flat, pos, neg));
    }
    if (per_line.empty()) continue;
    Tensor acc = per_line[0];
    for (std::size_t k = 1; k < per_line.size(); ++k) acc = add(acc, per_line[k]);
    directional.push_back(scale(acc, 1.0 / static_cast<double>(per_line.size())));
  }
  if (directional.empty()) return Tensor::scalar(0.0);
  if (directional.size() == 1) return directional[0];
  return scale(add(directional[0], directional[1]), 0.5);
}

SceneTargets make_targets(const scenes::Scene& scene) {
  SceneTargets t;
  t.lanes = scene.lanes;
  t.lane_curves = attn::lanes_to_tensor(scene.lanes);
  std::vector<double> boxes;
  const double w = scene.camera.width, h = scene.camera.height;
  for (const auto& te : scene.traffic_elements) {
    boxes.insert(boxes.end(), {te.cx / w, te.cy / h, te.w / w, te.h / h});
    t.te_classes.push_back(te.class_id);
  }
  t.te_boxes = Tensor({scene.traffic_elements.size(), 4}, boxes);
  t.adj_l2l = scene.adj_l2l;
  t.adj_l2t = scene.adj_l2t;
  return t;
}

const std::vector<std::string>& loss_term_names() {
  static const std::vector<std::string> names{"te_cls",  "te_l1",        "te_giou",  "lane_cls",
                                              "lane_l1", "lane_chamfer", "topo_cls", "contrastive"};
  return names;
}

namespace {

MatchResult match_lanes(const Tensor& curves, const Tensor& logits, const SceneTargets& t, const LossWeights& w,
                        const LossOptions& o) {
  const std::size_t p = curves.dim(0), g = t.lanes.size();
  Eigen::MatrixXd cost(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(g));
  const auto cd = curves.data();
  const auto ld = logits.data();
  const auto gd = t.lane_curves.data();
  std::vector<geom::Points<double>> gt_samples;
  for (const auto& l : t.lanes) gt_samples.push_back(geom::bezier_sample(l, static_cast<int>(o.samples)));
  for (std::size_t i = 0; i < p; ++i) {
    geom::BezierLane pl;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 3; ++c) pl.control_points(r, c) = cd[i * 12 + static_cast<std::size_t>(r * 3 + c)];
    const auto ps = geom::bezier_sample(pl, static_cast<int>(o.samples));
    const double cls = focal_cost(ld[i], o.focal_alpha, o.focal_gamma);
    for (std::size_t j = 0; j < g; ++j) {
      double l1 = 0.0;
      for (std::size_t k = 0; k < 12; ++k) l1 += std::fabs(cd[i * 12 + k] - gd[j * 12 + k]);
      cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          w.lane_cls * cls + w.lane_l1 * l1 + w.lane_chamfer * geom::chamfer_distance(ps, gt_samples[j]);
    }
  }
  return hungarian_match(cost);
}

MatchResult match_tes(const Tensor& boxes, const Tensor& logits, const SceneTargets& t, const LossWeights& w,
                      const LossOptions& o) {
  const std::size_t p = boxes.dim(0), g = t.te_classes.size(), k = logits.dim(1);
  Eigen::MatrixXd cost(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(g));
  const auto bd = boxes.data();
  const auto ld = logits.data();
  const auto gd = t.te_boxes.data();
  for (std::size_t i = 0; i < p; ++i) {
    const Eigen::Vector4d pb(bd[i * 4], bd[i * 4 + 1], bd[i * 4 + 2], bd[i * 4 + 3]);
    for (std::size_t j = 0; j < g; ++j) {
      const Eigen::Vector4d gb(gd[j * 4], gd[j * 4 + 1], gd[j * 4 + 2], gd[j * 4 + 3]);
      const double cls = focal_cost(ld[i * k + static_cast<std::size_t>(t.te_classes[j])], o.focal_alpha, o.focal_gamma);
      cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          w.te_cls * cls + w.te_l1 * (pb - gb).cwiseAbs().sum() + w.te_giou * giou_loss(pb, gb);
    }
  }
  return hungarian_match(cost);
}

struct Pairs {
  std::vector<std::size_t> pred, gt;
};

Pairs pairs_of(const MatchResult& m) {
  Pairs p;
  for (std::size_t i = 0; i < m.assignment.size(); ++i) {
    if (m.assignment[i] >= 0) {
      p.pred.push_back(i);
      p.gt.push_back(static_cast<std::size_t>(m.assignment[i]));
    }
  }
  return p;
}

// Routes GT adjacency through the matchings; unmatched slots get no relations.
Adjacency route(const Adjacency& gt, const MatchResult& rows, const MatchResult& cols, std::size_t ncols) {
  Adjacency out(rows.assignment.size(), std::vector<std::uint8_t>(ncols, 0));
  for (std::size_t i = 0; i < rows.assignment.size(); ++i) {
    if (rows.assignment[i] < 0) continue;
    for (std::size_t j = 0; j < ncols; ++j) {
      if (cols.assignment[j] < 0) continue;
      out[i][j] = gt[static_cast<std::size_t>(rows.assignment[i])][static_cast<std::size_t>(cols.assignment[j])];
    }
  }
  return out;
}

Tensor adjacency_tensor(const Adjacency& a, std::size_t rows, std::size_t cols, std::size_t& positives) {
  std::vector<double> v(rows * cols, 0.0);
  positives = 0;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      v[i * cols + j] = a[i][j];
      positives += a[i][j];
    }
  return Tensor({rows, cols}, v);
}

}  // namespace

LossResult total_loss(const ForwardOutput& out, const SceneTargets& t, const LossWeights& w, const LossOptions& o) {
  w.validate();
  const auto& names = loss_term_names();
  std::vector<Tensor> terms(names.size(), Tensor::scalar(0.0));
  LossResult result;
  const std::size_t layers = out.lanes.curves.size();
  const double num_lanes = static_cast<double>(std::max<std::size_t>(t.lanes.size(), 1));
  const double num_tes = static_cast<double>(std::max<std::size_t>(t.te_classes.size(), 1));

  for (std::size_t l = 0; l < layers; ++l) {
    const Tensor& curves = out.lanes.curves[l];
    const Tensor& lane_logits = out.lanes.logits[l];
    const MatchResult lm = match_lanes(curves, lane_logits, t, w, o);
    const Pairs lp = pairs_of(lm);
    std::vector<double> lane_target(curves.dim(0), 0.0);
    for (auto i : lp.pred) lane_target[i] = 1.0;
    terms[3] = add(terms[3], guarded("lane_cls", [&] {
      return scale(focal_loss(lane_logits, Tensor(lane_logits.shape(), lane_target), o.focal_alpha, o.focal_gamma,
                              Reduction::Sum),
                   w.lane_cls / num_lanes);
    }));
    if (!lp.pred.empty()) {
      const Tensor pc = matched_rows(curves, lp.pred);
      const Tensor gc = matched_rows(t.lane_curves, lp.gt);
      terms[4] = add(terms[4], guarded("lane_l1", [&] { return scale(sum(abs(sub(pc, gc))), w.lane_l1 / num_lanes); }));
      terms[5] = add(terms[5], guarded("lane_chamfer", [&] {
        return scale(sum(bezier_chamfer_loss(pc, gc, o.samples)), w.lane_chamfer / num_lanes);
      }));
    }

    const Tensor& boxes = out.tes.boxes[l];
    const Tensor& te_logits = out.tes.logits[l];
    const MatchResult tm = match_tes(boxes, te_logits, t, w, o);
    const Pairs tp = pairs_of(tm);
    std::vector<double> te_target(te_logits.numel(), 0.0);
    for (std::size_t k = 0; k < tp.pred.size(); ++k) {
      te_target[tp.pred[k] * te_logits.dim(1) + static_cast<std::size_t>(t.te_classes[tp.gt[k]])] = 1.0;
    }
    terms[0] = add(terms[0], guarded("te_cls", [&] {
      return scale(focal_loss(te_logits, Tensor(te_logits.shape(), te_target), o.focal_alpha, o.focal_gamma,
                              Reduction::Sum),
                   w.te_cls / num_tes);
    }));
    if (!tp.pred.empty()) {
      const Tensor pb = matched_rows(boxes, tp.pred);
      const Tensor gb = matched_rows(t.te_boxes, tp.gt);
      terms[1] = add(terms[1], guarded("te_l1", [&] { return scale(sum(abs(sub(pb, gb))), w.te_l1 / num_tes); }));
      terms[2] = add(terms[2], guarded("te_giou", [&] { return scale(sum(giou_loss(pb, gb)), w.te_giou / num_tes); }));
    }
    result.lane_matches.push_back(lm);
    result.te_matches.push_back(tm);
  }

  const MatchResult& lm = result.lane_matches.back();
  const MatchResult& tm = result.te_matches.back();
  const std::size_t n = out.l2l.logits.dim(0), m = out.l2t.logits.dim(1);
  const Adjacency l2l = route(t.adj_l2l, lm, lm, n);
  const Adjacency l2t = route(t.adj_l2t, lm, tm, m);
  std::size_t pos_ll = 0, pos_lt = 0;
  const Tensor tll = adjacency_tensor(l2l, n, n, pos_ll);
  const Tensor tlt = adjacency_tensor(l2t, n, m, pos_lt);
  terms[6] = guarded("topo_cls", [&] {
    const Tensor a = scale(focal_loss(out.l2l.logits, tll, o.focal_alpha, o.focal_gamma, Reduction::Sum),
                           1.0 / static_cast<double>(std::max<std::size_t>(pos_ll, 1)));
    const Tensor b = scale(focal_loss(out.l2t.logits, tlt, o.focal_alpha, o.focal_gamma, Reduction::Sum),
                           1.0 / static_cast<double>(std::max<std::size_t>(pos_lt, 1)));
    return scale(add(a, b), w.topo_cls);
  });
  if (o.contrastive) {
    terms[7] = guarded("contrastive", [&] {
      return scale(add(infonce_topology_loss(out.l2l.logits, l2l, o.n_neg), infonce_topology_loss(out.l2t.logits, l2t, o.n_neg)),
                   w.contrastive);
    });
  }

  Tensor total = terms[0];
  for (std::size_t k = 1; k < terms.size(); ++k) total = add(total, terms[k]);
  result.total = total;
  for (std::size_t k = 0; k < terms.size(); ++k) result.terms.emplace_back(names[k], terms[k]);
  return result;
}

PreparedScene prepare(const scenes::Scene& scene, const scenes::SceneConfig& cfg) {
  return {scene, scenes::rasterize(scene, cfg), make_targets(scene)};
}

namespace {

void write_record(std::ostream& os, const StepRecord& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "step=%llu lr=%.17g", static_cast<unsigned long long>(r.step), r.lr);
  os << buf;
  for (std::size_t k = 0; k < r.terms.size(); ++k) {
    std::snprintf(buf, sizeof buf, " %s=%.17g", loss_term_names()[k].c_str(), r.terms[k]);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, " total=%.17g\n", r.total);
  os << buf;
}

}  // namespace

std::vector<StepRecord> train(Model& model, const std::vector<PreparedScene>& data, const TrainConfig& cfg,
                              const LossWeights& weights, const LossOptions& options, std::ostream* log,
                              const StepCallback& callback) {
  if (data.empty()) throw DataError("train: empty dataset");
  if (cfg.batch_size == 0) throw ConfigError("train: batch size must be positive");
  weights.validate();
  std::vector<StepRecord> history;
  if (cfg.steps == 0) return history;

  AdamWConfig oc = cfg.optim;
  oc.total_steps = cfg.steps;
  OptimizerState state = OptimizerState::for_parameters(model.params, oc);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  const std::size_t nterms = loss_term_names().size();
  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> batch;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    std::vector<Gradients> grads(batch.size());
    std::vector<std::vector<double>> term_values(batch.size(), std::vector<double>(nterms));
    parallel_for(batch.size(), [&](std::size_t b) {
      const auto& ex = data[batch[b]];
      const ForwardOutput out = full_forward(model, ex.grids.bev, ex.grids.fv, ex.scene.camera);
      const LossResult loss = total_loss(out, ex.targets, weights, options);
      for (std::size_t k = 0; k < nterms; ++k) term_values[b][k] = loss.terms[k].second.item();
      grads[b] = backward(loss.total, model.params);
    });
    Gradients g = std::move(grads[0]);
    for (std::size_t b = 1; b < grads.size(); ++b) g.add(grads[b]);
    const double inv = 1.0 / static_cast<double>(batch.size());
    g.scale(inv);
    for (const auto& gv : g.values)
      for (double v : gv)
        if (!std::isfinite(v)) throw NumericError("train: non-finite gradient at step " + std::to_string(step + 1));
    if (cfg.grad_clip > 0.0) {
      const double norm = g.norm();
      if (norm > cfg.grad_clip) g.scale(cfg.grad_clip / norm);
    }
    const double lr = cosine_lr(step, cfg.steps, oc.base_lr, oc.min_lr);
    adamw_step(state, model.params, g, lr);

    StepRecord rec;
    rec.step = step + 1;
    rec.lr = lr;
    rec.terms.assign(nterms, 0.0);
    for (std::size_t b = 0; b < batch.size(); ++b)
      for (std::size_t k = 0; k < nterms; ++k) rec.terms[k] += term_values[b][k] * inv;
    for (double v : rec.terms) rec.total += v;
    if (log) write_record(*log, rec);
    history.push_back(rec);
    if (callback) callback(rec, model);
  }
  return history;
}

}  // namespace reltopo::train

#pragma once

// Independent reference computations used only by the test suites.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

namespace test_oracles {

/// Repeated linear interpolation of the control polygon.
inline Eigen::Vector3d de_casteljau(const Eigen::Matrix<double, 4, 3>& cp, double t) {
  std::vector<Eigen::Vector3d> pts;
  for (int i = 0; i < 4; ++i) pts.push_back(cp.row(i).transpose());
  while (pts.size() > 1) {
    std::vector<Eigen::Vector3d> next;
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) next.push_back((1 - t) * pts[i] + t * pts[i + 1]);
    pts = std::move(next);
  }
  return pts[0];
}

inline double chamfer_brute(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  double sa = 0.0;
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < B.rows(); ++j) best = std::min(best, (A.row(i) - B.row(j)).norm());
    sa += best;
  }
  double sb = 0.0;
  for (Eigen::Index j = 0; j < B.rows(); ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < A.rows(); ++i) best = std::min(best, (A.row(i) - B.row(j)).norm());
    sb += best;
  }
  return 0.5 * sa / static_cast<double>(A.rows()) + 0.5 * sb / static_cast<double>(B.rows());
}

/// Minimum over every monotone coupling path of the maximum coupled distance.
inline double frechet_by_paths(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  const Eigen::Index n = A.rows(), m = B.rows();
  double best = std::numeric_limits<double>::infinity();
  std::function<void(Eigen::Index, Eigen::Index, double)> walk = [&](Eigen::Index i, Eigen::Index j,
                                                                     double sofar) {
    sofar = std::max(sofar, (A.row(i) - B.row(j)).norm());
    if (sofar >= best) return;
    if (i == n - 1 && j == m - 1) {
      best = sofar;
      return;
    }
    if (i + 1 < n) walk(i + 1, j, sofar);
    if (j + 1 < m) walk(i, j + 1, sofar);
    if (i + 1 < n && j + 1 < m) walk(i + 1, j + 1, sofar);
  };
  walk(0, 0, 0.0);
  return best;
}

/// Minimum total cost over every injective assignment of the smaller side.
/// Costs are summed in row order.
inline double assignment_brute(const Eigen::MatrixXd& cost) {
  const bool flip = cost.rows() > cost.cols();
  const Eigen::MatrixXd c = flip ? Eigen::MatrixXd(cost.transpose()) : cost;
  const int r = static_cast<int>(c.rows()), k = static_cast<int>(c.cols());
  std::vector<int> cols(k);
  std::iota(cols.begin(), cols.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::vector<bool> used(k, false);
  std::vector<int> pick(r);
  std::function<void(int)> rec = [&](int row) {
    if (row == r) {
      // Sum in the original row order.
      double total = 0.0;
      if (!flip) {
        for (int i = 0; i < r; ++i) total += c(i, pick[i]);
      } else {
        std::vector<int> owner(k, -1);
        for (int i = 0; i < r; ++i) owner[pick[i]] = i;
        for (int j = 0; j < k; ++j)
          if (owner[j] >= 0) total += cost(j, owner[j]);
      }
      best = std::min(best, total);
      return;
    }
    for (int j = 0; j < k; ++j) {
      if (used[j]) continue;
      used[j] = true;
      pick[row] = j;
      rec(row + 1);
      used[j] = false;
    }
  };
  rec(0);
  return best;
}

/// Area under the interpolated precision-recall curve, computed by
/// evaluating every prefix of the ranked list and integrating
/// max-precision-at-recall-at-least-r over the recall steps.
inline double average_precision_exhaustive(const std::vector<bool>& ranked_hits, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> prec, rec;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < ranked_hits.size(); ++i) {
    tp += ranked_hits[i] ? 1 : 0;
    prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  double ap = 0.0;
  double prev_r = 0.0;
  for (std::size_t g = 1; g <= num_gt; ++g) {
    const double r = static_cast<double>(g) / static_cast<double>(num_gt);
    double best = 0.0;
    for (std::size_t i = 0; i < prec.size(); ++i)
      if (rec[i] >= r - 1e-15) best = std::max(best, prec[i]);
    ap += (r - prev_r) * best;
    prev_r = r;
  }
  return ap;
}

}  // namespace test_oracles

#pragma once

#include <Eigen/Core>
#include <Eigen/LU>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "reltopo/error.hpp"

namespace reltopo::geom {

template <typename Scalar>
using Vec2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
/// One control point per row, ordered start to end.
template <typename Scalar>
using ControlPoints = Eigen::Matrix<Scalar, 4, 3>;
/// One point per row.
template <typename Scalar, int Dim = 3>
using Points = Eigen::Matrix<Scalar, Eigen::Dynamic, Dim>;

/// Directed cubic Bezier centreline in metres.
template <typename Scalar>
struct BezierLaneT {
  ControlPoints<Scalar> control_points = ControlPoints<Scalar>::Zero();
  Scalar confidence = Scalar(1);
  int class_id = 0;

  Vec3<Scalar> start() const { return control_points.row(0).transpose(); }
  Vec3<Scalar> end() const { return control_points.row(3).transpose(); }

  void validate() const {
    if (!control_points.allFinite()) throw NumericError("BezierLane: non-finite control point");
    if (!(confidence >= Scalar(0) && confidence <= Scalar(1))) {
      throw ConfigError("BezierLane: confidence outside [0, 1]");
    }
  }
};

using BezierLane = BezierLaneT<double>;

/// Bernstein basis weights of a cubic at parameter t.
template <typename Scalar>
Eigen::Matrix<Scalar, 1, 4> bernstein(Scalar t) {
  const Scalar u = Scalar(1) - t;
  return {u * u * u, Scalar(3) * u * u * t, Scalar(3) * u * t * t, t * t * t};
}

/// [K, 4] basis matrix for uniform parameters t_k = k / (K - 1).
template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, 4> bernstein_matrix(int samples) {
  if (samples < 2) throw ConfigError("bezier_sample: need at least 2 samples");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 4> B(samples, 4);
  for (int k = 0; k < samples; ++k) {
    B.row(k) = bernstein<Scalar>(Scalar(k) / Scalar(samples - 1));
  }
  return B;
}

template <typename Scalar>
Vec3<Scalar> bezier_eval(const BezierLaneT<Scalar>& lane, Scalar t) {
  if (!(t >= Scalar(0) && t <= Scalar(1))) throw ConfigError("bezier_eval: t outside [0, 1]");
  if (t == Scalar(0)) return lane.start();
  if (t == Scalar(1)) return lane.end();
  return (bernstein(t) * lane.control_points).transpose();
}

/// K points at uniform parameters; the first and last rows are exactly P0 and P3.
template <typename Scalar>
Points<Scalar> bezier_sample(const BezierLaneT<Scalar>& lane, int samples) {
  Points<Scalar> pts = bernstein_matrix<Scalar>(samples) * lane.control_points;
  pts.row(0) = lane.control_points.row(0);
  pts.row(samples - 1) = lane.control_points.row(3);
  return pts;
}

/// Minimum BEV distance over the four start/end pairings.
template <typename Scalar>
Scalar endpoint_min_distance(const BezierLaneT<Scalar>& a, const BezierLaneT<Scalar>& b) {
  Scalar best = std::numeric_limits<Scalar>::infinity();
  for (int i : {0, 3}) {
    for (int j : {0, 3}) {
      const Vec2<Scalar> d = (a.control_points.row(i).template head<2>() -
                              b.control_points.row(j).template head<2>())
                                 .transpose();
      best = std::min(best, d.norm());
    }
  }
  return best;
}

/// Unsigned angle in [0, pi] between the BEV chords (end - start).
template <typename Scalar>
Scalar angle_difference(const BezierLaneT<Scalar>& a, const BezierLaneT<Scalar>& b) {
  auto chord = [](const BezierLaneT<Scalar>& l) -> Vec2<Scalar> {
    const Vec2<Scalar> c =
        (l.control_points.row(3).template head<2>() - l.control_points.row(0).template head<2>())
            .transpose();
    if (c.norm() <= Scalar(1e-9)) throw ConfigError("angle_difference: degenerate lane chord");
    return c;
  };
  const Vec2<Scalar> u = chord(a);
  const Vec2<Scalar> v = chord(b);
  // atan2 of cross and dot is accurate near 0 and pi, unlike acos.
  const Scalar cross = u.x() * v.y() - u.y() * v.x();
  return std::atan2(std::abs(cross), u.dot(v));
}

struct SinusoidalConfig {
  int output_dim = 32;
  double temperature = 10000.0;
  double input_scale = 1.0;

  void validate() const {
    if (output_dim <= 0 || output_dim % 2 != 0) {
      throw ConfigError("sinusoidal: output_dim must be a positive even integer");
    }
    if (!(temperature > 0.0)) throw ConfigError("sinusoidal: temperature must be positive");
  }
};

/// Interleaved [sin, cos] encoding over output_dim/2 frequencies, one block per value.
template <typename Scalar>
std::vector<Scalar> sinusoidal_encode(std::span<const Scalar> values, const SinusoidalConfig& cfg) {
  cfg.validate();
  const int half = cfg.output_dim / 2;
  std::vector<Scalar> out;
  out.reserve(values.size() * static_cast<std::size_t>(cfg.output_dim));
  for (Scalar v : values) {
    for (int k = 0; k < half; ++k) {
      const Scalar w = Scalar(1) / std::pow(Scalar(cfg.temperature),
                                            Scalar(2 * k) / Scalar(cfg.output_dim));
      const Scalar phase = v * Scalar(cfg.input_scale) * w;
      out.push_back(std::sin(phase));
      out.push_back(std::cos(phase));
    }
  }
  return out;
}

/// Symmetric mean Chamfer distance between two point sets (rows are points).
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar chamfer_distance(const Eigen::MatrixBase<DerivedA>& A,
                                           const Eigen::MatrixBase<DerivedB>& B) {
  using Scalar = typename DerivedA::Scalar;
  if (A.rows() == 0 || B.rows() == 0) throw ConfigError("chamfer_distance: empty point set");
  if (A.cols() != B.cols()) throw ShapeError("chamfer_distance: dimension mismatch");
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> D(A.rows(), B.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < B.rows(); ++j) D(i, j) = (A.row(i) - B.row(j)).norm();
  return Scalar(0.5) * D.rowwise().minCoeff().mean() + Scalar(0.5) * D.colwise().minCoeff().mean();
}

/// Discrete Frechet distance by dynamic programming over the coupling lattice.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar discrete_frechet(const Eigen::MatrixBase<DerivedA>& A,
                                           const Eigen::MatrixBase<DerivedB>& B) {
  using Scalar = typename DerivedA::Scalar;
  if (A.rows() == 0 || B.rows() == 0) throw ConfigError("discrete_frechet: empty polyline");
  if (A.cols() != B.cols()) throw ShapeError("discrete_frechet: dimension mismatch");
  const Eigen::Index n = A.rows();
  const Eigen::Index m = B.rows();
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> ca(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      const Scalar d = (A.row(i) - B.row(j)).norm();
      if (i == 0 && j == 0) {
        ca(i, j) = d;
      } else if (i == 0) {
        ca(i, j) = std::max(ca(i, j - 1), d);
      } else if (j == 0) {
        ca(i, j) = std::max(ca(i - 1, j), d);
      } else {
        ca(i, j) = std::max(std::min({ca(i - 1, j), ca(i - 1, j - 1), ca(i, j - 1)}), d);
      }
    }
  }
  return ca(n - 1, m - 1);
}

/// Symmetric Hausdorff distance between point sets.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar hausdorff_distance(const Eigen::MatrixBase<DerivedA>& A,
                                             const Eigen::MatrixBase<DerivedB>& B) {
  using Scalar = typename DerivedA::Scalar;
  Scalar h = Scalar(0);
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    Scalar best = std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index j = 0; j < B.rows(); ++j) best = std::min(best, (A.row(i) - B.row(j)).norm());
    h = std::max(h, best);
  }
  for (Eigen::Index j = 0; j < B.rows(); ++j) {
    Scalar best = std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index i = 0; i < A.rows(); ++i) best = std::min(best, (A.row(i) - B.row(j)).norm());
    h = std::max(h, best);
  }
  return h;
}

/// Least-squares cubic fit to a polyline assumed sampled at uniform parameters.
template <typename Scalar>
BezierLaneT<Scalar> fit_cubic_bezier(const Points<Scalar>& polyline) {
  if (polyline.rows() < 4) throw ConfigError("fit_cubic_bezier: need at least 4 points");
  const auto B = bernstein_matrix<Scalar>(static_cast<int>(polyline.rows()));
  BezierLaneT<Scalar> lane;
  lane.control_points = B.colPivHouseholderQr().solve(polyline);
  return lane;
}

/// Pinhole camera: p_cam = rotation * p_world + translation, pixels via intrinsics.
template <typename Scalar>
struct CameraModelT {
  Mat3<Scalar> intrinsics = Mat3<Scalar>::Identity();
  Mat3<Scalar> rotation = Mat3<Scalar>::Identity();
  Vec3<Scalar> translation = Vec3<Scalar>::Zero();
  int width = 1;
  int height = 1;

  Scalar fx() const { return intrinsics(0, 0); }
  Scalar fy() const { return intrinsics(1, 1); }
  Scalar cx() const { return intrinsics(0, 2); }
  Scalar cy() const { return intrinsics(1, 2); }

  void validate() const {
    if (!(fx() > Scalar(0) && fy() > Scalar(0))) throw ConfigError("camera: focal lengths must be positive");
    const Scalar ortho = (rotation * rotation.transpose() - Mat3<Scalar>::Identity()).cwiseAbs().maxCoeff();
    if (ortho > Scalar(1e-9) || std::abs(rotation.determinant() - Scalar(1)) > Scalar(1e-9)) {
      throw ConfigError("camera: rotation is not a proper orthonormal matrix");
    }
    if (width <= 0 || height <= 0) throw ConfigError("camera: image size must be positive");
  }
};

using CameraModel = CameraModelT<double>;

inline constexpr double kMinProjectionDepth = 0.1;

template <typename Scalar>
struct Projection {
  Points<Scalar, 2> pixels;
  std::vector<bool> valid;
};

/// Projects world points; a point is valid iff depth > 0.1 m and it lands inside the image.
template <typename Scalar>
Projection<Scalar> project_to_image(const CameraModelT<Scalar>& cam, const Points<Scalar>& points) {
  Projection<Scalar> out;
  out.pixels.resize(points.rows(), 2);
  out.valid.assign(static_cast<std::size_t>(points.rows()), false);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const Vec3<Scalar> pc = cam.rotation * points.row(i).transpose() + cam.translation;
    if (pc.z() <= Scalar(kMinProjectionDepth)) {
      out.pixels.row(i).setZero();
      continue;
    }
    const Scalar u = cam.fx() * pc.x() / pc.z() + cam.cx();
    const Scalar v = cam.fy() * pc.y() / pc.z() + cam.cy();
    out.pixels(i, 0) = u;
    out.pixels(i, 1) = v;
    out.valid[static_cast<std::size_t>(i)] =
        u >= Scalar(0) && v >= Scalar(0) && u < Scalar(cam.width) && v < Scalar(cam.height);
  }
  return out;
}

}  // namespace reltopo::geom

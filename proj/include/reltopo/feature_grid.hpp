#pragma once

#include <utility>

#include "reltopo/error.hpp"
#include "reltopo/tensor.hpp"

namespace reltopo {

enum class Frame { BEV, FV };

/// World rectangle a grid covers. Meters for BEV, pixels for FV (x = u, y = v).
struct Extent {
  double x_min = 0.0, x_max = 1.0;
  double y_min = 0.0, y_max = 1.0;
};

/// Rows run along y, columns along x; cell centres sit at integer indices.
struct FeatureGrid {
  Tensor values;  // [H, W, C]
  Extent extent;
  Frame frame = Frame::BEV;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  std::size_t channels() const { return values.dim(2); }

  void validate() const {
    if (values.rank() != 3 || values.dim(0) < 2 || values.dim(1) < 2) {
      throw ConfigError("feature grid: expected [H>=2, W>=2, C], got " + shape_string(values.shape()));
    }
    if (!(extent.x_max > extent.x_min) || !(extent.y_max > extent.y_min)) {
      throw ConfigError("feature grid: degenerate extent");
    }
  }

  double row_scale() const { return static_cast<double>(height()) / (extent.y_max - extent.y_min); }
  double col_scale() const { return static_cast<double>(width()) / (extent.x_max - extent.x_min); }

  /// (x, y) -> (row, col) in continuous cell units.
  std::pair<double, double> to_cell(double x, double y) const {
    return {(y - extent.y_min) * row_scale() - 0.5, (x - extent.x_min) * col_scale() - 0.5};
  }

  /// Differentiable version: xy [..., 2] as (x, y) -> [..., 2] as (row, col).
  Tensor to_cell(const Tensor& xy) const {
    const double sr = row_scale(), sc = col_scale();
    const Tensor swap({2, 2}, {0.0, sc, sr, 0.0});
    const Tensor shift({2}, {-extent.y_min * sr - 0.5, -extent.x_min * sc - 0.5});
    return add(matmul(xy, swap), shift);
  }
};

}  // namespace reltopo

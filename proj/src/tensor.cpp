#include "reltopo/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "reltopo/error.hpp"

namespace reltopo {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::string& corrupt_slot() {
  static std::string op;
  return op;
}

void require_finite(const char* op, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value in '") + op + "'");
    }
  }
}

// Offset into `in` for every element of `out` under numpy-style broadcasting.
std::vector<std::size_t> broadcast_offsets(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t d = in.size() - 1 - k;
    const std::size_t od = r - 1 - k;
    stride[od] = in[d] == 1 ? 0 : s;
    s *= in[d];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> offs(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < n; ++i) {
    offs[i] = cur;
    for (std::size_t k = 0; k < r; ++k) {
      const std::size_t d = r - 1 - k;
      ++idx[d];
      cur += stride[d];
      if (idx[d] < out[d]) break;
      cur -= stride[d] * out[d];
      idx[d] = 0;
    }
  }
  return offs;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " +
                       shape_string(b));
    }
    out[r - 1 - k] = std::max(da, db);
  }
  return out;
}

// Generic broadcasting binary op. `df` returns (d/da, d/db) at (x, y).
template <typename F, typename DF>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DF df) {
  const Shape out = broadcast_shape(op, a.shape(), b.shape());
  const std::size_t n = shape_numel(out);
  const bool a_id = a.shape() == out;
  const bool b_id = b.shape() == out;
  auto ao = std::make_shared<std::vector<std::size_t>>();
  auto bo = std::make_shared<std::vector<std::size_t>>();
  if (!a_id) *ao = broadcast_offsets(a.shape(), out);
  if (!b_id) *bo = broadcast_offsets(b.shape(), out);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = f(ad[a_id ? i : (*ao)[i]], bd[b_id ? i : (*bo)[i]]);
  }
  const detail::Node* pa = a.id();
  const detail::Node* pb = b.id();
  return detail::make_result(
      op, out, std::move(data), {a, b},
      [=](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        const auto& xa = pa->data;
        const auto& xb = pb->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t ia = a_id ? i : (*ao)[i];
          const std::size_t ib = b_id ? i : (*bo)[i];
          const auto [da, db] = df(xa[ia], xb[ib]);
          if (pg[0]) (*pg[0])[ia] += g[i] * da;
          if (pg[1]) (*pg[1])[ib] += g[i] * db;
        }
      });
}

// Elementwise unary op; `df(x, y)` is the local derivative given input and output.
template <typename F, typename DF>
Tensor unary(const char* op, const Tensor& a, F f, DF df) {
  const auto ad = a.data();
  std::vector<double> data(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) data[i] = f(ad[i]);
  const detail::Node* pa = a.id();
  return detail::make_result(
      op, a.shape(), std::move(data), {a},
      [=](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        if (!pg[0]) return;
        const auto& x = pa->data;
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * df(x[i]);
      });
}

struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisView axis_view(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_string(s));
  }
  AxisView v;
  for (std::size_t d = 0; d < axis; ++d) v.outer *= s[d];
  v.len = s[axis];
  for (std::size_t d = axis + 1; d < s.size(); ++d) v.inner *= s[d];
  return v;
}

template <bool IsMin>
Tensor reduce_extreme(const char* op, const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view(op, a.shape(), axis);
  if (v.len == 0) throw ShapeError(std::string(op) + ": empty axis");
  Shape out = a.shape();
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  const auto x = a.data();
  std::vector<double> data(v.outer * v.inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(data.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      std::size_t best = o * v.len * v.inner + i;
      for (std::size_t k = 1; k < v.len; ++k) {
        const std::size_t idx = (o * v.len + k) * v.inner + i;
        if (IsMin ? x[idx] < x[best] : x[idx] > x[best]) best = idx;
      }
      data[o * v.inner + i] = x[best];
      (*arg)[o * v.inner + i] = best;
    }
  }
  return detail::make_result(
      op, out, std::move(data), {a},
      [arg](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[(*arg)[i]] += g[i];
      });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor() : node_(std::make_shared<detail::Node>()) {
  node_->data = {0.0};
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  require_finite("tensor", data);
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  return Tensor(std::move(shape), std::move(data), true);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("dim: axis out of range for " + shape_string(shape()));
  return node_->shape[axis];
}

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw Error("mutable_data: tensor is not a leaf");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_string(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("at: rank mismatch");
  std::size_t flat = 0;
  std::size_t d = 0;
  for (std::size_t i : index) {
    if (i >= node_->shape[d]) throw ShapeError("at: index out of range");
    flat = flat * node_->shape[d] + i;
    ++d;
  }
  return node_->data[flat];
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }

Tensor Tensor::from_node(detail::NodePtr node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

namespace detail {

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> parents, BackwardFn backward) {
  require_finite(op, data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  const bool needs = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace detail

// ---- arithmetic -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary("add", a, b, [](double x, double y) { return x + y; },
                [](double, double) { return std::pair{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; },
                [](double, double) { return std::pair{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; },
                [](double x, double y) { return std::pair{y, x}; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary("div", a, b, [](double x, double y) { return x / y; },
                [](double x, double y) { return std::pair{1.0 / y, -x / (y * y)}; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary("add_scalar", a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary("scale", a, [c](double x) { return x * c; }, [c](double) { return c; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  const Shape out = broadcast_shape("broadcast", a.shape(), shape);
  if (out != shape) {
    throw ShapeError("broadcast: cannot broadcast " + shape_string(a.shape()) + " to " +
                     shape_string(shape));
  }
  auto offs = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(a.shape(), shape));
  const auto x = a.data();
  std::vector<double> data(offs->size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = x[(*offs)[i]];
  return detail::make_result(
      "broadcast", shape, std::move(data), {a},
      [offs](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[(*offs)[i]] += g[i];
      });
}

// ---- unary ------------------------------------------------------------------

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

namespace {
double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, sigmoid_value, [](double x) {
    const double s = sigmoid_value(x);
    return s * (1.0 - s);
  });
}

Tensor log_sigmoid(const Tensor& a) {
  // log(sigmoid(x)) = -softplus(-x)
  return unary(
      "log_sigmoid", a,
      [](double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
      [](double x) { return 1.0 - sigmoid_value(x); });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary("sqrt", a, [](double x) { return std::sqrt(x); },
               [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor sin(const Tensor& a) {
  return unary("sin", a, [](double x) { return std::sin(x); },
               [](double x) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
  return unary("cos", a, [](double x) { return std::cos(x); },
               [](double x) { return -std::sin(x); });
}

Tensor abs(const Tensor& a) {
  return unary("abs", a, [](double x) { return std::fabs(x); },
               [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor pow(const Tensor& a, double exponent) {
  return unary("pow", a, [exponent](double x) { return std::pow(x, exponent); },
               [exponent](double x) {
                 if (exponent == 0.0) return 0.0;
                 return exponent * std::pow(x, exponent - 1.0);
               });
}

// ---- linear algebra and layout ------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const std::size_t k = b.dim(0);
  const std::size_t n = b.dim(1);
  const std::size_t m = a.numel() / k;
  Shape out = a.shape();
  out.back() = n;
  std::vector<double> data(m * n);
  MutMap(data.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
      ConstMap(a.data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) *
      ConstMap(b.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  const detail::Node* pa = a.id();
  const detail::Node* pb = b.id();
  return detail::make_result(
      "matmul", out, std::move(data), {a, b},
      [=](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        const auto M = static_cast<Eigen::Index>(m);
        const auto K = static_cast<Eigen::Index>(k);
        const auto N = static_cast<Eigen::Index>(n);
        ConstMap G(g.data(), M, N);
        if (pg[0]) {
          MutMap(pg[0]->data(), M, K).noalias() += G * ConstMap(pb->data.data(), K, N).transpose();
        }
        if (pg[1]) {
          MutMap(pg[1]->data(), K, N).noalias() += ConstMap(pa->data.data(), M, K).transpose() * G;
        }
      });
}

Tensor batched_matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("batched_matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  const auto M = static_cast<Eigen::Index>(m);
  const auto K = static_cast<Eigen::Index>(k);
  const auto N = static_cast<Eigen::Index>(n);
  std::vector<double> data(B * m * n);
  for (std::size_t i = 0; i < B; ++i) {
    MutMap(data.data() + i * m * n, M, N).noalias() =
        ConstMap(a.data().data() + i * m * k, M, K) * ConstMap(b.data().data() + i * k * n, K, N);
  }
  const detail::Node* pa = a.id();
  const detail::Node* pb = b.id();
  return detail::make_result(
      "batched_matmul", {B, m, n}, std::move(data), {a, b},
      [=](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        for (std::size_t i = 0; i < B; ++i) {
          ConstMap G(g.data() + i * m * n, M, N);
          if (pg[0]) {
            MutMap(pg[0]->data() + i * m * k, M, K).noalias() +=
                G * ConstMap(pb->data.data() + i * k * n, K, N).transpose();
          }
          if (pg[1]) {
            MutMap(pg[1]->data() + i * k * n, K, N).noalias() +=
                ConstMap(pa->data.data() + i * m * k, M, K).transpose() * G;
          }
        }
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot reshape " + shape_string(a.shape()) + " to " +
                     shape_string(shape));
  }
  std::vector<double> data(a.data().begin(), a.data().end());
  return detail::make_result(
      "reshape", std::move(shape), std::move(data), {a},
      [](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
      });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  std::vector<bool> seen(r, false);
  if (axes.size() != r) throw ShapeError("permute: axes size does not match rank");
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError("permute: invalid axes");
    seen[ax] = true;
  }
  Shape out(r);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t d = r; d-- > 1;) in_stride[d - 1] = in_stride[d] * a.shape()[d];
  std::vector<std::size_t> stride(r);
  for (std::size_t d = 0; d < r; ++d) {
    out[d] = a.shape()[axes[d]];
    stride[d] = in_stride[axes[d]];
  }
  const std::size_t n = a.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*src)[i] = cur;
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      cur += stride[k];
      if (idx[k] < out[k]) break;
      cur -= stride[k] * out[k];
      idx[k] = 0;
    }
  }
  const auto x = a.data();
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = x[(*src)[i]];
  return detail::make_result(
      "permute", out, std::move(data), {a},
      [src](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[(*src)[i]] += g[i];
      });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose: rank < 2");
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
  return permute(a, axes);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  Shape out = s0;
  out[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) {
      throw ShapeError("concat: mismatched shapes " + shape_string(s0) + " and " +
                       shape_string(s));
    }
    out[axis] += s[axis];
    lens.push_back(s[axis]);
  }
  const AxisView v = axis_view("concat", out, axis);
  std::vector<double> data(shape_numel(out));
  std::size_t off = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto x = parts[pi].data();
    const std::size_t chunk = lens[pi] * v.inner;
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  data.begin() + static_cast<std::ptrdiff_t>(o * v.len * v.inner + off));
    }
    off += chunk;
  }
  return detail::make_result(
      "concat", out, std::move(data), parts,
      [v, lens](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        std::size_t off = 0;
        for (std::size_t pi = 0; pi < lens.size(); ++pi) {
          const std::size_t chunk = lens[pi] * v.inner;
          if (pg[pi]) {
            for (std::size_t o = 0; o < v.outer; ++o) {
              for (std::size_t i = 0; i < chunk; ++i) {
                (*pg[pi])[o * chunk + i] += g[o * v.len * v.inner + off + i];
              }
            }
          }
          off += chunk;
        }
      });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisView v = axis_view("slice", a.shape(), axis);
  if (begin > end || end > v.len) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_string(a.shape()));
  }
  Shape out = a.shape();
  out[axis] = end - begin;
  const std::size_t chunk = (end - begin) * v.inner;
  const auto x = a.data();
  std::vector<double> data(v.outer * chunk);
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * v.len + begin) * v.inner), chunk,
                data.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  return detail::make_result(
      "slice", out, std::move(data), {a},
      [v, begin, chunk](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        if (!pg[0]) return;
        for (std::size_t o = 0; o < v.outer; ++o) {
          for (std::size_t i = 0; i < chunk; ++i) {
            (*pg[0])[(o * v.len + begin) * v.inner + i] += g[o * chunk + i];
          }
        }
      });
}

Tensor gather(const Tensor& a, std::vector<std::size_t> indices) {
  const auto x = a.data();
  std::vector<double> data(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.size()) throw ShapeError("gather: index out of range");
    data[i] = x[indices[i]];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  return detail::make_result(
      "gather", {idx->size()}, std::move(data), {a},
      [idx](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[(*idx)[i]] += g[i];
      });
}

Tensor index_rows(const Tensor& a, std::vector<std::size_t> rows) {
  if (a.rank() < 1) throw ShapeError("index_rows: rank 0");
  const std::size_t inner = a.numel() / a.dim(0);
  std::vector<std::size_t> flat;
  flat.reserve(rows.size() * inner);
  for (std::size_t r : rows) {
    if (r >= a.dim(0)) throw ShapeError("index_rows: row out of range");
    for (std::size_t i = 0; i < inner; ++i) flat.push_back(r * inner + i);
  }
  Shape out = a.shape();
  out[0] = rows.size();
  return reshape(gather(a, std::move(flat)), out);
}

// ---- reductions ---------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result(
      "sum", {}, {s}, {a},
      [](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        if (!pg[0]) return;
        for (auto& v : *pg[0]) v += g[0];
      });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view("sum", a.shape(), axis);
  Shape out = a.shape();
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  const auto x = a.data();
  std::vector<double> data(v.outer * v.inner, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t k = 0; k < v.len; ++k)
      for (std::size_t i = 0; i < v.inner; ++i)
        data[o * v.inner + i] += x[(o * v.len + k) * v.inner + i];
  return detail::make_result(
      "sum", out, std::move(data), {a},
      [v](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        if (!pg[0]) return;
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t k = 0; k < v.len; ++k)
            for (std::size_t i = 0; i < v.inner; ++i)
              (*pg[0])[(o * v.len + k) * v.inner + i] += g[o * v.inner + i];
      });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view("mean", a.shape(), axis);
  if (v.len == 0) throw ShapeError("mean: empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(v.len));
}

Tensor reduce_min(const Tensor& a, std::size_t axis) {
  return reduce_extreme<true>("reduce_min", a, axis);
}

Tensor reduce_max(const Tensor& a, std::size_t axis) {
  return reduce_extreme<false>("reduce_max", a, axis);
}

Tensor norm_lastdim(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("norm_lastdim: rank 0");
  const std::size_t d = a.shape().back();
  const std::size_t rows = d == 0 ? 0 : a.numel() / d;
  Shape out(a.shape().begin(), a.shape().end() - 1);
  const auto x = a.data();
  std::vector<double> data(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += x[r * d + k] * x[r * d + k];
    data[r] = std::sqrt(s);
  }
  const detail::Node* pa = a.id();
  auto norms = std::make_shared<std::vector<double>>(data);
  return detail::make_result(
      "norm_lastdim", out, std::move(data), {a},
      [pa, norms, d](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        if (!pg[0]) return;
        const auto& x = pa->data;
        for (std::size_t r = 0; r < g.size(); ++r) {
          const double n = (*norms)[r];
          if (n == 0.0) continue;
          for (std::size_t k = 0; k < d; ++k) (*pg[0])[r * d + k] += g[r] * x[r * d + k] / n;
        }
      });
}

// ---- normalisation --------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& a) {
  if (a.rank() < 1 || a.shape().back() == 0) throw ShapeError("softmax_lastdim: empty last axis");
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.numel() / d;
  const auto x = a.data();
  std::vector<double> y(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double* yr = y.data() + r * d;
    const double m = *std::max_element(xr, xr + d);
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += (yr[k] = std::exp(xr[k] - m));
    for (std::size_t k = 0; k < d; ++k) yr[k] /= s;
  }
  auto out = std::make_shared<std::vector<double>>(y);
  return detail::make_result(
      "softmax_lastdim", a.shape(), std::move(y), {a},
      [out, d, rows](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        if (!pg[0]) return;
        const auto& y = *out;
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t k = 0; k < d; ++k) dot += g[r * d + k] * y[r * d + k];
          for (std::size_t k = 0; k < d; ++k)
            (*pg[0])[r * d + k] += y[r * d + k] * (g[r * d + k] - dot);
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank 0");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain/bias shape " + shape_string(gamma.shape()) +
                     " does not match " + shape_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    double m = 0.0;
    for (std::size_t k = 0; k < d; ++k) m += xv[r * d + k];
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t k = 0; k < d; ++k) var += (xv[r * d + k] - m) * (xv[r * d + k] - m);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t k = 0; k < d; ++k) {
      const double h = (xv[r * d + k] - m) * is;
      (*xhat)[r * d + k] = h;
      y[r * d + k] = h * gv[k] + bv[k];
    }
  }
  const detail::Node* pgam = gamma.id();
  return detail::make_result(
      "layer_norm", x.shape(), std::move(y), {x, gamma, beta},
      [=](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        const auto& gam = pgam->data;
        const auto& h = *xhat;
        const double dn = static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          if (pg[0]) {
            double m1 = 0.0;
            double m2 = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
              const double dh = g[r * d + k] * gam[k];
              m1 += dh;
              m2 += dh * h[r * d + k];
            }
            m1 /= dn;
            m2 /= dn;
            for (std::size_t k = 0; k < d; ++k) {
              const double dh = g[r * d + k] * gam[k];
              (*pg[0])[r * d + k] += (*inv_std)[r] * (dh - m1 - h[r * d + k] * m2);
            }
          }
          for (std::size_t k = 0; k < d; ++k) {
            if (pg[1]) (*pg[1])[k] += g[r * d + k] * h[r * d + k];
            if (pg[2]) (*pg[2])[k] += g[r * d + k];
          }
        }
      });
}

// ---- sampling ---------------------------------------------------------------------

namespace {

struct Taps {
  long r0 = 0, c0 = 0;
  double fr = 0.0, fc = 0.0;
  bool any = false;
};

Taps taps_for(double r, double c, std::size_t H, std::size_t W) {
  Taps t;
  if (!(r > -1.0 && c > -1.0 && r < static_cast<double>(H) && c < static_cast<double>(W))) {
    return t;
  }
  t.r0 = static_cast<long>(std::floor(r));
  t.c0 = static_cast<long>(std::floor(c));
  t.fr = r - static_cast<double>(t.r0);
  t.fc = c - static_cast<double>(t.c0);
  t.any = true;
  return t;
}

inline bool inside(long r, long c, std::size_t H, std::size_t W) {
  return r >= 0 && c >= 0 && r < static_cast<long>(H) && c < static_cast<long>(W);
}

// Accumulates w * value[tap, c0:c0+n] into out for the four bilinear taps.
inline void sample_into(const double* value, std::size_t H, std::size_t W, std::size_t C,
                        std::size_t ch0, std::size_t n, const Taps& t, double w, double* out) {
  if (!t.any) return;
  const double wts[4] = {(1 - t.fr) * (1 - t.fc), (1 - t.fr) * t.fc, t.fr * (1 - t.fc),
                         t.fr * t.fc};
  const long rr[4] = {t.r0, t.r0, t.r0 + 1, t.r0 + 1};
  const long cc[4] = {t.c0, t.c0 + 1, t.c0, t.c0 + 1};
  for (int k = 0; k < 4; ++k) {
    if (!inside(rr[k], cc[k], H, W) || wts[k] == 0.0) continue;
    const double* v = value + (static_cast<std::size_t>(rr[k]) * W + static_cast<std::size_t>(cc[k])) * C + ch0;
    const double s = w * wts[k];
    for (std::size_t i = 0; i < n; ++i) out[i] += s * v[i];
  }
}

// Backward for one weighted bilinear tap set. `g` is the upstream gradient
// over the n channels. Returns d/dr, d/dc and the dot product with the sample.
struct TapGrad {
  double dr = 0.0, dc = 0.0, sample_dot = 0.0;
};

inline TapGrad sample_backward(const double* value, double* gvalue, std::size_t H, std::size_t W,
                               std::size_t C, std::size_t ch0, std::size_t n, const Taps& t,
                               double w, const double* g) {
  TapGrad out;
  if (!t.any) return out;
  const double wts[4] = {(1 - t.fr) * (1 - t.fc), (1 - t.fr) * t.fc, t.fr * (1 - t.fc),
                         t.fr * t.fc};
  const double dwr[4] = {-(1 - t.fc), -t.fc, (1 - t.fc), t.fc};
  const double dwc[4] = {-(1 - t.fr), (1 - t.fr), -t.fr, t.fr};
  const long rr[4] = {t.r0, t.r0, t.r0 + 1, t.r0 + 1};
  const long cc[4] = {t.c0, t.c0 + 1, t.c0, t.c0 + 1};
  for (int k = 0; k < 4; ++k) {
    if (!inside(rr[k], cc[k], H, W)) continue;
    const std::size_t base =
        (static_cast<std::size_t>(rr[k]) * W + static_cast<std::size_t>(cc[k])) * C + ch0;
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += g[i] * value[base + i];
    out.dr += w * dwr[k] * dot;
    out.dc += w * dwc[k] * dot;
    out.sample_dot += wts[k] * dot;
    if (gvalue) {
      const double s = w * wts[k];
      for (std::size_t i = 0; i < n; ++i) gvalue[base + i] += s * g[i];
    }
  }
  return out;
}

}  // namespace

Tensor bilinear_sample(const Tensor& grid, const Tensor& coords) {
  if (grid.rank() != 3 || grid.dim(0) < 2 || grid.dim(1) < 2) {
    throw ShapeError("bilinear_sample: grid must be [H>=2, W>=2, C], got " +
                     shape_string(grid.shape()));
  }
  if (coords.rank() != 2 || coords.dim(1) != 2) {
    throw ShapeError("bilinear_sample: coords must be [P, 2], got " + shape_string(coords.shape()));
  }
  require_finite("bilinear_sample", coords.data());
  const std::size_t H = grid.dim(0), W = grid.dim(1), C = grid.dim(2), P = coords.dim(0);
  const auto cv = coords.data();
  std::vector<double> out(P * C, 0.0);
  for (std::size_t p = 0; p < P; ++p) {
    sample_into(grid.data().data(), H, W, C, 0, C, taps_for(cv[2 * p], cv[2 * p + 1], H, W), 1.0,
                out.data() + p * C);
  }
  const detail::Node* pgrid = grid.id();
  const detail::Node* pcoord = coords.id();
  return detail::make_result(
      "bilinear_sample", {P, C}, std::move(out), {grid, coords},
      [=](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        const auto& cv = pcoord->data;
        for (std::size_t p = 0; p < P; ++p) {
          const Taps t = taps_for(cv[2 * p], cv[2 * p + 1], H, W);
          const TapGrad tg = sample_backward(pgrid->data.data(), pg[0] ? pg[0]->data() : nullptr,
                                             H, W, C, 0, C, t, 1.0, g.data() + p * C);
          if (pg[1]) {
            (*pg[1])[2 * p] += tg.dr;
            (*pg[1])[2 * p + 1] += tg.dc;
          }
        }
      });
}

Tensor deformable_sample(const Tensor& value, const Tensor& locs, const Tensor& weights) {
  if (value.rank() != 3 || value.dim(0) < 2 || value.dim(1) < 2) {
    throw ShapeError("deformable_sample: value must be [H>=2, W>=2, C], got " +
                     shape_string(value.shape()));
  }
  if (locs.rank() != 4 || locs.dim(3) != 2) {
    throw ShapeError("deformable_sample: locs must be [L, M, P, 2], got " +
                     shape_string(locs.shape()));
  }
  const std::size_t H = value.dim(0), W = value.dim(1), C = value.dim(2);
  const std::size_t L = locs.dim(0), M = locs.dim(1), P = locs.dim(2);
  if (weights.shape() != Shape{L, M, P}) {
    throw ShapeError("deformable_sample: weights " + shape_string(weights.shape()) +
                     " do not match locs " + shape_string(locs.shape()));
  }
  if (M == 0 || C % M != 0) {
    throw ShapeError("deformable_sample: channels " + std::to_string(C) +
                     " not divisible by heads " + std::to_string(M));
  }
  const std::size_t Ch = C / M;
  const auto lv = locs.data();
  const auto wv = weights.data();
  std::vector<double> out(L * C, 0.0);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t m = 0; m < M; ++m) {
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t q = (l * M + m) * P + p;
        sample_into(value.data().data(), H, W, C, m * Ch, Ch,
                    taps_for(lv[2 * q], lv[2 * q + 1], H, W), wv[q], out.data() + l * C + m * Ch);
      }
    }
  }
  const detail::Node* pval = value.id();
  const detail::Node* ploc = locs.id();
  const detail::Node* pw = weights.id();
  return detail::make_result(
      "deformable_sample", {L, C}, std::move(out), {value, locs, weights},
      [=](std::span<const double> g, std::span<std::vector<double>* const> pg) {
        const auto& lv = ploc->data;
        const auto& wv = pw->data;
        for (std::size_t l = 0; l < L; ++l) {
          for (std::size_t m = 0; m < M; ++m) {
            for (std::size_t p = 0; p < P; ++p) {
              const std::size_t q = (l * M + m) * P + p;
              const Taps t = taps_for(lv[2 * q], lv[2 * q + 1], H, W);
              const TapGrad tg =
                  sample_backward(pval->data.data(), pg[0] ? pg[0]->data() : nullptr, H, W, C,
                                  m * Ch, Ch, t, wv[q], g.data() + l * C + m * Ch);
              if (pg[1]) {
                (*pg[1])[2 * q] += tg.dr;
                (*pg[1])[2 * q + 1] += tg.dc;
              }
              if (pg[2]) (*pg[2])[q] += tg.sample_dot;
            }
          }
        }
      });
}

// ---- dispatch ---------------------------------------------------------------------

Tensor primitive_forward(const std::string& op, const std::vector<Tensor>& in,
                         const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(op + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
    }
  };
  auto axis = [&]() -> std::size_t {
    if (attrs.axes.empty()) throw ShapeError(op + ": missing axis attribute");
    return attrs.axes[0];
  };
  if (op == "matmul") return need(2), matmul(in[0], in[1]);
  if (op == "add") return need(2), add(in[0], in[1]);
  if (op == "mul") return need(2), mul(in[0], in[1]);
  if (op == "concat") return concat(in, axis());
  if (op == "slice") {
    need(1);
    if (attrs.axes.size() != 3) throw ShapeError("slice: attrs.axes must be {axis, begin, end}");
    return slice(in[0], attrs.axes[0], attrs.axes[1], attrs.axes[2]);
  }
  if (op == "reshape") return need(1), reshape(in[0], attrs.shape);
  if (op == "transpose") return need(1), transpose(in[0]);
  if (op == "softmax_lastdim") return need(1), softmax_lastdim(in[0]);
  if (op == "relu") return need(1), relu(in[0]);
  if (op == "sigmoid") return need(1), sigmoid(in[0]);
  if (op == "layer_norm") return need(3), layer_norm(in[0], in[1], in[2]);
  if (op == "exp") return need(1), exp(in[0]);
  if (op == "log") return need(1), log(in[0]);
  if (op == "sqrt") return need(1), sqrt(in[0]);
  if (op == "sum") return need(1), attrs.axes.empty() ? sum(in[0]) : sum(in[0], axis());
  if (op == "mean") return need(1), attrs.axes.empty() ? mean(in[0]) : mean(in[0], axis());
  if (op == "broadcast") return need(1), broadcast_to(in[0], attrs.shape);
  throw ShapeError("unknown op '" + op + "'");
}

namespace testing {
void corrupt_backward(std::string op) { corrupt_slot() = std::move(op); }
const std::string& corrupted_op() { return corrupt_slot(); }
}  // namespace testing

}  // namespace reltopo

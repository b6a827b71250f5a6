#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace reltopo {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Receives the upstream gradient and one accumulation buffer per parent.
// A buffer pointer is null when that parent does not require a gradient.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<std::vector<double>* const> parent_grads)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  BackwardFn backward;
};

}  // namespace detail

/// Dense row-major float64 array. Copies share storage; operations build a
/// dynamic tape through parent links whenever an operand requires gradients.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor parameter(Shape shape, std::vector<double> data);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// In-place access for leaves (initialisation and optimizer updates).
  std::span<double> mutable_data();

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }
  const char* op_name() const { return node_->op; }

  Tensor detach() const;

  const detail::Node* id() const { return node_.get(); }
  const detail::NodePtr& node() const { return node_; }

  static Tensor from_node(detail::NodePtr node);

 private:
  detail::NodePtr node_;
};

namespace detail {
// Builds an op result, validating finiteness and wiring the tape.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> parents, BackwardFn backward);
}  // namespace detail

// ---- elementwise / broadcasting arithmetic --------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor broadcast_to(const Tensor& a, const Shape& shape);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- unary ----------------------------------------------------------------
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);

// ---- linear algebra and layout --------------------------------------------
/// a: [..., k] (rank >= 1), b: [k, n] -> [..., n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// a: [B, m, k], b: [B, k, n] -> [B, m, n].
Tensor batched_matmul(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& a, Shape shape);
/// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Flat gather: result[i] = a.data[indices[i]], shape {indices.size()}.
Tensor gather(const Tensor& a, std::vector<std::size_t> indices);
/// Selects slices along axis 0.
Tensor index_rows(const Tensor& a, std::vector<std::size_t> rows);

// ---- reductions -----------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);
Tensor reduce_min(const Tensor& a, std::size_t axis);
Tensor reduce_max(const Tensor& a, std::size_t axis);
/// Euclidean norm over the last axis; the gradient at a zero vector is zero.
Tensor norm_lastdim(const Tensor& a);

// ---- normalisation --------------------------------------------------------
Tensor softmax_lastdim(const Tensor& a);
/// Normalises the last axis; gamma and beta have shape {last}.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// ---- sampling -------------------------------------------------------------
/// grid [H, W, C], coords [P, 2] as (row, col) in cell units -> [P, C].
/// Out-of-range taps contribute zero.
Tensor bilinear_sample(const Tensor& grid, const Tensor& coords);

/// Multi-head weighted sampling used by deformable attention.
/// value [H, W, C] with C split evenly across heads; locs [L, M, P, 2];
/// weights [L, M, P]. Output [L, C]: head m fills channel block m with
/// sum_p weights[l,m,p] * bilinear(value_m, locs[l,m,p]).
Tensor deformable_sample(const Tensor& value, const Tensor& locs, const Tensor& weights);

/// Generic dispatch by operation name; attrs carry axes, shapes or scalars.
struct OpAttrs {
  std::vector<std::size_t> axes;
  Shape shape;
  double scalar = 0.0;
};
Tensor primitive_forward(const std::string& op_name, const std::vector<Tensor>& inputs,
                         const OpAttrs& attrs = {});

namespace testing {
/// Scales the upstream gradient of every node produced by `op` during
/// backward. Empty string disables. Used as a negative control.
void corrupt_backward(std::string op);
const std::string& corrupted_op();
}  // namespace testing

}  // namespace reltopo

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "icegen/common.hpp"

namespace icegen::ad {

using Shape = std::vector<int>;

inline Eigen::Index numel(const Shape& s) {
  Eigen::Index n = 1;
  for (int d : s) n *= d;
  return n;
}

class Graph;
struct Node;

// Value-semantics handle into a recorded computation graph. Tensors are
// created through Graph::leaf / Graph::constant or by applying primitives.
class Tensor {
 public:
  Tensor() = default;

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const { return static_cast<int>(shape().size()); }
  int dim(int i) const { return shape()[static_cast<std::size_t>(i)]; }
  Eigen::Index size() const { return numel(shape()); }

  const ArrayX& value() const;
  Scalar scalar() const;  // requires size() == 1
  bool requires_grad() const;

  // Accumulated gradient after Graph::backward; zeros if the node was never
  // reached (disconnected leaves have zero gradient by contract).
  const ArrayX& grad() const;

 private:
  friend class Graph;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

// Execution-ordered tape. One graph is confined to one worker; independent
// graphs may run in parallel.
class Graph {
 public:
  explicit Graph(bool strict_finite = false) : strict_finite_(strict_finite) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor leaf(ArrayX value, Shape shape, bool requires_grad);
  Tensor leaf(const Array2D& value, bool requires_grad);  // shape [H, W]
  Tensor constant(ArrayX value, Shape shape) { return leaf(std::move(value), std::move(shape), false); }
  Tensor constant_scalar(Scalar v) { return leaf(ArrayX::Constant(1, v), Shape{}, false); }

  // Reverse pass from a scalar loss; visits each recorded node exactly once,
  // accumulating gradients additively at fan-out. May be called once per tape.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  bool strict_finite() const { return strict_finite_; }

  // --- primitives ---------------------------------------------------------
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor add_scalar(const Tensor& a, Scalar c);
  Tensor mul_scalar(const Tensor& a, Scalar c);
  Tensor exp(const Tensor& a);
  Tensor log(const Tensor& a);
  Tensor abs(const Tensor& a);  // subgradient 0 at 0
  Tensor relu(const Tensor& a);
  Tensor gelu(const Tensor& a);  // exact erf form
  Tensor clamp(const Tensor& a, Scalar lo, Scalar hi);
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  Tensor reshape(const Tensor& a, Shape shape);
  Tensor slice(const Tensor& a, Eigen::Index begin, Eigen::Index len);  // flat slice
  Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]

  // Spatial ops on [C, H, W] tensors.
  Tensor conv2d(const Tensor& x, const Tensor& w);  // w: [Co, Ci, k, k], odd k, zero pad
  Tensor maxpool2x2(const Tensor& x, const MaskArray* valid = nullptr);
  Tensor upsample_bilinear2x(const Tensor& x);
  Tensor concat_channels(std::span<const Tensor> parts);
  Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                             Scalar eps = 1e-6);

  // Constant-parametrized helpers used by the masked layers.
  Tensor scale_cells(const Tensor& x, const Array2D& factor);        // per-cell, all channels
  Tensor add_channel_bias(const Tensor& x, const Tensor& bias,
                          const Array2D& mask);                      // x + b_c * mask
  Tensor global_mean_valid(const Tensor& x, const MaskArray& valid); // [C,H,W] -> [C]

  // Masked 2x2 average pooling over valid cells; all-invalid patches emit 0.
  Tensor avgpool2x2_valid(const Tensor& x, const MaskArray& valid);

  // Ensemble CRPS per valid cell averaged over valid cells: members [M, H, W]
  // against a fixed observed field. Fused forward/backward.
  Tensor crps_cells(const Tensor& members, const Array2D& obs, const MaskArray& valid);

  // Mean squared difference to a fixed field over valid cells, x: [H, W].
  Tensor mse_cells(const Tensor& x, const Array2D& obs, const MaskArray& valid);

 private:
  friend class Tensor;
  Tensor make(Shape shape, ArrayX value, std::vector<std::shared_ptr<Node>> parents,
              std::function<void(Node&)> backward, const char* op);
  void check_same_graph(const Tensor& t) const;

  std::vector<std::shared_ptr<Node>> nodes_;
  bool strict_finite_ = false;
  bool backward_done_ = false;
};

struct Node {
  Graph* graph = nullptr;
  Shape shape;
  ArrayX value;
  ArrayX grad;  // lazily sized
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.size() != value.size()) grad = ArrayX::Zero(value.size());
  }
};

// Central finite-difference check of a scalar-valued tensor function.
struct GradCheckReport {
  Scalar max_rel_error = 0.0;
  Eigen::Index worst_index = -1;
  bool pass = false;
};

GradCheckReport grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f,
                           const ArrayX& x, const Shape& shape, Scalar tol,
                           Scalar step = 1e-5);

// Map [C,H,W] / [H,W] helpers.
inline Eigen::Map<const MatrixR> as_matrix(const ArrayX& v, int rows, int cols) {
  return Eigen::Map<const MatrixR>(v.data(), rows, cols);
}

}  // namespace icegen::ad

#pragma once

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "latact/tensor.hpp"

namespace latact::ad {

/// Handle to a node in a Graph.
struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

/// User-defined fused operation with a hand-derived gradient (used for
/// differentiable forward kinematics). Single input, single output.
struct CustomOp {
  virtual ~CustomOp() = default;
  virtual std::vector<int> output_shape(const Tensor& input) const = 0;
  virtual void forward(const Tensor& input, Tensor& output) = 0;
  /// Accumulate into grad_in; grad_out has the output's shape.
  virtual void backward(const Tensor& input, const Tensor& output, const double* grad_out,
                        double* grad_in) = 0;
  virtual const char* name() const { return "custom"; }
};

/// Reverse-mode tape. Nodes are appended after their inputs, so the node
/// index order is a topological order; backward() is a single reverse sweep
/// that visits each node exactly once. Values are computed eagerly at build
/// time; recompute() re-runs the whole tape in place, which lets an
/// optimization loop mutate leaf values without rebuilding the graph.
///
/// A graph is mutated by one thread at a time; independent graphs may live
/// on different threads.
class Graph {
 public:
  enum class Op {
    kLeaf,
    kMatmul,       // [m,k]x[k,n]
    kMatmulNT,     // [m,k]x[n,k]^T
    kAdd,          // same shape
    kAddBias,      // [m,n] + [n], row broadcast
    kSub,          // same shape
    kMul,          // elementwise, same shape
    kScale,        // x * c
    kRelu,         // subgradient 0 at exactly 0
    kLayerNorm,    // per-row over last dim; inputs x, gamma, beta
    kDropout,      // train-mode inverted dropout; identity in eval mode
    kRowL2Norm,    // per-row x / max(||x||, 1e-12)
    kCeDiag,       // [B,B] logits -> mean_n (logsumexp(row n) - diag n)
    kSumSquares,   // sum of squared entries -> scalar
    kSumAll,       // sum of entries -> scalar
    kIndex,        // single element -> scalar
    kAxisRotation, // scalar angle -> 3x3 rotation about a fixed unit axis
    kCustom,
  };

  /// When enabled, every forward op asserts a finite result.
  void set_check_finite(bool on) { check_finite_ = on; }

  Var leaf(Tensor t);
  Var constant(Tensor t) {
    t.requires_grad = false;
    return leaf(std::move(t));
  }

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var add_bias(Var x, Var bias);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, double c);
  Var relu(Var x);
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
  /// rate in [0,1); in training mode survivors are rescaled by 1/(1-rate).
  Var dropout(Var x, double rate, bool training, Rng* rng);
  Var row_l2_normalize(Var x);
  Var cross_entropy_diag(Var logits);
  Var sum_squares(Var x);
  Var sum_all(Var x);
  Var index(Var x, int flat_index);
  Var axis_rotation(Var angle, const std::array<double, 3>& unit_axis);
  Var custom(std::shared_ptr<CustomOp> op, Var input);

  /// Mean squared error against a constant target, averaged over elements.
  Var mse(Var pred, Var target) {
    Var d = sub(pred, target);
    return scale(sum_squares(d), 1.0 / static_cast<double>(value(pred).numel()));
  }

  const Tensor& value(Var v) const { return nodes_[check(v)].value; }
  Tensor& leaf_value(Var v);
  void set_leaf(Var v, const std::vector<double>& data);

  /// Gradient of the last backward() seed w.r.t. node v (zeros if v did not
  /// require grad). Shape matches value(v).
  const Tensor& grad(Var v) const { return nodes_[check(v)].grad; }

  /// Re-runs every non-leaf node in topological order.
  void recompute();

  /// Reverse sweep from a scalar output; fills grads for every node with
  /// requires_grad set (leaves flagged by the caller, interior nodes by
  /// propagation).
  void backward(Var output);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::array<int, 3> in = {-1, -1, -1};
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    double aux = 0.0;                  // scale factor / eps / dropout rate
    int iaux = 0;                      // flat index / training flag
    std::vector<double> saved;         // op-specific forward state
    std::shared_ptr<CustomOp> custom;
    Rng* rng = nullptr;                // dropout only
  };

  int check(Var v) const {
    if (!v.valid() || v.idx >= static_cast<int>(nodes_.size()))
      throw ContractError("invalid graph handle");
    return v.idx;
  }

  Var push(Node n);
  void compute(Node& n);
  void backprop(const Node& n);
  Tensor& grad_buf(int idx);

  std::vector<Node> nodes_;
  bool check_finite_ = false;
};

/// Maximum relative error between reverse-mode gradients and central finite
/// differences (f(x+h) - f(x-h)) / 2h, per coordinate, with
///   rel = |g_ad - g_fd| / max(|g_ad| + |g_fd|, 1e-3).
/// build must place x as its only requires_grad leaf and return a scalar.
double finite_diff_check(const std::function<Var(Graph&, Var)>& build, const Tensor& x,
                         double h = 1e-5);

}  // namespace latact::ad

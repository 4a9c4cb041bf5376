#include "latact/graph.hpp"

#include <algorithm>
#include <cmath>

namespace latact::ad {

namespace {

Eigen::Matrix3d skew(double x, double y, double z) {
  Eigen::Matrix3d k;
  k << 0, -z, y, z, 0, -x, -y, x, 0;
  return k;
}

}  // namespace

Var Graph::push(Node n) {
  if (check_finite_ && n.op != Op::kLeaf && !n.value.all_finite())
    throw NumericalError("non-finite forward result (op " +
                         std::to_string(static_cast<int>(n.op)) + ")");
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::leaf(Tensor t) {
  Node n;
  n.op = Op::kLeaf;
  n.requires_grad = t.requires_grad;
  n.value = std::move(t);
  return push(std::move(n));
}

Tensor& Graph::leaf_value(Var v) {
  Node& n = nodes_[check(v)];
  if (n.op != Op::kLeaf) throw ContractError("leaf_value on a non-leaf node");
  return n.value;
}

void Graph::set_leaf(Var v, const std::vector<double>& data) {
  Tensor& t = leaf_value(v);
  if (data.size() != t.numel()) throw ShapeError("set_leaf size mismatch");
  t.data = data;
}

Var Graph::matmul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.cols() != tb.rows()) throw ShapeError("matmul inner dimensions disagree");
  Node n;
  n.op = Op::kMatmul;
  n.in = {a.idx, b.idx, -1};
  n.requires_grad = ta.requires_grad || tb.requires_grad;
  n.value = Tensor({ta.rows(), tb.cols()});
  n.value.requires_grad = n.requires_grad;
  n.value.mat().noalias() = ta.mat() * tb.mat();
  return push(std::move(n));
}

Var Graph::matmul_nt(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.cols() != tb.cols()) throw ShapeError("matmul_nt inner dimensions disagree");
  Node n;
  n.op = Op::kMatmulNT;
  n.in = {a.idx, b.idx, -1};
  n.requires_grad = ta.requires_grad || tb.requires_grad;
  n.value = Tensor({ta.rows(), tb.rows()});
  n.value.requires_grad = n.requires_grad;
  n.value.mat().noalias() = ta.mat() * tb.mat().transpose();
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.same_shape(tb)) throw ShapeError("add shape mismatch");
  Node n;
  n.op = Op::kAdd;
  n.in = {a.idx, b.idx, -1};
  n.requires_grad = ta.requires_grad || tb.requires_grad;
  n.value = ta;
  n.value.requires_grad = n.requires_grad;
  for (size_t i = 0; i < tb.numel(); ++i) n.value.data[i] += tb.data[i];
  return push(std::move(n));
}

Var Graph::add_bias(Var x, Var bias) {
  const Tensor& tx = value(x);
  const Tensor& tb = value(bias);
  if (tb.rank() != 1 || tb.cols() != tx.cols()) throw ShapeError("add_bias width mismatch");
  Node n;
  n.op = Op::kAddBias;
  n.in = {x.idx, bias.idx, -1};
  n.requires_grad = tx.requires_grad || tb.requires_grad;
  n.value = tx;
  n.value.requires_grad = n.requires_grad;
  n.value.mat().rowwise() += tb.mat().row(0);
  return push(std::move(n));
}

Var Graph::sub(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.same_shape(tb)) throw ShapeError("sub shape mismatch");
  Node n;
  n.op = Op::kSub;
  n.in = {a.idx, b.idx, -1};
  n.requires_grad = ta.requires_grad || tb.requires_grad;
  n.value = ta;
  n.value.requires_grad = n.requires_grad;
  for (size_t i = 0; i < tb.numel(); ++i) n.value.data[i] -= tb.data[i];
  return push(std::move(n));
}

Var Graph::mul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.same_shape(tb)) throw ShapeError("mul shape mismatch");
  Node n;
  n.op = Op::kMul;
  n.in = {a.idx, b.idx, -1};
  n.requires_grad = ta.requires_grad || tb.requires_grad;
  n.value = ta;
  n.value.requires_grad = n.requires_grad;
  for (size_t i = 0; i < tb.numel(); ++i) n.value.data[i] *= tb.data[i];
  return push(std::move(n));
}

Var Graph::scale(Var x, double c) {
  const Tensor& tx = value(x);
  Node n;
  n.op = Op::kScale;
  n.in = {x.idx, -1, -1};
  n.requires_grad = tx.requires_grad;
  n.aux = c;
  n.value = tx;
  for (auto& v : n.value.data) v *= c;
  return push(std::move(n));
}

Var Graph::relu(Var x) {
  const Tensor& tx = value(x);
  Node n;
  n.op = Op::kRelu;
  n.in = {x.idx, -1, -1};
  n.requires_grad = tx.requires_grad;
  n.value = tx;
  for (auto& v : n.value.data) v = v > 0.0 ? v : 0.0;
  return push(std::move(n));
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& tx = value(x);
  const Tensor& tg = value(gamma);
  const Tensor& tb = value(beta);
  if (eps <= 0.0) throw ContractError("layer_norm eps must be positive");
  const int cols = tx.cols();
  if (tg.numel() != static_cast<size_t>(cols) || tb.numel() != static_cast<size_t>(cols))
    throw ShapeError("layer_norm affine parameter width mismatch");
  Node n;
  n.op = Op::kLayerNorm;
  n.in = {x.idx, gamma.idx, beta.idx};
  n.requires_grad = tx.requires_grad || tg.requires_grad || tb.requires_grad;
  n.aux = eps;
  n.value = tx;
  n.value.requires_grad = n.requires_grad;
  const int rows = tx.rows();
  n.saved.resize(static_cast<size_t>(rows) * cols + rows);  // xhat rows, then inv_std per row
  double* xhat = n.saved.data();
  double* inv_std = n.saved.data() + static_cast<size_t>(rows) * cols;
  for (int r = 0; r < rows; ++r) {
    const double* xr = tx.data.data() + static_cast<size_t>(r) * cols;
    double mean = 0.0;
    for (int c = 0; c < cols; ++c) mean += xr[c];
    mean /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= cols;  // biased variance
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    double* out = n.value.data.data() + static_cast<size_t>(r) * cols;
    double* xh = xhat + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) {
      xh[c] = (xr[c] - mean) * is;
      out[c] = tg.data[c] * xh[c] + tb.data[c];
    }
  }
  return push(std::move(n));
}

Var Graph::dropout(Var x, double rate, bool training, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout rate must be in [0,1)");
  const Tensor& tx = value(x);
  Node n;
  n.op = Op::kDropout;
  n.in = {x.idx, -1, -1};
  n.requires_grad = tx.requires_grad;
  n.aux = rate;
  n.iaux = training ? 1 : 0;
  n.value = tx;
  if (training && rate > 0.0) {
    if (rng == nullptr) throw ContractError("training-mode dropout needs an rng");
    n.saved.resize(tx.numel());
    const double keep = 1.0 / (1.0 - rate);
    for (size_t i = 0; i < tx.numel(); ++i) {
      n.saved[i] = rng->uniform() < rate ? 0.0 : keep;
      n.value.data[i] *= n.saved[i];
    }
  }
  return push(std::move(n));
}

Var Graph::row_l2_normalize(Var x) {
  const Tensor& tx = value(x);
  Node n;
  n.op = Op::kRowL2Norm;
  n.in = {x.idx, -1, -1};
  n.requires_grad = tx.requires_grad;
  n.value = tx;
  const int rows = tx.rows(), cols = tx.cols();
  n.saved.resize(rows);
  for (int r = 0; r < rows; ++r) {
    double* row = n.value.data.data() + static_cast<size_t>(r) * cols;
    double sq = 0.0;
    for (int c = 0; c < cols; ++c) sq += row[c] * row[c];
    const double norm = std::max(std::sqrt(sq), 1e-12);
    n.saved[r] = norm;
    for (int c = 0; c < cols; ++c) row[c] /= norm;
  }
  return push(std::move(n));
}

Var Graph::cross_entropy_diag(Var logits) {
  const Tensor& tl = value(logits);
  if (tl.rank() != 2 || tl.rows() != tl.cols())
    throw ShapeError("cross_entropy_diag requires square logits");
  const int b = tl.rows();
  Node n;
  n.op = Op::kCeDiag;
  n.in = {logits.idx, -1, -1};
  n.requires_grad = tl.requires_grad;
  n.saved.resize(static_cast<size_t>(b) * b);  // row-wise softmax
  double loss = 0.0;
  for (int r = 0; r < b; ++r) {
    const double* row = tl.data.data() + static_cast<size_t>(r) * b;
    double* soft = n.saved.data() + static_cast<size_t>(r) * b;
    double m = row[0];
    for (int c = 1; c < b; ++c) m = std::max(m, row[c]);
    double z = 0.0;
    for (int c = 0; c < b; ++c) z += std::exp(row[c] - m);
    for (int c = 0; c < b; ++c) soft[c] = std::exp(row[c] - m) / z;
    loss += (m + std::log(z)) - row[r];
  }
  n.value = Tensor::scalar(loss / b);
  n.value.requires_grad = n.requires_grad;
  return push(std::move(n));
}

Var Graph::sum_squares(Var x) {
  const Tensor& tx = value(x);
  Node n;
  n.op = Op::kSumSquares;
  n.in = {x.idx, -1, -1};
  n.requires_grad = tx.requires_grad;
  double s = 0.0;
  for (double v : tx.data) s += v * v;
  n.value = Tensor::scalar(s);
  n.value.requires_grad = n.requires_grad;
  return push(std::move(n));
}

Var Graph::sum_all(Var x) {
  const Tensor& tx = value(x);
  Node n;
  n.op = Op::kSumAll;
  n.in = {x.idx, -1, -1};
  n.requires_grad = tx.requires_grad;
  double s = 0.0;
  for (double v : tx.data) s += v;
  n.value = Tensor::scalar(s);
  n.value.requires_grad = n.requires_grad;
  return push(std::move(n));
}

Var Graph::index(Var x, int flat_index) {
  const Tensor& tx = value(x);
  if (flat_index < 0 || static_cast<size_t>(flat_index) >= tx.numel())
    throw ShapeError("index out of range");
  Node n;
  n.op = Op::kIndex;
  n.in = {x.idx, -1, -1};
  n.iaux = flat_index;
  n.requires_grad = tx.requires_grad;
  n.value = Tensor::scalar(tx.data[flat_index]);
  n.value.requires_grad = n.requires_grad;
  return push(std::move(n));
}

Var Graph::axis_rotation(Var angle, const std::array<double, 3>& unit_axis) {
  const Tensor& ta = value(angle);
  if (ta.numel() != 1) throw ShapeError("axis_rotation takes a scalar angle");
  Node n;
  n.op = Op::kAxisRotation;
  n.in = {angle.idx, -1, -1};
  n.requires_grad = ta.requires_grad;
  n.saved.assign(unit_axis.begin(), unit_axis.end());
  n.value = Tensor({3, 3});
  n.value.requires_grad = n.requires_grad;
  const Eigen::Matrix3d k = skew(unit_axis[0], unit_axis[1], unit_axis[2]);
  const double th = ta.data[0];
  // Rodrigues: R = I + sin(th) K + (1 - cos(th)) K^2.
  n.value.mat() = Eigen::Matrix3d::Identity() + std::sin(th) * k + (1.0 - std::cos(th)) * k * k;
  return push(std::move(n));
}

Var Graph::custom(std::shared_ptr<CustomOp> op, Var input) {
  const Tensor& ti = value(input);
  Node n;
  n.op = Op::kCustom;
  n.in = {input.idx, -1, -1};
  n.requires_grad = ti.requires_grad;
  n.custom = std::move(op);
  n.value = Tensor(n.custom->output_shape(ti));
  n.value.requires_grad = n.requires_grad;
  n.custom->forward(ti, n.value);
  return push(std::move(n));
}

void Graph::compute(Node& n) {
  const auto v = [&](int i) -> const Tensor& { return nodes_[i].value; };
  switch (n.op) {
    case Op::kLeaf:
      return;
    case Op::kMatmul:
      n.value.mat().noalias() = v(n.in[0]).mat() * v(n.in[1]).mat();
      return;
    case Op::kMatmulNT:
      n.value.mat().noalias() = v(n.in[0]).mat() * v(n.in[1]).mat().transpose();
      return;
    case Op::kAdd: {
      const Tensor& a = v(n.in[0]);
      const Tensor& b = v(n.in[1]);
      for (size_t i = 0; i < a.numel(); ++i) n.value.data[i] = a.data[i] + b.data[i];
      return;
    }
    case Op::kAddBias:
      n.value.data = v(n.in[0]).data;
      n.value.mat().rowwise() += v(n.in[1]).mat().row(0);
      return;
    case Op::kSub: {
      const Tensor& a = v(n.in[0]);
      const Tensor& b = v(n.in[1]);
      for (size_t i = 0; i < a.numel(); ++i) n.value.data[i] = a.data[i] - b.data[i];
      return;
    }
    case Op::kMul: {
      const Tensor& a = v(n.in[0]);
      const Tensor& b = v(n.in[1]);
      for (size_t i = 0; i < a.numel(); ++i) n.value.data[i] = a.data[i] * b.data[i];
      return;
    }
    case Op::kScale: {
      const Tensor& a = v(n.in[0]);
      for (size_t i = 0; i < a.numel(); ++i) n.value.data[i] = n.aux * a.data[i];
      return;
    }
    case Op::kRelu: {
      const Tensor& a = v(n.in[0]);
      for (size_t i = 0; i < a.numel(); ++i) n.value.data[i] = a.data[i] > 0.0 ? a.data[i] : 0.0;
      return;
    }
    case Op::kLayerNorm: {
      const Tensor& tx = v(n.in[0]);
      const Tensor& tg = v(n.in[1]);
      const Tensor& tb = v(n.in[2]);
      const int rows = tx.rows(), cols = tx.cols();
      double* xhat = n.saved.data();
      double* inv_std = n.saved.data() + static_cast<size_t>(rows) * cols;
      for (int r = 0; r < rows; ++r) {
        const double* xr = tx.data.data() + static_cast<size_t>(r) * cols;
        double mean = 0.0;
        for (int c = 0; c < cols; ++c) mean += xr[c];
        mean /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= cols;
        const double is = 1.0 / std::sqrt(var + n.aux);
        inv_std[r] = is;
        double* out = n.value.data.data() + static_cast<size_t>(r) * cols;
        double* xh = xhat + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) {
          xh[c] = (xr[c] - mean) * is;
          out[c] = tg.data[c] * xh[c] + tb.data[c];
        }
      }
      return;
    }
    case Op::kDropout: {
      // The mask sampled at build time is reused, so recompute() evaluates
      // the same function (required by finite-difference probing).
      const Tensor& a = v(n.in[0]);
      if (n.iaux && n.aux > 0.0) {
        for (size_t i = 0; i < a.numel(); ++i) n.value.data[i] = a.data[i] * n.saved[i];
      } else {
        n.value.data = a.data;
      }
      return;
    }
    case Op::kRowL2Norm: {
      const Tensor& a = v(n.in[0]);
      const int rows = a.rows(), cols = a.cols();
      for (int r = 0; r < rows; ++r) {
        const double* xr = a.data.data() + static_cast<size_t>(r) * cols;
        double* out = n.value.data.data() + static_cast<size_t>(r) * cols;
        double sq = 0.0;
        for (int c = 0; c < cols; ++c) sq += xr[c] * xr[c];
        const double norm = std::max(std::sqrt(sq), 1e-12);
        n.saved[r] = norm;
        for (int c = 0; c < cols; ++c) out[c] = xr[c] / norm;
      }
      return;
    }
    case Op::kCeDiag: {
      const Tensor& a = v(n.in[0]);
      const int b = a.rows();
      double loss = 0.0;
      for (int r = 0; r < b; ++r) {
        const double* row = a.data.data() + static_cast<size_t>(r) * b;
        double* soft = n.saved.data() + static_cast<size_t>(r) * b;
        double m = row[0];
        for (int c = 1; c < b; ++c) m = std::max(m, row[c]);
        double z = 0.0;
        for (int c = 0; c < b; ++c) z += std::exp(row[c] - m);
        for (int c = 0; c < b; ++c) soft[c] = std::exp(row[c] - m) / z;
        loss += (m + std::log(z)) - row[r];
      }
      n.value.data[0] = loss / b;
      return;
    }
    case Op::kSumSquares: {
      double s = 0.0;
      for (double x : v(n.in[0]).data) s += x * x;
      n.value.data[0] = s;
      return;
    }
    case Op::kSumAll: {
      double s = 0.0;
      for (double x : v(n.in[0]).data) s += x;
      n.value.data[0] = s;
      return;
    }
    case Op::kIndex:
      n.value.data[0] = v(n.in[0]).data[n.iaux];
      return;
    case Op::kAxisRotation: {
      const Eigen::Matrix3d k = skew(n.saved[0], n.saved[1], n.saved[2]);
      const double th = v(n.in[0]).data[0];
      n.value.mat() =
          Eigen::Matrix3d::Identity() + std::sin(th) * k + (1.0 - std::cos(th)) * k * k;
      return;
    }
    case Op::kCustom:
      n.custom->forward(v(n.in[0]), n.value);
      return;
  }
}

void Graph::recompute() {
  for (auto& n : nodes_) {
    if (n.op == Op::kLeaf) continue;
    compute(n);
    if (check_finite_ && !n.value.all_finite())
      throw NumericalError("non-finite forward result in recompute");
  }
}

Tensor& Graph::grad_buf(int idx) {
  Node& n = nodes_[idx];
  if (!n.grad.same_shape(n.value)) {
    n.grad = Tensor(n.value.shape);
  }
  return n.grad;
}

void Graph::backward(Var output) {
  Node& out = nodes_[check(output)];
  if (out.value.numel() != 1) throw ContractError("backward seed must be a scalar");
  // Zero grads of everything that can receive one, then seed.
  for (auto& n : nodes_) {
    if (!n.requires_grad) continue;
    if (!n.grad.same_shape(n.value)) n.grad = Tensor(n.value.shape);
    std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
  }
  if (!out.requires_grad) return;  // nothing reachable requires grad
  out.grad.data[0] = 1.0;
  for (int i = output.idx; i >= 0; --i) {
    const Node& n = nodes_[i];
    if (!n.requires_grad || n.op == Op::kLeaf) continue;
    backprop(n);
  }
}

void Graph::backprop(const Node& n) {
  const auto needs = [&](int i) { return i >= 0 && nodes_[i].requires_grad; };
  const auto v = [&](int i) -> const Tensor& { return nodes_[i].value; };
  const auto g = [&](int i) -> Tensor& { return grad_buf(i); };
  const Tensor& go = n.grad;

  switch (n.op) {
    case Op::kLeaf:
      return;
    case Op::kMatmul:
      if (needs(n.in[0])) g(n.in[0]).mat().noalias() += go.mat() * v(n.in[1]).mat().transpose();
      if (needs(n.in[1])) g(n.in[1]).mat().noalias() += v(n.in[0]).mat().transpose() * go.mat();
      return;
    case Op::kMatmulNT:
      if (needs(n.in[0])) g(n.in[0]).mat().noalias() += go.mat() * v(n.in[1]).mat();
      if (needs(n.in[1])) g(n.in[1]).mat().noalias() += go.mat().transpose() * v(n.in[0]).mat();
      return;
    case Op::kAdd:
      for (int k = 0; k < 2; ++k)
        if (needs(n.in[k])) {
          Tensor& gi = g(n.in[k]);
          for (size_t i = 0; i < go.numel(); ++i) gi.data[i] += go.data[i];
        }
      return;
    case Op::kAddBias:
      if (needs(n.in[0])) {
        Tensor& gi = g(n.in[0]);
        for (size_t i = 0; i < go.numel(); ++i) gi.data[i] += go.data[i];
      }
      if (needs(n.in[1])) g(n.in[1]).mat().row(0) += go.mat().colwise().sum();
      return;
    case Op::kSub:
      if (needs(n.in[0])) {
        Tensor& gi = g(n.in[0]);
        for (size_t i = 0; i < go.numel(); ++i) gi.data[i] += go.data[i];
      }
      if (needs(n.in[1])) {
        Tensor& gi = g(n.in[1]);
        for (size_t i = 0; i < go.numel(); ++i) gi.data[i] -= go.data[i];
      }
      return;
    case Op::kMul:
      if (needs(n.in[0])) {
        Tensor& gi = g(n.in[0]);
        const Tensor& b = v(n.in[1]);
        for (size_t i = 0; i < go.numel(); ++i) gi.data[i] += go.data[i] * b.data[i];
      }
      if (needs(n.in[1])) {
        Tensor& gi = g(n.in[1]);
        const Tensor& a = v(n.in[0]);
        for (size_t i = 0; i < go.numel(); ++i) gi.data[i] += go.data[i] * a.data[i];
      }
      return;
    case Op::kScale:
      if (needs(n.in[0])) {
        Tensor& gi = g(n.in[0]);
        for (size_t i = 0; i < go.numel(); ++i) gi.data[i] += n.aux * go.data[i];
      }
      return;
    case Op::kRelu:
      if (needs(n.in[0])) {
        Tensor& gi = g(n.in[0]);
        const Tensor& a = v(n.in[0]);
        for (size_t i = 0; i < go.numel(); ++i)
          if (a.data[i] > 0.0) gi.data[i] += go.data[i];
      }
      return;
    case Op::kLayerNorm: {
      const Tensor& tx = v(n.in[0]);
      const Tensor& tg = v(n.in[1]);
      const int rows = tx.rows(), cols = tx.cols();
      const double* xhat = n.saved.data();
      const double* inv_std = n.saved.data() + static_cast<size_t>(rows) * cols;
      for (int r = 0; r < rows; ++r) {
        const double* xh = xhat + static_cast<size_t>(r) * cols;
        const double* gor = go.data.data() + static_cast<size_t>(r) * cols;
        if (needs(n.in[1])) {
          Tensor& gg = g(n.in[1]);
          for (int c = 0; c < cols; ++c) gg.data[c] += gor[c] * xh[c];
        }
        if (needs(n.in[2])) {
          Tensor& gb = g(n.in[2]);
          for (int c = 0; c < cols; ++c) gb.data[c] += gor[c];
        }
        if (needs(n.in[0])) {
          // dx = inv_std * (dy*g - mean(dy*g) - xhat * mean(dy*g*xhat))
          double mean_dg = 0.0, mean_dgx = 0.0;
          for (int c = 0; c < cols; ++c) {
            const double dg = gor[c] * tg.data[c];
            mean_dg += dg;
            mean_dgx += dg * xh[c];
          }
          mean_dg /= cols;
          mean_dgx /= cols;
          Tensor& gx = g(n.in[0]);
          double* gxr = gx.data.data() + static_cast<size_t>(r) * cols;
          for (int c = 0; c < cols; ++c) {
            const double dg = gor[c] * tg.data[c];
            gxr[c] += inv_std[r] * (dg - mean_dg - xh[c] * mean_dgx);
          }
        }
      }
      return;
    }
    case Op::kDropout:
      if (needs(n.in[0])) {
        Tensor& gi = g(n.in[0]);
        if (n.iaux && n.aux > 0.0) {
          for (size_t i = 0; i < go.numel(); ++i) gi.data[i] += go.data[i] * n.saved[i];
        } else {
          for (size_t i = 0; i < go.numel(); ++i) gi.data[i] += go.data[i];
        }
      }
      return;
    case Op::kRowL2Norm:
      if (needs(n.in[0])) {
        const int rows = n.value.rows(), cols = n.value.cols();
        Tensor& gi = g(n.in[0]);
        for (int r = 0; r < rows; ++r) {
          const double* y = n.value.data.data() + static_cast<size_t>(r) * cols;
          const double* gor = go.data.data() + static_cast<size_t>(r) * cols;
          double dot = 0.0;
          for (int c = 0; c < cols; ++c) dot += gor[c] * y[c];
          double* gir = gi.data.data() + static_cast<size_t>(r) * cols;
          for (int c = 0; c < cols; ++c) gir[c] += (gor[c] - y[c] * dot) / n.saved[r];
        }
      }
      return;
    case Op::kCeDiag:
      if (needs(n.in[0])) {
        const int b = v(n.in[0]).rows();
        Tensor& gi = g(n.in[0]);
        const double s = go.data[0] / b;
        for (int r = 0; r < b; ++r) {
          const double* soft = n.saved.data() + static_cast<size_t>(r) * b;
          double* gir = gi.data.data() + static_cast<size_t>(r) * b;
          for (int c = 0; c < b; ++c) gir[c] += s * soft[c];
          gir[r] -= s;
        }
      }
      return;
    case Op::kSumSquares:
      if (needs(n.in[0])) {
        Tensor& gi = g(n.in[0]);
        const Tensor& a = v(n.in[0]);
        const double s = 2.0 * go.data[0];
        for (size_t i = 0; i < a.numel(); ++i) gi.data[i] += s * a.data[i];
      }
      return;
    case Op::kSumAll:
      if (needs(n.in[0])) {
        Tensor& gi = g(n.in[0]);
        for (size_t i = 0; i < gi.numel(); ++i) gi.data[i] += go.data[0];
      }
      return;
    case Op::kIndex:
      if (needs(n.in[0])) g(n.in[0]).data[n.iaux] += go.data[0];
      return;
    case Op::kAxisRotation:
      if (needs(n.in[0])) {
        const Eigen::Matrix3d k = skew(n.saved[0], n.saved[1], n.saved[2]);
        const double th = v(n.in[0]).data[0];
        // dR/dth = cos(th) K + sin(th) K^2
        const Eigen::Matrix3d dr = std::cos(th) * k + std::sin(th) * k * k;
        double acc = 0.0;
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c) acc += go.data[static_cast<size_t>(r) * 3 + c] * dr(r, c);
        g(n.in[0]).data[0] += acc;
      }
      return;
    case Op::kCustom:
      if (needs(n.in[0]))
        n.custom->backward(v(n.in[0]), n.value, go.data.data(), g(n.in[0]).data.data());
      return;
  }
}

double finite_diff_check(const std::function<Var(Graph&, Var)>& build, const Tensor& x,
                         double h) {
  if (h <= 0.0) throw ContractError("finite_diff_check requires h > 0");
  Graph graph;
  Tensor xl = x;
  xl.requires_grad = true;
  Var xv = graph.leaf(std::move(xl));
  Var out = build(graph, xv);
  if (graph.value(out).numel() != 1)
    throw ContractError("finite_diff_check requires a scalar objective");
  graph.backward(out);
  const Tensor analytic = graph.grad(xv);

  Tensor probe = x;
  double max_rel = 0.0;
  for (size_t i = 0; i < x.numel(); ++i) {
    const double hi = h * std::max(1.0, std::abs(x.data[i]));
    probe.data[i] = x.data[i] + hi;
    graph.set_leaf(xv, probe.data);
    graph.recompute();
    const double fp = graph.value(out).data[0];
    probe.data[i] = x.data[i] - hi;
    graph.set_leaf(xv, probe.data);
    graph.recompute();
    const double fm = graph.value(out).data[0];
    probe.data[i] = x.data[i];
    const double fd = (fp - fm) / (2.0 * hi);
    const double a = analytic.data[i];
    const double rel = std::abs(a - fd) / std::max(std::abs(a) + std::abs(fd), 1e-3);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace latact::ad

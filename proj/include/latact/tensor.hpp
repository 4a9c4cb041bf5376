#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <vector>

#include "latact/errors.hpp"
#include "latact/rng.hpp"

namespace latact::ad {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// Dense row-major tensor of 64-bit floats. Rank 1 is treated as a row
/// vector [1 x n] by the matrix view; rank 2 is [rows x cols]; a scalar is
/// shape {1}. data.size() always equals the product of shape.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(std::vector<int> s, double fill = 0.0, bool rg = false)
      : shape(std::move(s)), requires_grad(rg) {
    data.assign(count(shape), fill);
  }

  static Tensor scalar(double v, bool rg = false) {
    Tensor t({1}, v, rg);
    return t;
  }

  static Tensor from(std::vector<int> s, std::vector<double> d, bool rg = false) {
    if (count(s) != d.size()) throw ShapeError("tensor data length does not match shape");
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(d);
    t.requires_grad = rg;
    return t;
  }

  static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0, bool rg = false) {
    Tensor t(std::move(s), 0.0, rg);
    for (auto& v : t.data) v = stddev * rng.normal();
    return t;
  }

  static size_t count(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive");
      n *= static_cast<size_t>(d);
    }
    return s.empty() ? 0 : n;
  }

  size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }

  int rows() const { return rank() == 2 ? shape[0] : 1; }
  int cols() const {
    if (rank() == 2) return shape[1];
    if (rank() == 1) return shape[0];
    throw ShapeError("matrix view requires rank 1 or 2");
  }

  MatMap mat() { return MatMap(data.data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(data.data(), rows(), cols()); }

  double value() const {
    if (numel() != 1) throw ContractError("value() requires a single-element tensor");
    return data[0];
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace latact::ad

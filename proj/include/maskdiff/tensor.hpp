// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace maskdiff {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major tensor backed by an Eigen vector.
///
/// Image-like data is NCHW, token sequences are [N, L, C], and per-sample
/// vectors are [N, C]. All math goes through Eigen maps over the flat storage.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Vector::Zero(shape_numel(shape_))) {
    check_dims();
  }
  Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)), data_(Vector::Constant(shape_numel(shape_), fill)) {
    check_dims();
  }
  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor constant(Shape shape, Scalar v) { return Tensor(std::move(shape), v); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Vector& vec() { return data_; }
  const Vector& vec() const { return data_; }
  auto array() { return data_.array(); }
  auto array() const { return data_.array(); }

  Eigen::Map<MatrixRM> matrix(Index rows, Index cols, Index offset = 0) {
    return Eigen::Map<MatrixRM>(data_.data() + offset, rows, cols);
  }
  Eigen::Map<const MatrixRM> matrix(Index rows, Index cols, Index offset = 0) const {
    return Eigen::Map<const MatrixRM>(data_.data() + offset, rows, cols);
  }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  // 4-D NCHW accessors.
  Scalar& operator()(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor reshaped(Shape shape) const& {
    Tensor t = *this;
    t.reshape_inplace(std::move(shape));
    return t;
  }
  Tensor reshaped(Shape shape) && {
    reshape_inplace(std::move(shape));
    return std::move(*this);
  }
  void reshape_inplace(Shape shape) {
    if (shape_numel(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
  }

  void set_zero() { data_.setZero(); }
  void fill(Scalar v) { data_.setConstant(v); }

  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  /// Copies sample `n` of a batched tensor into a tensor with leading dim 1.
  Tensor sample(Index n) const {
    Shape s = shape_;
    const Index per = size() / s.at(0);
    s[0] = 1;
    return Tensor(std::move(s), Vector(data_.segment(n * per, per)));
  }

 private:
  void check_dims() const {
    for (Index d : shape_) {
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  Vector data_;
};

/// Stacks tensors of identical shape [1, ...] along the leading axis.
template <typename Scalar>
Tensor<Scalar> stack_batch(const std::vector<Tensor<Scalar>>& items) {
  if (items.empty()) throw ShapeError("stack_batch: empty input");
  Shape s = items.front().shape();
  const Index per = items.front().size();
  const Index lead = s.at(0);
  s[0] = lead * static_cast<Index>(items.size());
  Tensor<Scalar> out(s);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != items.front().shape()) {
      throw ShapeError("stack_batch: mismatched shapes " + shape_str(items[i].shape()) + " vs " +
                       shape_str(items.front().shape()));
    }
    out.vec().segment(static_cast<Index>(i) * per, per) = items[i].vec();
  }
  return out;
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  if (a.size() == 0) return Scalar(0);
  return (a.array() - b.array()).abs().maxCoeff();
}

}  // namespace maskdiff

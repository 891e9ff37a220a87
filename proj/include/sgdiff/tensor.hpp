#pragma once

#include <initializer_list>
#include <utility>

#include <Eigen/Core>

#include "sgdiff/common.hpp"
#include "sgdiff/rng.hpp"

namespace sgdiff {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

/// Dense row-major n-dimensional array. The carrier for images, tokens,
/// activations and gradients. A rank-0 tensor (empty shape) holds one value.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Vector::Zero(shape_size(shape_))) {}
  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data size " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }
  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Vector(Eigen::Map<const Vector>(values.begin(), values.size()))) {}

  static Tensor full(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }
  static Tensor scalar(Scalar value) { return full({}, value); }
  static Tensor randn(Shape shape, CounterRng& rng, Scalar stddev = Scalar(1)) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t.data_[i] = static_cast<Scalar>(rng.normal()) * stddev;
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis < 0 ? axis + rank() : axis)); }
  Index size() const { return data_.size(); }

  Vector& vec() { return data_; }
  const Vector& vec() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }
  Scalar item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  MatrixMap<Scalar> matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return MatrixMap<Scalar>(data_.data(), rows, cols);
  }
  ConstMatrixMap<Scalar> matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return ConstMatrixMap<Scalar>(data_.data(), rows, cols);
  }
  /// Matrix view collapsing all leading axes into rows.
  ConstMatrixMap<Scalar> rows_view() const { return matrix(size() / dim(-1), dim(-1)); }
  MatrixMap<Scalar> rows_view() { return matrix(size() / dim(-1), dim(-1)); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_view(Index rows, Index cols) const {
    if (rows * cols != size()) {
      throw DimensionError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                           " of tensor " + shape_string(shape_));
    }
  }

  Shape shape_;
  Vector data_;
};

/// Rows [begin, begin + count) of the leading axis.
template <typename Scalar>
Tensor<Scalar> slice_leading(const Tensor<Scalar>& t, Index begin, Index count) {
  Shape shape = t.shape();
  const Index inner = t.size() / shape.at(0);
  if (begin < 0 || begin + count > shape[0]) throw DimensionError("slice_leading out of range");
  shape[0] = count;
  return Tensor<Scalar>(shape, t.vec().segment(begin * inner, count * inner));
}

/// Stacks equally shaped tensors along a new leading axis.
template <typename Scalar>
Tensor<Scalar> stack(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("stack of zero tensors");
  Shape shape = parts.front().shape();
  const Index inner = parts.front().size();
  shape.insert(shape.begin(), static_cast<Index>(parts.size()));
  Tensor<Scalar> out(shape);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].shape() != parts.front().shape()) {
      throw DimensionError("stack shape mismatch: " + shape_string(parts[i].shape()) + " vs " +
                           shape_string(parts.front().shape()));
    }
    out.vec().segment(static_cast<Index>(i) * inner, inner) = parts[i].vec();
  }
  return out;
}

}  // namespace sgdiff

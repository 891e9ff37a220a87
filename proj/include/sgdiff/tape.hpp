#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "sgdiff/tensor.hpp"

namespace sgdiff {

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<Scalar>& tape() const { return *tape_; }
  int id() const { return id_; }

  const Tensor<Scalar>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  Index dim(int axis) const { return value().dim(axis); }
  Index size() const { return value().size(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

  /// Gradient accumulator of this node, zero-initialised on first use.
  /// Only meaningful inside a backward closure.
  Tensor<Scalar>& grad() const { return tape_->grad_accumulator(id_); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

/// Records differentiable operations in application order and replays them
/// in reverse to produce gradients. One tape per forward pass; not thread-safe.
template <typename Scalar>
class Tape {
 public:
  using Backward = std::function<void(const Tensor<Scalar>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is requested.
  Var<Scalar> variable(Tensor<Scalar> value) { return push(std::move(value), true, nullptr, "variable"); }
  /// Leaf that never receives gradient.
  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false, nullptr, "constant"); }

  /// Appends the result of an operation. The closure is kept only when some
  /// input requires gradient. Throws NumericError on non-finite results.
  Var<Scalar> record(const char* op, Tensor<Scalar> value,
                     std::initializer_list<Var<Scalar>> inputs, Backward backward);

  const Tensor<Scalar>& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }
  const char* op_name(int id) const { return nodes_.at(static_cast<std::size_t>(id)).op; }
  Tensor<Scalar>& grad_accumulator(int id);

  /// Reverse-mode gradient of a scalar `loss` with respect to `params`.
  /// Parameters that do not influence the loss (or live on another tape)
  /// receive an exact zero tensor.
  std::vector<Tensor<Scalar>> gradient(const Var<Scalar>& loss, std::span<const Var<Scalar>> params);
  std::vector<Tensor<Scalar>> gradient(const Var<Scalar>& loss, std::initializer_list<Var<Scalar>> params) {
    return gradient(loss, std::span<const Var<Scalar>>(params.begin(), params.size()));
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t recorded_ops() const;
  /// Number of times the backward closure of node `id` ran in the last gradient() call.
  int backward_visits(int id) const { return nodes_.at(static_cast<std::size_t>(id)).visits; }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool has_grad = false;
    bool requires_grad = false;
    int visits = 0;
    const char* op = "";
    Backward backward;
  };

  Var<Scalar> push(Tensor<Scalar> value, bool requires_grad, Backward backward, const char* op);

  std::deque<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace sgdiff

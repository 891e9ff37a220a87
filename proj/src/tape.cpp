#include "sgdiff/tape.hpp"

#include <string>

namespace sgdiff {

template <typename Scalar>
Var<Scalar> Tape<Scalar>::push(Tensor<Scalar> value, bool requires_grad, Backward backward,
                               const char* op) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite values produced by ") + op + " " +
                       shape_string(value.shape()));
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.backward = std::move(backward);
  node.op = op;
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(const char* op, Tensor<Scalar> value,
                                 std::initializer_list<Var<Scalar>> inputs, Backward backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw std::logic_error(std::string(op) + ": operands from different tapes");
    needs = needs || in.requires_grad();
  }
  return push(std::move(value), needs, needs ? std::move(backward) : Backward{}, op);
}

template <typename Scalar>
Tensor<Scalar>& Tape<Scalar>::grad_accumulator(int id) {
  Node& node = nodes_.at(static_cast<std::size_t>(id));
  if (!node.has_grad) {
    node.grad = Tensor<Scalar>(node.value.shape());
    node.has_grad = true;
  }
  return node.grad;
}

template <typename Scalar>
std::size_t Tape<Scalar>::recorded_ops() const {
  std::size_t n = 0;
  for (const auto& node : nodes_) n += node.backward ? 1 : 0;
  return n;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> Tape<Scalar>::gradient(const Var<Scalar>& loss,
                                                   std::span<const Var<Scalar>> params) {
  if (!loss.valid() || &loss.tape() != this) throw std::logic_error("gradient: loss not on this tape");
  if (loss.size() != 1) {
    throw DimensionError("gradient: loss must be scalar, got " + shape_string(loss.shape()));
  }
  for (auto& node : nodes_) {
    node.has_grad = false;
    node.grad = Tensor<Scalar>();
    node.visits = 0;
  }
  grad_accumulator(loss.id()).vec().setOnes();
  for (int id = loss.id(); id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.backward || !node.has_grad) continue;
    ++node.visits;
    node.backward(node.grad);
  }
  std::vector<Tensor<Scalar>> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    if (!p.valid() || &p.tape() != this) {
      out.emplace_back(p.valid() ? p.shape() : Shape{});
      continue;
    }
    const Node& node = nodes_[static_cast<std::size_t>(p.id())];
    out.push_back(node.has_grad && node.requires_grad ? node.grad : Tensor<Scalar>(node.value.shape()));
  }
  return out;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace sgdiff

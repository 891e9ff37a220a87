#pragma once

#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "sgdiff/tape.hpp"

namespace sgdiff {

/// Named parameter tensors. Names are dotted paths whose first component is
/// the owning component: text, style, sca, unet.
template <typename S>
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor<S>>;

  void add(const std::string& name, Tensor<S> value);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  Tensor<S>& at(const std::string& name);
  const Tensor<S>& at(const std::string& name) const;

  const Map& tensors() const { return tensors_; }
  Map& tensors() { return tensors_; }
  std::vector<std::string> names(std::string_view prefix = "") const;
  /// Total scalar count of parameters whose name starts with `prefix`.
  Index count(std::string_view prefix = "") const;
  /// Removes every parameter under `prefix`.
  void erase_prefix(std::string_view prefix);

  template <typename O>
  ParamStore<O> cast() const {
    ParamStore<O> out;
    for (const auto& [name, t] : tensors_) out.add(name, t.template cast<O>());
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.tensors_ == b.tensors_; }

 private:
  Map tensors_;
};

using TrainablePredicate = std::function<bool(const std::string&)>;

/// True for names under any of the given prefixes.
TrainablePredicate trainable_prefixes(std::vector<std::string> prefixes);

/// Parameters placed on a tape on first use. Trainable parameters become
/// tape variables, everything else a tape constant, so frozen weights never
/// receive gradient work.
template <typename S>
class BoundParams {
 public:
  BoundParams(Tape<S>& tape, const ParamStore<S>& store, TrainablePredicate trainable = nullptr)
      : tape_(&tape), store_(&store), trainable_(std::move(trainable)) {}

  Var<S> operator()(const std::string& name);
  Tape<S>& tape() const { return *tape_; }
  const ParamStore<S>& store() const { return *store_; }

  /// Names and handles of the bound parameters that require gradient.
  std::vector<std::pair<std::string, Var<S>>> trainable_bound() const;
  const std::map<std::string, Var<S>>& bound() const { return bound_; }

  /// Gradients of `loss` keyed by parameter name, for every bound trainable parameter.
  std::map<std::string, Tensor<S>> gradients(const Var<S>& loss) const;

 private:
  Tape<S>* tape_;
  const ParamStore<S>* store_;
  TrainablePredicate trainable_;
  std::map<std::string, Var<S>> bound_;
};

void init_normal(ParamStore<float>& store, const std::string& name, Shape shape, double stddev, CounterRng& rng);
void init_constant(ParamStore<float>& store, const std::string& name, Shape shape, float value);
/// weight [in x out] scaled by 1/sqrt(in), bias zeros.
void init_linear(ParamStore<float>& store, const std::string& name, Index in, Index out, CounterRng& rng,
                 bool bias = true);
/// kernel [out x in x k x k] scaled by 1/sqrt(in k k), bias zeros.
void init_conv(ParamStore<float>& store, const std::string& name, Index in, Index out, int k, CounterRng& rng);
/// gamma ones, beta zeros.
void init_norm(ParamStore<float>& store, const std::string& name, Index channels);

extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class BoundParams<float>;
extern template class BoundParams<double>;

}  // namespace sgdiff

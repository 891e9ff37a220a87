#include "sgdiff/params.hpp"

#include <cmath>
#include <stdexcept>

namespace sgdiff {

template <typename S>
void ParamStore<S>::add(const std::string& name, Tensor<S> value) {
  if (!tensors_.emplace(name, std::move(value)).second) throw std::logic_error("duplicate parameter " + name);
}

template <typename S>
Tensor<S>& ParamStore<S>::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

template <typename S>
const Tensor<S>& ParamStore<S>::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

template <typename S>
std::vector<std::string> ParamStore<S>::names(std::string_view prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, t] : tensors_) {
    if (name.starts_with(prefix)) out.push_back(name);
  }
  return out;
}

template <typename S>
Index ParamStore<S>::count(std::string_view prefix) const {
  Index n = 0;
  for (const auto& [name, t] : tensors_) {
    if (name.starts_with(prefix)) n += t.size();
  }
  return n;
}

template <typename S>
void ParamStore<S>::erase_prefix(std::string_view prefix) {
  std::erase_if(tensors_, [&](const auto& kv) { return kv.first.starts_with(prefix); });
}

TrainablePredicate trainable_prefixes(std::vector<std::string> prefixes) {
  return [prefixes = std::move(prefixes)](const std::string& name) {
    for (const auto& p : prefixes) {
      if (name.starts_with(p)) return true;
    }
    return false;
  };
}

template <typename S>
Var<S> BoundParams<S>::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Tensor<S>& value = store_->at(name);
  const bool train = !trainable_ || trainable_(name);
  Var<S> v = train ? tape_->variable(value) : tape_->constant(value);
  bound_.emplace(name, v);
  return v;
}

template <typename S>
std::vector<std::pair<std::string, Var<S>>> BoundParams<S>::trainable_bound() const {
  std::vector<std::pair<std::string, Var<S>>> out;
  for (const auto& [name, v] : bound_) {
    if (v.requires_grad()) out.emplace_back(name, v);
  }
  return out;
}

template <typename S>
std::map<std::string, Tensor<S>> BoundParams<S>::gradients(const Var<S>& loss) const {
  const auto named = trainable_bound();
  std::vector<Var<S>> vars;
  for (const auto& nv : named) vars.push_back(nv.second);
  auto grads = tape_->gradient(loss, std::span<const Var<S>>(vars));
  std::map<std::string, Tensor<S>> out;
  for (std::size_t i = 0; i < named.size(); ++i) out.emplace(named[i].first, std::move(grads[i]));
  return out;
}

void init_normal(ParamStore<float>& store, const std::string& name, Shape shape, double stddev, CounterRng& rng) {
  store.add(name, Tensor<float>::randn(std::move(shape), rng, static_cast<float>(stddev)));
}

void init_constant(ParamStore<float>& store, const std::string& name, Shape shape, float value) {
  store.add(name, Tensor<float>::full(std::move(shape), value));
}

void init_linear(ParamStore<float>& store, const std::string& name, Index in, Index out, CounterRng& rng, bool bias) {
  init_normal(store, name + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  if (bias) init_constant(store, name + ".b", {out}, 0.0f);
}

void init_conv(ParamStore<float>& store, const std::string& name, Index in, Index out, int k, CounterRng& rng) {
  init_normal(store, name + ".w", {out, in, k, k}, 1.0 / std::sqrt(static_cast<double>(in * k * k)), rng);
  init_constant(store, name + ".b", {out}, 0.0f);
}

void init_norm(ParamStore<float>& store, const std::string& name, Index channels) {
  init_constant(store, name + ".g", {channels}, 1.0f);
  init_constant(store, name + ".b", {channels}, 0.0f);
}

template class ParamStore<float>;
template class ParamStore<double>;
template class BoundParams<float>;
template class BoundParams<double>;

}  // namespace sgdiff

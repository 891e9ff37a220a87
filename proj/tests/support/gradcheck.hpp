#pragma once

// Central finite-difference oracle, kept independent of the reverse-mode path.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sgdiff/params.hpp"
#include "sgdiff/tape.hpp"

namespace sgdiff::testing {

using LossBuilder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double evaluate(const LossBuilder& build, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return build(tape, vars).value().item();
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
};

/// Compares reverse-mode gradients against central differences on up to
/// `max_entries` entries per input (all entries when the input is small).
inline GradCheckResult check_gradients(const LossBuilder& build, std::vector<Tensor<double>> inputs,
                                       double step = 1e-5, int max_entries = 64) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  Var<double> loss = build(tape, vars);
  const auto grads = tape.gradient(loss, std::span<const Var<double>>(vars));

  GradCheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Index n = inputs[i].size();
    const Index stride = std::max<Index>(1, n / max_entries);
    for (Index j = 0; j < n; j += stride) {
      const double saved = inputs[i][j];
      inputs[i][j] = saved + step;
      const double up = evaluate(build, inputs);
      inputs[i][j] = saved - step;
      const double down = evaluate(build, inputs);
      inputs[i][j] = saved;
      const double fd = (up - down) / (2.0 * step);
      result.max_rel_error = std::max(result.max_rel_error, relative_error(fd, grads[i][j]));
      ++result.checked;
    }
  }
  return result;
}

using ParamLossBuilder = std::function<Var<double>(BoundParams<double>&)>;

struct ParamGradCheck {
  double max_rel_error = 0.0;
  int checked = 0;
  std::string worst;
};

/// Central differences on `picks` randomly chosen (parameter, entry) pairs
/// among the parameters selected by `trainable` (all when null).
inline ParamGradCheck check_param_gradients(const ParamLossBuilder& build, ParamStore<double> store, int picks,
                                            std::uint64_t seed, const TrainablePredicate& trainable = nullptr,
                                            double step = 1e-5) {
  std::vector<std::string> names;
  for (const auto& name : store.names()) {
    if (!trainable || trainable(name)) names.push_back(name);
  }
  std::map<std::string, Tensor<double>> grads;
  {
    Tape<double> tape;
    BoundParams<double> p(tape, store, trainable);
    grads = p.gradients(build(p));
  }
  auto eval = [&]() {
    Tape<double> tape;
    BoundParams<double> p(tape, store, [](const std::string&) { return false; });
    return build(p).value().item();
  };
  CounterRng rng(seed);
  ParamGradCheck result;
  for (int k = 0; k < picks; ++k) {
    const std::string& name = names[rng.below(names.size())];
    Tensor<double>& t = store.at(name);
    const Index j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(t.size())));
    const double saved = t[j];
    t[j] = saved + step;
    const double up = eval();
    t[j] = saved - step;
    const double down = eval();
    t[j] = saved;
    const double fd = (up - down) / (2.0 * step);
    const auto it = grads.find(name);
    const double analytic = it == grads.end() ? 0.0 : it->second[j];
    const double err = relative_error(fd, analytic);
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst = name + "[" + std::to_string(j) + "] fd=" + std::to_string(fd) + " ad=" + std::to_string(analytic);
    }
    ++result.checked;
  }
  return result;
}

}  // namespace sgdiff::testing

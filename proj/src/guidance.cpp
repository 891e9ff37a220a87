#include "sgdiff/guidance.hpp"

#include <cmath>

namespace sgdiff {
namespace {

template <typename S>
void require_same(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace

ConditionPair make_condition_pair(std::vector<int> text_ids, Tensor<float> style_patch) {
  return {std::move(text_ids), std::move(style_patch), false, false};
}

ConditionPair with_text_null(ConditionPair pair, const NullConditions& nulls) {
  pair.text_ids = nulls.text_ids;
  pair.text_null = true;
  return pair;
}

ConditionPair with_style_null(ConditionPair pair, const NullConditions& nulls) {
  pair.style_patch = nulls.style_patch;
  pair.style_null = true;
  return pair;
}

std::string to_string(GuidanceOrder order) { return order == GuidanceOrder::StyleFirst ? "style_first" : "text_first"; }

GuidanceOrder parse_guidance_order(const std::string& text) {
  if (text == "style_first") return GuidanceOrder::StyleFirst;
  if (text == "text_first") return GuidanceOrder::TextFirst;
  throw ConfigError("unknown guidance order '" + text + "' (expected style_first or text_first)");
}

void GuidanceWeights::validate() const {
  if (!std::isfinite(s_style) || !std::isfinite(s_text) || s_style < 0 || s_text < 0) {
    throw ConfigError("guidance scales must be finite and non-negative");
  }
}

void DropoutConfig::validate() const {
  if (!(p_text >= 0 && p_text <= 1 && p_style >= 0 && p_style <= 1)) {
    throw ConfigError("condition keep probabilities must lie in [0, 1]");
  }
}

ConditionPair apply_condition_dropout(const ConditionPair& pair, const DropoutConfig& cfg, CounterRng& rng,
                                      const NullConditions& nulls) {
  const bool keep_text = rng.uniform() < cfg.p_text;
  const bool keep_style = rng.uniform() < cfg.p_style;
  ConditionPair out = pair;
  if (!keep_text) out = with_text_null(std::move(out), nulls);
  if (!keep_style) out = with_style_null(std::move(out), nulls);
  return out;
}

template <typename S>
Tensor<S> compose_single(const Tensor<S>& eps_uncond, const Tensor<S>& eps_cond, double s) {
  require_same("compose_single", eps_uncond, eps_cond);
  return Tensor<S>(eps_uncond.shape(),
                   (eps_uncond.vec() + static_cast<S>(s) * (eps_cond.vec() - eps_uncond.vec())).eval());
}

template <typename S>
Tensor<S> compose_dual(const Tensor<S>& e_nn, const Tensor<S>& e_1n, const Tensor<S>& e_12, double s1, double s2) {
  require_same("compose_dual", e_nn, e_1n);
  require_same("compose_dual", e_nn, e_12);
  // Anchored at e_12 so that s1 = s2 = 1 returns e_12 bit for bit.
  return Tensor<S>(e_nn.shape(), (e_12.vec() + static_cast<S>(s2 - 1.0) * (e_12.vec() - e_1n.vec()) +
                                  static_cast<S>(s1 - 1.0) * (e_1n.vec() - e_nn.vec()))
                                     .eval());
}

template <typename S>
ModelOutput<S> guided_eps(const Tensor<S>& x_t, int t, const std::vector<ConditionPair>& pairs,
                          const GuidanceWeights& weights, const EpsModel<S>& model, const NullConditions& nulls,
                          EvalCounter* counter) {
  weights.validate();
  if (x_t.rank() < 1 || x_t.dim(0) != static_cast<Index>(pairs.size())) {
    throw DimensionError("guided_eps: " + std::to_string(pairs.size()) + " condition pairs for x_t " +
                         shape_string(x_t.shape()));
  }
  const bool style_first = weights.order == GuidanceOrder::StyleFirst;
  const ConditionPair both_null = with_style_null(with_text_null(pairs.empty() ? ConditionPair{} : pairs[0], nulls), nulls);

  // Per image: the states to evaluate and how to compose them.
  struct Plan {
    std::size_t first = 0;
    int count = 0;
    double s1 = 0, s2 = 0;
  };
  std::vector<ConditionPair> rows;
  std::vector<Index> source;
  std::vector<Plan> plans;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const ConditionPair& pair = pairs[i];
    Plan plan;
    plan.first = rows.size();
    rows.push_back(both_null);
    if (!pair.text_null && !pair.style_null) {
      // c_1 alone, then both
      rows.push_back(style_first ? with_text_null(pair, nulls) : with_style_null(pair, nulls));
      rows.push_back(pair);
      plan.count = 3;
      plan.s1 = style_first ? weights.s_style : weights.s_text;
      plan.s2 = style_first ? weights.s_text : weights.s_style;
    } else if (!pair.text_null || !pair.style_null) {
      rows.push_back(pair);
      plan.count = 2;
      plan.s1 = pair.text_null ? weights.s_style : weights.s_text;
    } else {
      plan.count = 1;
    }
    for (int k = 0; k < plan.count; ++k) source.push_back(static_cast<Index>(i));
    plans.push_back(plan);
  }

  const Index inner = x_t.size() / x_t.dim(0);
  Shape row_shape = x_t.shape();
  row_shape[0] = static_cast<Index>(rows.size());
  Tensor<S> batch(row_shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    batch.vec().segment(static_cast<Index>(r) * inner, inner) = x_t.vec().segment(source[r] * inner, inner);
  }
  const ModelOutput<S> out = model(batch, t, rows);
  if (counter) {
    counter->rows += static_cast<long>(rows.size());
    counter->calls += 1;
  }
  if (out.eps.shape() != row_shape) throw DimensionError("guided_eps: model returned " + shape_string(out.eps.shape()));

  ModelOutput<S> result;
  result.eps = Tensor<S>(x_t.shape());
  const bool has_v = out.v.size() > 0;
  if (has_v) result.v = Tensor<S>(x_t.shape());
  auto row = [&](const Tensor<S>& t_all, std::size_t r) {
    Shape s(x_t.shape().begin() + 1, x_t.shape().end());
    return Tensor<S>(s, t_all.vec().segment(static_cast<Index>(r) * inner, inner));
  };
  for (std::size_t i = 0; i < plans.size(); ++i) {
    const Plan& plan = plans[i];
    Tensor<S> e;
    if (plan.count == 3) {
      e = compose_dual(row(out.eps, plan.first), row(out.eps, plan.first + 1), row(out.eps, plan.first + 2), plan.s1,
                       plan.s2);
    } else if (plan.count == 2) {
      e = compose_single(row(out.eps, plan.first), row(out.eps, plan.first + 1), plan.s1);
    } else {
      e = row(out.eps, plan.first);
    }
    result.eps.vec().segment(static_cast<Index>(i) * inner, inner) = e.vec();
    if (has_v) {
      result.v.vec().segment(static_cast<Index>(i) * inner, inner) =
          out.v.vec().segment(static_cast<Index>(plan.first + plan.count - 1) * inner, inner);
    }
  }
  return result;
}

#define SGDIFF_INSTANTIATE_GUIDANCE(S)                                                                        \
  template Tensor<S> compose_single(const Tensor<S>&, const Tensor<S>&, double);                             \
  template Tensor<S> compose_dual(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, double, double);     \
  template ModelOutput<S> guided_eps(const Tensor<S>&, int, const std::vector<ConditionPair>&,               \
                                     const GuidanceWeights&, const EpsModel<S>&, const NullConditions&,      \
                                     EvalCounter*);

SGDIFF_INSTANTIATE_GUIDANCE(float)
SGDIFF_INSTANTIATE_GUIDANCE(double)

}  // namespace sgdiff

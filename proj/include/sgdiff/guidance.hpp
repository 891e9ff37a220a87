#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sgdiff/encoders.hpp"
#include "sgdiff/tensor.hpp"

namespace sgdiff {

/// The two conditions of one example. Null states carry the null content
/// (all-PAD ids, sentinel-filled patch) with the matching flag set.
struct ConditionPair {
  std::vector<int> text_ids;
  Tensor<float> style_patch;
  bool text_null = false;
  bool style_null = false;
};

ConditionPair make_condition_pair(std::vector<int> text_ids, Tensor<float> style_patch);
ConditionPair with_text_null(ConditionPair pair, const NullConditions& nulls);
ConditionPair with_style_null(ConditionPair pair, const NullConditions& nulls);

enum class GuidanceOrder { StyleFirst, TextFirst };

std::string to_string(GuidanceOrder order);
GuidanceOrder parse_guidance_order(const std::string& text);

struct GuidanceWeights {
  double s_style = 1.2;
  double s_text = 1.0;
  GuidanceOrder order = GuidanceOrder::StyleFirst;

  void validate() const;
};

struct DropoutConfig {
  /// Keep probabilities; each condition is dropped independently.
  double p_text = 0.8;
  double p_style = 0.8;

  void validate() const;
};

/// Replaces each condition by its null state with probability 1 - p.
/// Text is drawn first, then style, from the same stream.
ConditionPair apply_condition_dropout(const ConditionPair& pair, const DropoutConfig& cfg, CounterRng& rng,
                                      const NullConditions& nulls);

/// eps_uncond + s (eps_cond - eps_uncond).
template <typename S>
Tensor<S> compose_single(const Tensor<S>& eps_uncond, const Tensor<S>& eps_cond, double s);

/// e_nn + s1 (e_1n - e_nn) + s2 (e_12 - e_1n).
template <typename S>
Tensor<S> compose_dual(const Tensor<S>& e_nn, const Tensor<S>& e_1n, const Tensor<S>& e_12, double s1, double s2);

template <typename S>
struct ModelOutput {
  Tensor<S> eps;
  /// Variance interpolation coefficient; empty when the model has no variance head.
  Tensor<S> v;
};

/// Batched noise model: x_t [R x C x H x W], one condition pair per row, shared t.
template <typename S>
using EpsModel = std::function<ModelOutput<S>(const Tensor<S>& x_t, int t, const std::vector<ConditionPair>& rows)>;

struct EvalCounter {
  long rows = 0;
  long calls = 0;
};

/// Guided noise estimate per image of x_t [B x C x H x W].
/// Both conditions present: three states in the order's sequence composed by
/// compose_dual. One condition null: two states composed by compose_single on
/// the surviving condition's scale. Both null: the unconditional estimate.
/// All states of all images go to the model in one batched call. The
/// returned v (if any) comes from each image's most-conditioned state.
template <typename S>
ModelOutput<S> guided_eps(const Tensor<S>& x_t, int t, const std::vector<ConditionPair>& pairs,
                          const GuidanceWeights& weights, const EpsModel<S>& model, const NullConditions& nulls,
                          EvalCounter* counter = nullptr);

}  // namespace sgdiff

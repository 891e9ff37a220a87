#pragma once

#include <vector>

#include "sgdiff/layers.hpp"
#include "sgdiff/schedule.hpp"

namespace sgdiff {

struct DenoiserConfig {
  int image_size = 16;
  int channels = 3;
  int base_width = 24;
  std::vector<int> multipliers = {1, 2};
  int res_blocks = 2;
  int groups = 8;
  int sinusoid_width = 32;
  int time_width = 64;
  int cond_width = 64;
  int heads = 4;
  /// Levels (0 = full resolution) whose residual blocks are followed by cross-attention.
  /// The bottleneck always has one.
  std::vector<int> attention_levels = {1};
  /// Emit a second [C x H x W] output for the variance interpolation coefficient.
  bool learn_variance = false;

  void validate() const;
};

/// Interleaved sinusoid features: position 2i holds sin(t f_i), 2i+1 holds
/// cos(t f_i) with f_i = 10000^(-i / (width / 2)).
Tensor<double> sinusoid_features(double t, int width);

void init_denoiser(ParamStore<float>& store, const DenoiserConfig& cfg, CounterRng& rng);

/// Sinusoid features of each t followed by a two-layer MLP; result [N x time_width].
/// Each t must lie in [1, T].
template <typename S>
Var<S> time_embed(BoundParams<S>& p, const DenoiserConfig& cfg, const std::vector<int>& t,
                  const NoiseSchedule& schedule);

template <typename S>
struct DenoiserOutput {
  Var<S> eps;
  /// Interpolation coefficient in [0, 1] of the log-variance between the
  /// posterior variance and beta_t; invalid when the variance head is off.
  Var<S> v;
};

/// x_t [N x C x H x W], one timestep per example, cond_tokens [N x L x cond_width].
template <typename S>
DenoiserOutput<S> predict_eps(BoundParams<S>& p, const DenoiserConfig& cfg, const Var<S>& x_t,
                              const std::vector<int>& t, const Var<S>& cond_tokens, const NoiseSchedule& schedule);

}  // namespace sgdiff

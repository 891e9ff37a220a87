#pragma once

#include <string>
#include <vector>

#include "sgdiff/guidance.hpp"
#include "sgdiff/schedule.hpp"

namespace sgdiff {

enum class SamplerKind { Ddpm, Ddim };

std::string to_string(SamplerKind kind);
SamplerKind parse_sampler_kind(const std::string& text);

struct SamplerConfig {
  SamplerKind kind = SamplerKind::Ddim;
  /// DDIM subsequence length; DDPM always walks every step.
  int steps = 50;
  double eta = 0.0;
  /// Clamp the clean-image estimate to [-1, 1] inside each step and the output.
  bool clamp_x0 = true;

  void validate(const NoiseSchedule& schedule) const;
};

/// Evenly spaced, strictly decreasing timesteps from T down to 1.
std::vector<int> ddim_timesteps(int T, int steps);

/// Standard deviation of the ancestral step at t: sqrt(beta_tilde_t), or with
/// a variance coefficient v, exp((v log beta_t + (1 - v) log beta_tilde_t) / 2)
/// using the clipped posterior log-variance.
double ddpm_sigma(const NoiseSchedule& schedule, int t, const double* v = nullptr);

/// x_{t-1} = mean + sigma z, with z = 0 at t = 1. `v` (same shape as x_t, may
/// be null) selects the learned variance. With `clamp_x0` the mean is formed
/// from the clamped clean estimate.
template <typename S>
Tensor<S> ddpm_step(const Tensor<S>& x_t, int t, const Tensor<S>& eps_hat, const NoiseSchedule& schedule,
                    CounterRng& rng, const Tensor<S>* v = nullptr, bool clamp_x0 = false);

/// sigma of a DDIM jump t -> t_prev.
double ddim_sigma(const NoiseSchedule& schedule, int t, int t_prev, double eta);

/// DDIM jump to t_prev < t (t_prev may be 0). `rng` is only drawn from when eta > 0.
template <typename S>
Tensor<S> ddim_step(const Tensor<S>& x_t, int t, int t_prev, const Tensor<S>& eps_hat, const NoiseSchedule& schedule,
                    double eta, CounterRng* rng = nullptr, bool clamp_x0 = false);

/// Generates one image per condition pair. Image i starts from x_T drawn from
/// rng.fork(i) and takes its step noise from the same stream.
template <typename S>
Tensor<S> generate(const EpsModel<S>& model, const std::vector<ConditionPair>& pairs, const GuidanceWeights& weights,
                   const SamplerConfig& cfg, const NoiseSchedule& schedule, const CounterRng& rng, const Shape& image_shape,
                   const NullConditions& nulls, EvalCounter* counter = nullptr);

}  // namespace sgdiff

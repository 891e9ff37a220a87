#pragma once

#include <string>
#include <vector>

#include "sgdiff/tensor.hpp"

namespace sgdiff {

enum class ScheduleKind { Linear, Cosine };

/// Precomputed variance-schedule tables.
///
/// Timesteps are 1-based at this API (t = 1..T, matching the forward-process
/// notation); t = 0 denotes the clean image with alpha_bar(0) = 1. Tables are
/// stored 0-based internally and always in double precision.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(std::vector<double> betas);

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_[index(t)]; }
  double alpha(int t) const { return alphas_[index(t)]; }
  /// Defined for t in [0, T].
  double alpha_bar(int t) const;
  /// beta_tilde_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t.
  double posterior_variance(int t) const { return posterior_variances_[index(t)]; }
  /// log beta_tilde_t with the t = 1 entry (which is zero) replaced by the t = 2 value.
  double posterior_log_variance_clipped(int t) const { return posterior_log_var_clipped_[index(t)]; }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  /// Throws std::out_of_range unless lo <= t <= T.
  void check_timestep(int t, int lo = 1) const;

 private:
  std::size_t index(int t) const {
    check_timestep(t);
    return static_cast<std::size_t>(t - 1);
  }

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  std::vector<double> posterior_variances_;
  std::vector<double> posterior_log_var_clipped_;
};

/// Betas interpolated linearly over t = 1..T, both endpoints included.
NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);
/// Squared-cosine alpha_bar schedule with offset `s`; betas capped at 0.999.
NoiseSchedule make_cosine_schedule(int steps, double s = 0.008);

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::Linear;
  int steps = 200;
  double beta_start = 5e-4;
  double beta_end = 0.1;

  /// Linear schedule with the [1e-4, 0.02] endpoints rescaled by 1000 / steps.
  static ScheduleConfig scaled_linear(int steps);
};

NoiseSchedule make_schedule(const ScheduleConfig& config);

/// One forward step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise.
template <typename S>
Tensor<S> q_step(const Tensor<S>& x_prev, int t, const NoiseSchedule& schedule, const Tensor<S>& noise);

/// Closed-form marginal: sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise. t in [0, T].
template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, int t, const NoiseSchedule& schedule, const Tensor<S>& noise);

/// Clean-image estimate (x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t).
/// `clamp` limits the result to [-1, 1].
template <typename S>
Tensor<S> predict_x0(const Tensor<S>& x_t, int t, const Tensor<S>& eps_hat, const NoiseSchedule& schedule,
                     bool clamp = false);

/// Reverse-process mean from a noise estimate.
template <typename S>
Tensor<S> posterior_mean_from_eps(const Tensor<S>& x_t, int t, const Tensor<S>& eps_hat,
                                  const NoiseSchedule& schedule);

/// Mean of q(x_{t-1} | x_t, x0) in its two-coefficient form.
template <typename S>
Tensor<S> posterior_mean_from_x0(const Tensor<S>& x0, const Tensor<S>& x_t, int t, const NoiseSchedule& schedule);

}  // namespace sgdiff

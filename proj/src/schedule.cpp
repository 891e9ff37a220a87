#include "sgdiff/schedule.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

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

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw ConfigError("schedule needs at least one step");
  double running = 1.0;
  for (double b : betas_) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("schedule beta " + std::to_string(b) + " outside (0, 1)");
    alphas_.push_back(1.0 - b);
    running *= 1.0 - b;
    alpha_bars_.push_back(running);
  }
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    const double prev = i == 0 ? 1.0 : alpha_bars_[i - 1];
    posterior_variances_.push_back((1.0 - prev) / (1.0 - alpha_bars_[i]) * betas_[i]);
  }
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    const double v = (i == 0) ? (betas_.size() > 1 ? posterior_variances_[1] : betas_[0]) : posterior_variances_[i];
    posterior_log_var_clipped_.push_back(std::log(v));
  }
}

double NoiseSchedule::alpha_bar(int t) const {
  check_timestep(t, 0);
  return t == 0 ? 1.0 : alpha_bars_[static_cast<std::size_t>(t - 1)];
}

void NoiseSchedule::check_timestep(int t, int lo) const {
  if (t < lo || t > steps()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                            std::to_string(steps()) + "]");
  }
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("linear schedule requires 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + f * (beta_end - beta_start);
  }
  return NoiseSchedule(std::move(betas));
}

NoiseSchedule make_cosine_schedule(int steps, double s) {
  if (steps < 1) throw ConfigError("schedule steps must be >= 1");
  auto f = [&](double t) {
    const double c = std::cos((t / steps + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  std::vector<double> betas;
  for (int i = 0; i < steps; ++i) betas.push_back(std::min(1.0 - f(i + 1) / f(i), 0.999));
  return NoiseSchedule(std::move(betas));
}

ScheduleConfig ScheduleConfig::scaled_linear(int steps) {
  const double scale = 1000.0 / steps;
  return ScheduleConfig{ScheduleKind::Linear, steps, 1e-4 * scale, std::min(0.02 * scale, 0.999)};
}

NoiseSchedule make_schedule(const ScheduleConfig& config) {
  return config.kind == ScheduleKind::Cosine ? make_cosine_schedule(config.steps)
                                             : make_linear_schedule(config.steps, config.beta_start, config.beta_end);
}

template <typename S>
Tensor<S> q_step(const Tensor<S>& x_prev, int t, const NoiseSchedule& schedule, const Tensor<S>& noise) {
  require_same("q_step", x_prev, noise);
  const double b = schedule.beta(t);
  return Tensor<S>(x_prev.shape(), (x_prev.vec() * static_cast<S>(std::sqrt(1.0 - b)) +
                                    noise.vec() * static_cast<S>(std::sqrt(b))).eval());
}

template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, int t, const NoiseSchedule& schedule, const Tensor<S>& noise) {
  require_same("q_sample", x0, noise);
  const double ab = schedule.alpha_bar(t);
  return Tensor<S>(x0.shape(), (x0.vec() * static_cast<S>(std::sqrt(ab)) +
                                noise.vec() * static_cast<S>(std::sqrt(1.0 - ab))).eval());
}

template <typename S>
Tensor<S> predict_x0(const Tensor<S>& x_t, int t, const Tensor<S>& eps_hat, const NoiseSchedule& schedule, bool clamp) {
  require_same("predict_x0", x_t, eps_hat);
  const double ab = schedule.alpha_bar(t);
  if (ab <= 0.0) throw std::domain_error("predict_x0: alpha_bar is zero at t=" + std::to_string(t));
  Tensor<S> out(x_t.shape(), ((x_t.vec() - eps_hat.vec() * static_cast<S>(std::sqrt(1.0 - ab))) /
                              static_cast<S>(std::sqrt(ab))).eval());
  if (clamp) out.vec() = out.vec().cwiseMax(S(-1)).cwiseMin(S(1));
  return out;
}

template <typename S>
Tensor<S> posterior_mean_from_eps(const Tensor<S>& x_t, int t, const Tensor<S>& eps_hat, const NoiseSchedule& schedule) {
  require_same("posterior_mean_from_eps", x_t, eps_hat);
  const double a = schedule.alpha(t);
  const double coef = (1.0 - a) / std::sqrt(1.0 - schedule.alpha_bar(t));
  return Tensor<S>(x_t.shape(), ((x_t.vec() - eps_hat.vec() * static_cast<S>(coef)) /
                                 static_cast<S>(std::sqrt(a))).eval());
}

template <typename S>
Tensor<S> posterior_mean_from_x0(const Tensor<S>& x0, const Tensor<S>& x_t, int t, const NoiseSchedule& schedule) {
  require_same("posterior_mean_from_x0", x0, x_t);
  const double ab = schedule.alpha_bar(t), ab_prev = schedule.alpha_bar(t - 1);
  const double c0 = std::sqrt(ab_prev) * schedule.beta(t) / (1.0 - ab);
  const double ct = std::sqrt(schedule.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
  return Tensor<S>(x0.shape(), (x0.vec() * static_cast<S>(c0) + x_t.vec() * static_cast<S>(ct)).eval());
}

#define SGDIFF_INSTANTIATE_SCHEDULE(S)                                                                        \
  template Tensor<S> q_step(const Tensor<S>&, int, const NoiseSchedule&, const Tensor<S>&);                   \
  template Tensor<S> q_sample(const Tensor<S>&, int, const NoiseSchedule&, const Tensor<S>&);                 \
  template Tensor<S> predict_x0(const Tensor<S>&, int, const Tensor<S>&, const NoiseSchedule&, bool);         \
  template Tensor<S> posterior_mean_from_eps(const Tensor<S>&, int, const Tensor<S>&, const NoiseSchedule&);  \
  template Tensor<S> posterior_mean_from_x0(const Tensor<S>&, const Tensor<S>&, int, const NoiseSchedule&);

SGDIFF_INSTANTIATE_SCHEDULE(float)
SGDIFF_INSTANTIATE_SCHEDULE(double)

}  // namespace sgdiff

#include "sgdiff/sampler.hpp"

#include <cmath>
#include <stdexcept>

namespace sgdiff {

std::string to_string(SamplerKind kind) { return kind == SamplerKind::Ddpm ? "ddpm" : "ddim"; }

SamplerKind parse_sampler_kind(const std::string& text) {
  if (text == "ddpm") return SamplerKind::Ddpm;
  if (text == "ddim") return SamplerKind::Ddim;
  throw ConfigError("unknown sampler '" + text + "' (expected ddpm or ddim)");
}

void SamplerConfig::validate(const NoiseSchedule& schedule) const {
  if (steps < 1 || steps > schedule.steps()) {
    throw ConfigError("sampler steps " + std::to_string(steps) + " outside [1, " + std::to_string(schedule.steps()) +
                      "]");
  }
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("sampler eta must lie in [0, 1]");
}

std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw ConfigError("ddim step count must lie in [1, T]");
  std::vector<int> ts;
  if (steps == 1) return {T};
  for (int i = 0; i < steps; ++i) {
    ts.push_back(static_cast<int>(std::lround(T - static_cast<double>(T - 1) * i / (steps - 1))));
  }
  return ts;
}

double ddpm_sigma(const NoiseSchedule& schedule, int t, const double* v) {
  if (v == nullptr) return std::sqrt(schedule.posterior_variance(t));
  const double log_var = *v * std::log(schedule.beta(t)) + (1.0 - *v) * schedule.posterior_log_variance_clipped(t);
  return std::exp(0.5 * log_var);
}

template <typename S>
Tensor<S> ddpm_step(const Tensor<S>& x_t, int t, const Tensor<S>& eps_hat, const NoiseSchedule& schedule,
                    CounterRng& rng, const Tensor<S>* v, bool clamp_x0) {
  Tensor<S> out = clamp_x0 ? posterior_mean_from_x0(predict_x0(x_t, t, eps_hat, schedule, true), x_t, t, schedule)
                           : posterior_mean_from_eps(x_t, t, eps_hat, schedule);
  if (t == 1) return out;
  if (v != nullptr && v->shape() != x_t.shape()) throw DimensionError("ddpm_step: variance coefficient shape");
  const double fixed = ddpm_sigma(schedule, t);
  for (Index i = 0; i < out.size(); ++i) {
    double sigma = fixed;
    if (v != nullptr) {
      const double vi = static_cast<double>((*v)[i]);
      sigma = ddpm_sigma(schedule, t, &vi);
    }
    out[i] += static_cast<S>(sigma * rng.normal());
  }
  return out;
}

double ddim_sigma(const NoiseSchedule& schedule, int t, int t_prev, double eta) {
  const double ab = schedule.alpha_bar(t), ab_prev = schedule.alpha_bar(t_prev);
  return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
}

template <typename S>
Tensor<S> ddim_step(const Tensor<S>& x_t, int t, int t_prev, const Tensor<S>& eps_hat, const NoiseSchedule& schedule,
                    double eta, CounterRng* rng, bool clamp_x0) {
  if (t_prev >= t) {
    throw std::invalid_argument("ddim_step: t_prev " + std::to_string(t_prev) + " must be below t " +
                                std::to_string(t));
  }
  schedule.check_timestep(t_prev, 0);
  const Tensor<S> x0 = predict_x0(x_t, t, eps_hat, schedule, clamp_x0);
  const double ab = schedule.alpha_bar(t), ab_prev = schedule.alpha_bar(t_prev);
  const double sigma = ddim_sigma(schedule, t, t_prev, eta);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  // After clamping, the direction term uses the noise implied by the clamped x0.
  const Tensor<S> eps = clamp_x0 ? Tensor<S>(x_t.shape(), ((x_t.vec() - static_cast<S>(std::sqrt(ab)) * x0.vec()) /
                                                             static_cast<S>(std::sqrt(1.0 - ab)))
                                                                .eval())
                                 : eps_hat;
  Tensor<S> out(x_t.shape(), (x0.vec() * static_cast<S>(std::sqrt(ab_prev)) + eps.vec() * static_cast<S>(dir)).eval());
  if (sigma > 0.0) {
    if (rng == nullptr) throw std::invalid_argument("ddim_step: eta > 0 needs a random stream");
    for (Index i = 0; i < out.size(); ++i) out[i] += static_cast<S>(sigma * rng->normal());
  }
  return out;
}

template <typename S>
Tensor<S> generate(const EpsModel<S>& model, const std::vector<ConditionPair>& pairs, const GuidanceWeights& weights,
                   const SamplerConfig& cfg, const NoiseSchedule& schedule, const CounterRng& rng,
                   const Shape& image_shape, const NullConditions& nulls, EvalCounter* counter) {
  cfg.validate(schedule);
  const Index n = static_cast<Index>(pairs.size());
  const Index inner = shape_size(image_shape);
  Shape batch_shape = image_shape;
  batch_shape.insert(batch_shape.begin(), n);

  std::vector<CounterRng> streams;
  Tensor<S> x(batch_shape);
  for (Index i = 0; i < n; ++i) {
    streams.push_back(rng.fork(static_cast<std::uint64_t>(i)));
    for (Index j = 0; j < inner; ++j) x[i * inner + j] = static_cast<S>(streams.back().normal());
  }
  std::vector<int> ts;
  if (cfg.kind == SamplerKind::Ddim) {
    ts = ddim_timesteps(schedule.steps(), cfg.steps);
  } else {
    for (int t = schedule.steps(); t >= 1; --t) ts.push_back(t);
  }

  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const ModelOutput<S> guided = guided_eps(x, t, pairs, weights, model, nulls, counter);
    Tensor<S> next(batch_shape);
    for (Index i = 0; i < n; ++i) {
      const Tensor<S> xi(image_shape, x.vec().segment(i * inner, inner));
      const Tensor<S> ei(image_shape, guided.eps.vec().segment(i * inner, inner));
      Tensor<S> step;
      if (cfg.kind == SamplerKind::Ddim) {
        const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
        step = ddim_step(xi, t, t_prev, ei, schedule, cfg.eta, &streams[static_cast<std::size_t>(i)], cfg.clamp_x0);
      } else {
        Tensor<S> vi;
        if (guided.v.size() > 0) vi = Tensor<S>(image_shape, guided.v.vec().segment(i * inner, inner));
        step = ddpm_step(xi, t, ei, schedule, streams[static_cast<std::size_t>(i)], vi.size() > 0 ? &vi : nullptr,
                         cfg.clamp_x0);
      }
      next.vec().segment(i * inner, inner) = step.vec();
    }
    x = std::move(next);
  }
  if (cfg.clamp_x0) x.vec() = x.vec().cwiseMax(S(-1)).cwiseMin(S(1));
  return x;
}

#define SGDIFF_INSTANTIATE_SAMPLER(S)                                                                          \
  template Tensor<S> ddpm_step(const Tensor<S>&, int, const Tensor<S>&, const NoiseSchedule&, CounterRng&,     \
                               const Tensor<S>*, bool);                                                        \
  template Tensor<S> ddim_step(const Tensor<S>&, int, int, const Tensor<S>&, const NoiseSchedule&, double,     \
                               CounterRng*, bool);                                                             \
  template Tensor<S> generate(const EpsModel<S>&, const std::vector<ConditionPair>&, const GuidanceWeights&,   \
                              const SamplerConfig&, const NoiseSchedule&, const CounterRng&, const Shape&,     \
                              const NullConditions&, EvalCounter*);

SGDIFF_INSTANTIATE_SAMPLER(float)
SGDIFF_INSTANTIATE_SAMPLER(double)

}  // namespace sgdiff

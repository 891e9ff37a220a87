#include "sgdiff/losses.hpp"

#include <cmath>
#include <memory>
#include <numbers>

#include "sgdiff/ops.hpp"

namespace sgdiff {
namespace {

constexpr double kBin = 1.0 / 255.0;
constexpr double kMinProb = 1e-12;

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
/// P(Z > x)
double upper_tail(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

/// Bin mass and its derivative with respect to log sigma.
std::pair<double, double> bin_mass(double x, double mu, double log_var) {
  const double sigma = std::exp(0.5 * log_var);
  const double hi = (x - mu + kBin) / sigma, lo = (x - mu - kBin) / sigma;
  // Phi(x) = upper_tail(-x); each branch subtracts tails on the accurate side.
  double p = 0, dp = 0;
  if (x < -0.999) {
    p = upper_tail(-hi);
    dp = -hi * normal_pdf(hi);
  } else if (x > 0.999) {
    p = upper_tail(lo);
    dp = lo * normal_pdf(lo);
  } else {
    if (lo > 0) {
      p = upper_tail(lo) - upper_tail(hi);
    } else if (hi < 0) {
      p = upper_tail(-hi) - upper_tail(-lo);
    } else {
      p = 1.0 - upper_tail(hi) - upper_tail(-lo);
    }
    dp = -hi * normal_pdf(hi) + lo * normal_pdf(lo);
  }
  return {p, dp};
}

}  // namespace

void LossWeights::validate() const {
  if (!(lambda_simple >= 0 && lambda_perc >= 0)) throw ConfigError("loss weights must be non-negative");
}

template <typename S>
Var<S> l_simple(const Var<S>& eps_true, const Var<S>& eps_hat) {
  return mse(eps_hat, eps_true);
}

double gaussian_kl(double mu1, double log_var1, double mu2, double log_var2) {
  const double d = mu1 - mu2;
  return 0.5 * (-1.0 + log_var2 - log_var1 + std::exp(log_var1 - log_var2) + d * d * std::exp(-log_var2));
}

double discretized_gaussian_nll(double x, double mu, double log_var) {
  return -std::log(std::max(bin_mass(x, mu, log_var).first, kMinProb));
}

template <typename S>
Var<S> l_vlb(const Tensor<S>& x0, const Tensor<S>& x_t, const std::vector<int>& t, const Var<S>& eps_hat,
             const Var<S>& v, const NoiseSchedule& schedule, const Tensor<S>* mean_eps) {
  const Tensor<S>& eps = mean_eps ? *mean_eps : eps_hat.value();
  if (x0.shape() != x_t.shape() || eps.shape() != x0.shape() || (v.valid() && v.shape() != x0.shape())) {
    throw DimensionError("l_vlb: shape mismatch among " + shape_string(x0.shape()) + ", " +
                         shape_string(x_t.shape()) + ", " + shape_string(eps.shape()));
  }
  const Index n = x0.dim(0);
  if (static_cast<Index>(t.size()) != n) throw DimensionError("l_vlb: one timestep per example required");
  const Index inner = x0.size() / n;
  const double count = static_cast<double>(x0.size());

  double total = 0;
  auto dloss = std::make_shared<Tensor<S>>(x0.shape());
  for (Index b = 0; b < n; ++b) {
    const int tb = t[static_cast<std::size_t>(b)];
    schedule.check_timestep(tb);
    const double ab = schedule.alpha_bar(tb), ab_prev = schedule.alpha_bar(tb - 1);
    const double a = schedule.alpha(tb), beta = schedule.beta(tb);
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(a) * (1.0 - ab_prev) / (1.0 - ab);
    const double ce = beta / std::sqrt(1.0 - ab);
    const double lv_post = schedule.posterior_log_variance_clipped(tb);
    const double span = std::log(beta) - lv_post;
    for (Index j = b * inner; j < (b + 1) * inner; ++j) {
      const double xt = x_t[j], x = x0[j];
      const double mu_model = (xt - ce * static_cast<double>(eps[j])) / std::sqrt(a);
      const double vj = v.valid() ? static_cast<double>(v.value()[j]) : 0.0;
      const double lv_model = vj * std::log(beta) + (1.0 - vj) * lv_post;
      double term = 0, grad = 0;
      if (tb == 1) {
        const auto [p, dp_dlogsigma] = bin_mass(x, mu_model, lv_model);
        term = -std::log(std::max(p, kMinProb));
        // d log sigma / dv = span / 2
        grad = p > kMinProb ? -dp_dlogsigma / p * 0.5 * span : 0.0;
      } else {
        const double mu_true = c0 * x + ct * xt;
        term = gaussian_kl(mu_true, lv_post, mu_model, lv_model);
        const double d = mu_true - mu_model;
        grad = 0.5 * (1.0 - std::exp(lv_post - lv_model) - d * d * std::exp(-lv_model)) * span;
      }
      total += term;
      (*dloss)[j] = static_cast<S>(grad / count);
    }
  }
  Tape<S>& tape = eps_hat.tape();
  Tensor<S> value = Tensor<S>::scalar(static_cast<S>(total / count));
  if (!v.valid()) return tape.constant(std::move(value));
  return tape.record("l_vlb", std::move(value), {v}, [v, dloss](const Tensor<S>& g) {
    v.grad().vec() += dloss->vec() * g.item();
  });
}

template <typename S>
FeatureExtractor<S>::FeatureExtractor(const ExtractorConfig& cfg) : cfg_(cfg) {
  if (cfg.channels.empty()) throw ConfigError("feature extractor needs at least one stage");
  if (cfg.image_size % (1 << (cfg.channels.size() - 1)) != 0) {
    throw ConfigError("feature extractor: image size not divisible by its pooling depth");
  }
  CounterRng rng(cfg.seed);
  Index in = cfg.in_channels;
  for (int c : cfg.channels) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in * 9));
    kernels_.push_back(Tensor<double>::randn({c, in, 3, 3}, rng, stddev).template cast<S>());
    biases_.push_back(Tensor<double>::randn({c}, rng, 0.1).template cast<S>());
    in = c;
  }
}

template <typename S>
std::vector<Var<S>> FeatureExtractor<S>::features(const Var<S>& images) const {
  if (images.value().rank() != 4 || images.dim(1) != cfg_.in_channels || images.dim(2) != cfg_.image_size ||
      images.dim(3) != cfg_.image_size) {
    throw DimensionError("feature extractor: input " + shape_string(images.shape()) + " does not match size " +
                         std::to_string(cfg_.image_size));
  }
  Tape<S>& tape = images.tape();
  std::vector<Var<S>> out;
  Var<S> h = images;
  for (std::size_t m = 0; m < kernels_.size(); ++m) {
    if (m > 0) h = avg_pool2(h);
    h = relu(conv2d(h, tape.constant(kernels_[m]), tape.constant(biases_[m]), 1, 1));
    out.push_back(h);
  }
  return out;
}

template <typename S>
Tensor<S> FeatureExtractor<S>::pooled(const Tensor<S>& images) const {
  Tape<S> tape;
  const Var<S> last = features(tape.constant(images)).back();
  const Index n = last.dim(0), c = last.dim(1), hw = last.dim(2) * last.dim(3);
  Tensor<S> out({n, c});
  const auto flat = last.value().matrix(n * c, hw);
  for (Index i = 0; i < n * c; ++i) out[i] = flat.row(i).mean();
  return out;
}

template <typename S>
Var<S> l_perceptual(const Var<S>& x0_hat, const Tensor<S>& x0, const FeatureExtractor<S>& extractor) {
  if (x0_hat.shape() != x0.shape()) {
    throw DimensionError("l_perceptual: size mismatch " + shape_string(x0_hat.shape()) + " vs " +
                         shape_string(x0.shape()));
  }
  Tape<S>& tape = x0_hat.tape();
  const auto a = extractor.features(x0_hat);
  const auto b = extractor.features(tape.constant(x0));
  const Index n = x0.dim(0);
  Var<S> total;
  for (std::size_t m = 0; m < a.size(); ++m) {
    const Index per_example = a[m].size() / n;
    Var<S> norms = row_norms(reshape(sub(a[m], b[m]), {n, per_example}));
    Var<S> stage = scale(sum(norms), S(1) / static_cast<S>(per_example * n * static_cast<Index>(a.size())));
    total = total.valid() ? add(total, stage) : stage;
  }
  return total;
}

template <typename S>
Var<S> predict_x0_var(const Tensor<S>& x_t, const std::vector<int>& t, const Var<S>& eps_hat,
                      const NoiseSchedule& schedule) {
  const Index n = x_t.dim(0), inner = x_t.size() / n;
  if (static_cast<Index>(t.size()) != n) throw DimensionError("predict_x0: one timestep per example required");
  std::vector<S> factors;
  Tensor<S> offset(x_t.shape());
  for (Index b = 0; b < n; ++b) {
    const double ab = schedule.alpha_bar(t[static_cast<std::size_t>(b)]);
    factors.push_back(static_cast<S>(-std::sqrt(1.0 - ab) / std::sqrt(ab)));
    offset.vec().segment(b * inner, inner) = x_t.vec().segment(b * inner, inner) / static_cast<S>(std::sqrt(ab));
  }
  return add(scale_examples(eps_hat, factors), eps_hat.tape().constant(std::move(offset)));
}

template <typename S>
LossTerms<S> total_loss(const Tensor<S>& x0, const Tensor<S>& x_t, const Tensor<S>& noise, const std::vector<int>& t,
                        const DenoiserOutput<S>& out, const LossWeights& weights, const NoiseSchedule& schedule,
                        const FeatureExtractor<S>& extractor, const Tensor<S>* mean_eps) {
  weights.validate();
  Tape<S>& tape = out.eps.tape();
  LossTerms<S> terms;
  Var<S> simple = l_simple(tape.constant(noise), out.eps);
  Var<S> vlb = l_vlb(x0, x_t, t, out.eps, out.v, schedule, mean_eps);
  terms.l_simple = static_cast<double>(simple.value().item());
  terms.l_vlb = static_cast<double>(vlb.value().item());
  Var<S> total = add(scale(simple, static_cast<S>(weights.lambda_simple)), vlb);
  terms.weighted_simple = static_cast<double>(static_cast<S>(weights.lambda_simple) * simple.value().item());
  if (weights.lambda_perc > 0) {
    Var<S> perc = l_perceptual(predict_x0_var(x_t, t, out.eps, schedule), x0, extractor);
    terms.l_perc = static_cast<double>(perc.value().item());
    terms.weighted_perc = static_cast<double>(static_cast<S>(weights.lambda_perc) * perc.value().item());
    total = add(total, scale(perc, static_cast<S>(weights.lambda_perc)));
  }
  terms.total = total;
  return terms;
}

template class FeatureExtractor<float>;
template class FeatureExtractor<double>;

#define SGDIFF_INSTANTIATE_LOSSES(S)                                                                              \
  template Var<S> l_simple(const Var<S>&, const Var<S>&);                                                         \
  template Var<S> l_vlb(const Tensor<S>&, const Tensor<S>&, const std::vector<int>&, const Var<S>&, const Var<S>&, \
                        const NoiseSchedule&, const Tensor<S>*);                                                  \
  template Var<S> l_perceptual(const Var<S>&, const Tensor<S>&, const FeatureExtractor<S>&);                      \
  template Var<S> predict_x0_var(const Tensor<S>&, const std::vector<int>&, const Var<S>&, const NoiseSchedule&); \
  template LossTerms<S> total_loss(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const std::vector<int>&, \
                                   const DenoiserOutput<S>&, const LossWeights&, const NoiseSchedule&,            \
                                   const FeatureExtractor<S>&, const Tensor<S>*);

SGDIFF_INSTANTIATE_LOSSES(float)
SGDIFF_INSTANTIATE_LOSSES(double)

}  // namespace sgdiff

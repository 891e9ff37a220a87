#include <cmath>
#include <numbers>

#include "doctest.h"
#include "sgdiff/losses.hpp"
#include "support/gradcheck.hpp"

using namespace sgdiff;
using sgdiff::testing::check_gradients;
using T = Tensor<double>;

namespace {

// Trapezoid rule for KL(p || q) over [-12, 12] standard deviations of p.
double kl_quadrature(double mu1, double s1, double mu2, double s2) {
  const int n = 200000;
  const double lo = mu1 - 12 * s1, hi = mu1 + 12 * s1, h = (hi - lo) / n;
  auto logpdf = [](double x, double m, double s) {
    return -0.5 * std::log(2 * std::numbers::pi) - std::log(s) - 0.5 * (x - m) * (x - m) / (s * s);
  };
  double acc = 0;
  for (int i = 0; i <= n; ++i) {
    const double x = lo + i * h;
    const double lp = logpdf(x, mu1, s1);
    const double f = std::exp(lp) * (lp - logpdf(x, mu2, s2));
    acc += (i == 0 || i == n) ? 0.5 * f : f;
  }
  return acc * h;
}

// Bin mass by Simpson integration of the density.
double bin_mass_quadrature(double a, double b, double mu, double s) {
  const int n = 2000;
  const double h = (b - a) / n;
  double acc = 0;
  for (int i = 0; i <= n; ++i) {
    const double x = a + i * h;
    const double f = std::exp(-0.5 * (x - mu) * (x - mu) / (s * s)) / (s * std::sqrt(2 * std::numbers::pi));
    acc += f * ((i == 0 || i == n) ? 1 : (i % 2 ? 4 : 2));
  }
  return acc * h / 3;
}

// Direct per-stage computation with plain loops.
std::vector<std::vector<double>> staged_features(const T& img, const FeatureExtractor<double>& ext) {
  std::vector<std::vector<double>> stages;
  std::vector<double> cur(img.vec().data(), img.vec().data() + img.size());
  Index c_in = img.dim(0), size = img.dim(1);
  for (int m = 0; m < ext.stages(); ++m) {
    if (m > 0) {
      std::vector<double> pooled(static_cast<std::size_t>(c_in * (size / 2) * (size / 2)));
      for (Index c = 0; c < c_in; ++c)
        for (Index y = 0; y < size / 2; ++y)
          for (Index x = 0; x < size / 2; ++x) {
            double s = 0;
            for (Index dy = 0; dy < 2; ++dy)
              for (Index dx = 0; dx < 2; ++dx) s += cur[static_cast<std::size_t>((c * size + 2 * y + dy) * size + 2 * x + dx)];
            pooled[static_cast<std::size_t>((c * (size / 2) + y) * (size / 2) + x)] = s / 4;
          }
      cur = pooled;
      size /= 2;
    }
    const T& k = ext.kernel(m);
    const T& b = ext.bias(m);
    const Index c_out = k.dim(0);
    std::vector<double> out(static_cast<std::size_t>(c_out * size * size));
    for (Index o = 0; o < c_out; ++o)
      for (Index y = 0; y < size; ++y)
        for (Index x = 0; x < size; ++x) {
          double s = b[o];
          for (Index c = 0; c < c_in; ++c)
            for (Index dy = -1; dy <= 1; ++dy)
              for (Index dx = -1; dx <= 1; ++dx) {
                const Index yy = y + dy, xx = x + dx;
                if (yy < 0 || xx < 0 || yy >= size || xx >= size) continue;
                s += k[((o * c_in + c) * 3 + dy + 1) * 3 + dx + 1] * cur[static_cast<std::size_t>((c * size + yy) * size + xx)];
              }
          out[static_cast<std::size_t>((o * size + y) * size + x)] = std::max(0.0, s);
        }
    stages.push_back(out);
    cur = out;
    c_in = c_out;
  }
  return stages;
}

}  // namespace

TEST_CASE("l_simple") {
  CounterRng rng(1);
  Tape<double> tape;
  const T a = T::randn({2, 3, 4, 4}, rng), b = T::randn({2, 3, 4, 4}, rng);
  CHECK(l_simple(tape.constant(a), tape.constant(a)).value().item() == 0.0);
  CHECK(l_simple(tape.constant(T({4})), tape.constant(T::full({4}, 1.5))).value().item() == doctest::Approx(2.25));
  double acc = 0;
  for (Index i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(std::abs(l_simple(tape.constant(a), tape.constant(b)).value().item() - acc / a.size()) < 1e-10);
  CHECK_THROWS_AS(l_simple(tape.constant(a), tape.constant(T({3}))), DimensionError);
}

TEST_CASE("Gaussian KL and discretised likelihood") {
  CHECK(gaussian_kl(0, 0, 1, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(gaussian_kl(0.3, -1.0, 0.3, -1.0) == 0.0);
  CounterRng rng(2);
  for (int i = 0; i < 10; ++i) {
    const double mu1 = rng.normal(), mu2 = rng.normal();
    const double s1 = 0.3 + rng.uniform(), s2 = 0.3 + rng.uniform();
    const double closed = gaussian_kl(mu1, 2 * std::log(s1), mu2, 2 * std::log(s2));
    CHECK(std::abs(closed - kl_quadrature(mu1, s1, mu2, s2)) < 1e-4);
  }
  for (double x : {-0.2, 0.0, 0.5, 0.7}) {
    for (double s : {0.01, 0.05, 0.3}) {
      const double mu = x + 0.3 * s;
      const double mass = bin_mass_quadrature(x - 1.0 / 255, x + 1.0 / 255, mu, s);
      CHECK(discretized_gaussian_nll(x, mu, 2 * std::log(s)) == doctest::Approx(-std::log(mass)).epsilon(1e-6));
    }
  }
  // edge bins are open-ended: near-certain mass when the mean sits past the edge
  CHECK(discretized_gaussian_nll(-1.0, -1.5, 2 * std::log(0.01)) < 1e-9);
  CHECK(discretized_gaussian_nll(1.0, 1.5, 2 * std::log(0.01)) < 1e-9);
}

TEST_CASE("l_vlb") {
  const auto s = make_schedule(ScheduleConfig::scaled_linear(200));
  CounterRng rng(3);
  const T x0 = T::randn({3, 3, 4, 4}, rng, 0.4);
  const T noise = T::randn({3, 3, 4, 4}, rng);
  const std::vector<int> ts = {2, 60, 200};
  T xt(x0.shape());
  const Index inner = 48;
  for (Index b = 0; b < 3; ++b) {
    xt.vec().segment(b * inner, inner) =
        q_sample(slice_leading(x0, b, 1), ts[static_cast<std::size_t>(b)], s, slice_leading(noise, b, 1)).vec();
  }
  Tape<double> tape;
  // exact mean and posterior variance
  const Var<double> v0 = tape.variable(T(x0.shape()));
  CHECK(std::abs(l_vlb(x0, xt, ts, tape.constant(noise), v0, s).value().item()) < 1e-9);
  CHECK(std::abs(l_vlb(x0, xt, ts, tape.constant(noise), Var<double>(), s).value().item()) < 1e-9);

  // fixed variance: a scaled squared noise error for t > 1
  const T eps_hat = T::randn(x0.shape(), rng);
  const double fixed = l_vlb(x0, xt, ts, tape.constant(eps_hat), Var<double>(), s).value().item();
  double expected = 0;
  for (Index b = 0; b < 3; ++b) {
    const int t = ts[static_cast<std::size_t>(b)];
    const double coef = s.beta(t) / (std::sqrt(s.alpha(t)) * std::sqrt(1 - s.alpha_bar(t)));
    for (Index j = b * inner; j < (b + 1) * inner; ++j) {
      const double d = eps_hat[j] - noise[j];
      expected += 0.5 * coef * coef / s.posterior_variance(t) * d * d;
    }
  }
  CHECK(fixed == doctest::Approx(expected / x0.size()).epsilon(1e-10));

  // t = 1 uses the discretised likelihood
  const T pix = T::full({1, 1, 1, 1}, 0.2);
  const T pix_t = q_sample(pix, 1, s, T::full({1, 1, 1, 1}, 0.3));
  const double nll = l_vlb(pix, pix_t, {1}, tape.constant(T::full({1, 1, 1, 1}, 0.3)), Var<double>(), s)
                         .value()
                         .item();
  CHECK(nll == doctest::Approx(discretized_gaussian_nll(0.2, 0.2, s.posterior_log_variance_clipped(1))).epsilon(1e-9));

  CHECK_THROWS_AS(l_vlb(x0, xt, {0, 1, 2}, tape.constant(noise), Var<double>(), s), std::out_of_range);

  // gradient reaches v only, and matches finite differences at every t
  for (int t : {1, 2, 37, 200}) {
    const std::vector<int> tt(3, t);
    const T v = T::randn(x0.shape(), rng, 0.3);
    auto r = check_gradients(
        [&](Tape<double>& tp, const std::vector<Var<double>>& in) {
          return l_vlb(x0, xt, tt, tp.constant(eps_hat), in[0], s);
        },
        {v});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("perceptual loss") {
  FeatureExtractor<double> ext(ExtractorConfig{16, 3, {8, 16, 32, 32, 32}, 9});
  CHECK(ext.stages() == 5);
  CounterRng rng(4);
  const T a = T::randn({2, 3, 16, 16}, rng, 0.5), b = T::randn({2, 3, 16, 16}, rng, 0.5);
  Tape<double> tape;
  CHECK(l_perceptual(tape.constant(a), a, ext).value().item() == 0.0);
  CHECK(l_perceptual(tape.constant(a), b, ext).value().item() > 0.0);
  CHECK_THROWS_AS(l_perceptual(tape.constant(a), T({2, 3, 8, 8}), ext), DimensionError);
  CHECK(ext.pooled(a).shape() == Shape{2, 32});

  // two-stage extractor on 4x4 images against the loop oracle
  FeatureExtractor<double> small(ExtractorConfig{4, 3, {4, 5}, 10});
  const T x = T::randn({1, 3, 4, 4}, rng), y = T::randn({1, 3, 4, 4}, rng);
  const auto fx = staged_features(x.reshaped({3, 4, 4}), small);
  const auto fy = staged_features(y.reshaped({3, 4, 4}), small);
  double expected = 0;
  for (std::size_t m = 0; m < fx.size(); ++m) {
    double sq = 0;
    for (std::size_t i = 0; i < fx[m].size(); ++i) sq += (fx[m][i] - fy[m][i]) * (fx[m][i] - fy[m][i]);
    expected += std::sqrt(sq) / static_cast<double>(fx[m].size());
  }
  expected /= 2;
  CHECK(std::abs(l_perceptual(tape.constant(x), y, small).value().item() - expected) < 1e-8);

  // extractor is a pure function of its seed
  FeatureExtractor<double> again(ExtractorConfig{16, 3, {8, 16, 32, 32, 32}, 9});
  for (int m = 0; m < 5; ++m) CHECK(again.kernel(m) == ext.kernel(m));
}

TEST_CASE("total loss") {
  const auto s = make_schedule(ScheduleConfig::scaled_linear(200));
  FeatureExtractor<double> ext(ExtractorConfig{});
  CounterRng rng(5);
  const T x0 = T::randn({2, 3, 16, 16}, rng, 0.4);
  const T noise = T::randn({2, 3, 16, 16}, rng);
  const std::vector<int> ts = {30, 140};
  T xt(x0.shape());
  for (Index b = 0; b < 2; ++b) {
    xt.vec().segment(b * 768, 768) =
        q_sample(slice_leading(x0, b, 1), ts[static_cast<std::size_t>(b)], s, slice_leading(noise, b, 1)).vec();
  }
  {
    Tape<double> tape;
    DenoiserOutput<double> exact{tape.constant(noise), Var<double>()};
    auto terms = total_loss(x0, xt, noise, ts, exact, LossWeights{1.0, 0.0}, s, ext);
    CHECK(terms.total.value().item() == doctest::Approx(terms.l_simple).epsilon(1e-12));
    CHECK(std::abs(terms.l_vlb) < 1e-9);
  }
  const LossWeights defaults;
  CHECK(defaults.lambda_simple == 1.0);
  CHECK(defaults.lambda_perc == 0.001);

  const T eps_hat = T::randn(x0.shape(), rng);
  const T v = T::randn(x0.shape(), rng, 0.3);
  Tape<double> tape;
  DenoiserOutput<double> out{tape.variable(eps_hat), tape.variable(v)};
  auto terms = total_loss(x0, xt, noise, ts, out, LossWeights{1.0, 0.5}, s, ext);
  CHECK(terms.l_simple > 0);
  CHECK(terms.l_vlb > 0);
  CHECK(terms.l_perc > 0);
  CHECK(std::abs(terms.weighted_simple + terms.l_vlb + terms.weighted_perc - terms.total.value().item()) < 1e-7);

  // gradients through the clean-image estimate, with the vlb mean held at eps_hat
  auto r = check_gradients(
      [&](Tape<double>& tp, const std::vector<Var<double>>& in) {
        DenoiserOutput<double> o{in[0], in[1]};
        return total_loss(x0, xt, noise, ts, o, LossWeights{1.0, 0.5}, s, ext, &eps_hat).total;
      },
      {eps_hat, v});
  CHECK(r.max_rel_error < 1e-4);
}

#pragma once

#include <cstdint>
#include <vector>

#include "sgdiff/denoiser.hpp"
#include "sgdiff/schedule.hpp"

namespace sgdiff {

struct LossWeights {
  double lambda_simple = 1.0;
  double lambda_perc = 0.001;

  void validate() const;
};

/// Mean squared error over all elements.
template <typename S>
Var<S> l_simple(const Var<S>& eps_true, const Var<S>& eps_hat);

/// KL(N(mu1, exp(lv1)) || N(mu2, exp(lv2))) per element, in nats.
double gaussian_kl(double mu1, double log_var1, double mu2, double log_var2);

/// -log of the N(mu, exp(log_var)) mass of the pixel bin around x in [-1, 1];
/// bins are 2/255 wide and the edge bins extend to infinity.
double discretized_gaussian_nll(double x, double mu, double log_var);

/// Variational bound term per element, averaged over the batch (nats per element).
/// t > 1: KL between the true posterior and the model Gaussian; t = 1: the
/// discretised likelihood of x0. The model mean comes from eps_hat with the
/// gradient stopped; the model log-variance interpolates between the clipped
/// posterior log-variance (v = 0) and log beta_t (v = 1). Gradient flows to
/// `v` only. An invalid `v` means fixed posterior variance (no gradient).
/// `mean_eps` replaces eps_hat for the mean when given.
template <typename S>
Var<S> l_vlb(const Tensor<S>& x0, const Tensor<S>& x_t, const std::vector<int>& t, const Var<S>& eps_hat,
             const Var<S>& v, const NoiseSchedule& schedule, const Tensor<S>* mean_eps = nullptr);

struct ExtractorConfig {
  int image_size = 16;
  int in_channels = 3;
  std::vector<int> channels = {8, 16, 32, 32, 32};
  std::uint64_t seed = 1234;
};

/// Frozen random convolutional pyramid. Stage m applies a 3x3 conv and ReLU;
/// stages after the first start with a 2x average pool.
template <typename S>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(const ExtractorConfig& cfg);

  const ExtractorConfig& config() const { return cfg_; }
  int stages() const { return static_cast<int>(cfg_.channels.size()); }

  /// Stage outputs for images [N x C x H x W]; kernels enter the tape as constants.
  std::vector<Var<S>> features(const Var<S>& images) const;
  /// Global average of the last stage: [N x channels.back()].
  Tensor<S> pooled(const Tensor<S>& images) const;

  const Tensor<S>& kernel(int stage) const { return kernels_.at(static_cast<std::size_t>(stage)); }
  const Tensor<S>& bias(int stage) const { return biases_.at(static_cast<std::size_t>(stage)); }

 private:
  ExtractorConfig cfg_;
  std::vector<Tensor<S>> kernels_;
  std::vector<Tensor<S>> biases_;
};

/// Mean over stages of ||psi_m(a) - psi_m(b)||_2 / numel(psi_m), averaged over
/// the batch. Gradient flows to `x0_hat`.
template <typename S>
Var<S> l_perceptual(const Var<S>& x0_hat, const Tensor<S>& x0, const FeatureExtractor<S>& extractor);

/// Clean estimate as a differentiable function of eps_hat, per-example t.
template <typename S>
Var<S> predict_x0_var(const Tensor<S>& x_t, const std::vector<int>& t, const Var<S>& eps_hat,
                      const NoiseSchedule& schedule);

template <typename S>
struct LossTerms {
  Var<S> total;
  double l_simple = 0;
  double l_vlb = 0;
  double l_perc = 0;
  /// lambda-weighted contributions; they add up to total.
  double weighted_simple = 0;
  double weighted_perc = 0;
};

/// lambda_s L_simple + L_vlb + lambda_p L_perceptual, with the perceptual
/// term on predict_x0(x_t, t, eps_hat).
template <typename S>
LossTerms<S> total_loss(const Tensor<S>& x0, const Tensor<S>& x_t, const Tensor<S>& noise, const std::vector<int>& t,
                        const DenoiserOutput<S>& model_out, const LossWeights& weights, const NoiseSchedule& schedule,
                        const FeatureExtractor<S>& extractor, const Tensor<S>* mean_eps = nullptr);

extern template class FeatureExtractor<float>;
extern template class FeatureExtractor<double>;

}  // namespace sgdiff

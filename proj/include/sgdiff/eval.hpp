#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sgdiff/config.hpp"

namespace sgdiff {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using ColVector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Receives non-fatal diagnostics; nullptr prints them to stderr.
using WarningSink = std::function<void(const std::string&)>;

/// ||mu1 - mu2||^2 + Tr(s1 + s2 - 2 (s1^1/2 s2 s1^1/2)^1/2), negative
/// eigenvalues of the inner product clipped at zero.
template <typename S>
double frechet_distance(const ColVector<S>& mu1, const Matrix<S>& sigma1, const ColVector<S>& mu2,
                        const Matrix<S>& sigma2);

/// Frechet distance of the Gaussian fits to two feature sets (one sample per
/// row). Each set needs at least twice as many rows as columns. A set whose
/// covariance is singular gets 1e-6 I added, with a warning.
template <typename S>
double fid_like(const Matrix<S>& gen, const Matrix<S>& ref, const WarningSink& warn = nullptr);

/// Mean perceptual distance over aligned pairs of normalised images [N x 3 x H x W].
double lpips_like(const Tensor<float>& gen, const Tensor<float>& ref, const FeatureExtractor<float>& extractor);

/// Pooled extractor features of normalised images, one row per image.
Matrix<double> pooled_features(const Tensor<float>& images, const FeatureExtractor<float>& extractor);

/// 100 x mean cosine similarity of matched rows.
double cosine_score(const Tensor<float>& a, const Tensor<float>& b);

/// Image/text dual encoder trained with a symmetric InfoNCE objective. Images
/// enter as pooled extractor features plus a 4x4 colour summary; texts as a
/// bag of token embeddings.
class CsScorer {
 public:
  CsScorer(const ScorerConfig& cfg, const ExtractorConfig& extractor, std::vector<std::string> words);

  bool trained() const { return trained_; }
  const ScorerConfig& config() const { return cfg_; }
  /// Returns the contrastive loss per iteration.
  std::vector<double> train(const std::vector<SynthExample>& pairs, std::uint64_t seed);

  /// Unit-norm rows [N x width].
  Tensor<float> embed_images(const Tensor<float>& images_normalized) const;
  Tensor<float> embed_texts(const std::vector<std::vector<std::string>>& texts) const;

 private:
  Var<float> image_tower(BoundParams<float>& p, const Tensor<float>& inputs) const;
  Var<float> text_tower(BoundParams<float>& p, const Tensor<float>& counts) const;
  Tensor<float> image_inputs(const Tensor<float>& images) const;
  Tensor<float> text_counts(const std::vector<std::vector<std::string>>& texts) const;

  ScorerConfig cfg_;
  FeatureExtractor<float> extractor_;
  Vocabulary vocab_;
  ParamStore<float> params_;
  bool trained_ = false;
};

/// Trains a scorer on `n_pairs` fresh examples whose seeds follow the test split.
CsScorer train_cs_scorer(const RunConfig& cfg);

/// Throws std::logic_error when the scorer is untrained.
double cs_like(const Tensor<float>& images_normalized, const std::vector<std::vector<std::string>>& texts,
               const CsScorer& scorer);

/// Mean attribute agreement of the classifier's reading of each image with its prompt.
double attribute_match(const Tensor<float>& images_normalized, const std::vector<GarmentAttributes>& targets,
                       const GeneratorConfig& gen);

/// Mean raw colour of pixels that differ from the background by more than 30 in some channel.
Rgb mean_foreground_color(const Tensor<float>& image_raw, float background_raw);
double pearson(const std::vector<double>& x, const std::vector<double>& y);

struct MetricReport {
  double fid_like = 0;
  double lpips_like = 0;
  double cs_like = 0;
  double attribute_match = 0;
  int n = 0;
};

/// Prompts and references cycled from a test split.
struct EvalInputs {
  std::vector<ConditionPair> pairs;
  std::vector<GarmentAttributes> targets;
  std::vector<std::vector<std::string>> texts;
  /// Normalised reference images [n x 3 x S x S].
  Tensor<float> reference;
  /// Raw style crops [n x 3 x P x P] and their masks [n x P x P].
  Tensor<float> style_raw;
  Tensor<float> style_mask;
};

EvalInputs eval_inputs(const RunConfig& cfg, const std::vector<SynthExample>& test, int n);

/// Text+style conditioning when the store holds the style branch, text only otherwise.
Conditioning conditioning_for(const ParamStore<float>& params);

/// Normalised images [N x 3 x S x S], one per pair, from the per-image streams of `rng`.
Tensor<float> generate_images(const RunConfig& cfg, const ParamStore<float>& params,
                              const std::vector<ConditionPair>& pairs, const GuidanceWeights& weights,
                              const SamplerConfig& sampler, const CounterRng& rng, EvalCounter* counter = nullptr);

MetricReport evaluate_images(const RunConfig& cfg, const Tensor<float>& generated, const EvalInputs& inputs,
                             const CsScorer& scorer, const FeatureExtractor<float>& extractor,
                             const WarningSink& warn = nullptr);

struct AblationRow {
  std::string config_hash;
  /// "style" or "text": the weight being swept; the other is fixed at 1.0.
  std::string sweep;
  double s_style = 1.0;
  double s_text = 1.0;
  GuidanceOrder order = GuidanceOrder::StyleFirst;
  MetricReport metrics;
  /// The reference optimum s_style = 1.2, s_text = 1.0, style first.
  bool reference = false;
};

/// Every order x sweep target x sweep weight, each cell generated from the
/// same seed with eval.ablation_samples images of eval.ablation_steps DDIM steps.
std::vector<AblationRow> ablation_grid(const RunConfig& cfg, const ParamStore<float>& params,
                                       const std::vector<SynthExample>& test, const CsScorer& scorer,
                                       const std::function<void(const AblationRow&)>& progress = nullptr,
                                       const WarningSink& warn = nullptr);

/// config_hash,s_S,s_T,order,fid_like,lpips_like,cs_like,attribute_match,n,sweep,reference
void write_metrics_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);
/// One PNG per metric: a curve per (order, sweep target), reference point ringed.
void write_ablation_plots(const std::vector<AblationRow>& rows, const std::filesystem::path& dir);

}  // namespace sgdiff

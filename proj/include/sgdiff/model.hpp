#pragma once

#include <cstdint>

#include "sgdiff/denoiser.hpp"
#include "sgdiff/encoders.hpp"
#include "sgdiff/guidance.hpp"
#include "sgdiff/sca.hpp"

namespace sgdiff {

struct ModelConfig {
  EncoderConfig encoder;
  DenoiserConfig denoiser;

  /// Validates both parts and that token widths agree.
  void validate() const;
};

/// Which tokens feed the denoiser's cross-attention: f_T alone (backbone
/// stage) or the fused f_T/f_S tokens.
enum class Conditioning { Text, TextStyle };

/// Text encoder and denoiser parameters.
void init_backbone(ParamStore<float>& store, const ModelConfig& cfg, std::uint64_t seed);
/// Style encoder and fusion parameters, with the fusion output projection zeroed.
void init_style_branch(ParamStore<float>& store, const ModelConfig& cfg, std::uint64_t seed);

/// Tokens for a batch: ids holds `batch` rows of text ids; `style_patches`
/// [batch x 3 x P x P] is required for TextStyle.
template <typename S>
Var<S> condition_tokens(BoundParams<S>& p, const ModelConfig& cfg, Conditioning mode, const std::vector<int>& ids,
                        const Tensor<S>* style_patches, Index batch);

template <typename S>
DenoiserOutput<S> model_forward(BoundParams<S>& p, const ModelConfig& cfg, Conditioning mode, const Var<S>& x_t,
                                const std::vector<int>& t, const std::vector<int>& ids, const Tensor<S>* style_patches,
                                const NoiseSchedule& schedule);

/// Inference wrapper: evaluates rows in chunks of `chunk` on throwaway tapes
/// with every parameter bound as a constant. `params` must outlive the model.
template <typename S>
EpsModel<S> make_eps_model(const ParamStore<S>& params, const ModelConfig& cfg, Conditioning mode,
                           const NoiseSchedule& schedule, Index chunk = 16);

}  // namespace sgdiff

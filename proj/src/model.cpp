#include "sgdiff/model.hpp"

#include <algorithm>

namespace sgdiff {

void ModelConfig::validate() const {
  encoder.validate();
  denoiser.validate();
  if (encoder.width != denoiser.cond_width) {
    throw ConfigError("encoder width " + std::to_string(encoder.width) + " differs from denoiser condition width " +
                      std::to_string(denoiser.cond_width));
  }
}

void init_backbone(ParamStore<float>& store, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  CounterRng text_rng = CounterRng(seed).fork(1);
  CounterRng unet_rng = CounterRng(seed).fork(2);
  init_text_encoder(store, cfg.encoder, text_rng);
  init_denoiser(store, cfg.denoiser, unet_rng);
}

void init_style_branch(ParamStore<float>& store, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  CounterRng style_rng = CounterRng(seed).fork(3);
  CounterRng sca_rng = CounterRng(seed).fork(4);
  init_style_encoder(store, cfg.encoder, style_rng);
  init_sca(store, cfg.encoder.width, sca_rng);
  init_identity(store);
}

template <typename S>
Var<S> condition_tokens(BoundParams<S>& p, const ModelConfig& cfg, Conditioning mode, const std::vector<int>& ids,
                        const Tensor<S>* style_patches, Index batch) {
  Var<S> f_text = encode_text(p, cfg.encoder, ids, batch);
  if (mode == Conditioning::Text) return f_text;
  if (style_patches == nullptr || style_patches->dim(0) != batch) {
    throw DimensionError("condition_tokens: style patches required for every example");
  }
  return sca_fuse(p, f_text, encode_style(p, cfg.encoder, *style_patches), cfg.encoder.heads);
}

template <typename S>
DenoiserOutput<S> model_forward(BoundParams<S>& p, const ModelConfig& cfg, Conditioning mode, const Var<S>& x_t,
                                const std::vector<int>& t, const std::vector<int>& ids, const Tensor<S>* style_patches,
                                const NoiseSchedule& schedule) {
  Var<S> cond = condition_tokens(p, cfg, mode, ids, style_patches, x_t.dim(0));
  return predict_eps(p, cfg.denoiser, x_t, t, cond, schedule);
}

template <typename S>
EpsModel<S> make_eps_model(const ParamStore<S>& params, const ModelConfig& cfg, Conditioning mode,
                           const NoiseSchedule& schedule, Index chunk) {
  return [&params, cfg, mode, &schedule, chunk](const Tensor<S>& x_t, int t, const std::vector<ConditionPair>& rows) {
    const Index n = x_t.dim(0);
    if (static_cast<Index>(rows.size()) != n) throw DimensionError("eps model: one condition pair per row required");
    const Index inner = x_t.size() / n;
    const Index text_len = cfg.encoder.text_length;
    const Index patch = cfg.encoder.patch_size;
    ModelOutput<S> out;
    out.eps = Tensor<S>(x_t.shape());
    if (cfg.denoiser.learn_variance) out.v = Tensor<S>(x_t.shape());
    for (Index begin = 0; begin < n; begin += chunk) {
      const Index count = std::min(chunk, n - begin);
      std::vector<int> ids;
      Tensor<S> patches({count, 3, patch, patch});
      for (Index i = 0; i < count; ++i) {
        const ConditionPair& row = rows[static_cast<std::size_t>(begin + i)];
        if (static_cast<Index>(row.text_ids.size()) != text_len) {
          throw DimensionError("eps model: text ids of length " + std::to_string(row.text_ids.size()));
        }
        ids.insert(ids.end(), row.text_ids.begin(), row.text_ids.end());
        if (mode == Conditioning::TextStyle) {
          if (row.style_patch.size() != 3 * patch * patch) {
            throw DimensionError("eps model: style patch " + shape_string(row.style_patch.shape()));
          }
          patches.vec().segment(i * 3 * patch * patch, 3 * patch * patch) = row.style_patch.vec().template cast<S>();
        }
      }
      Tape<S> tape;
      BoundParams<S> p(tape, params, [](const std::string&) { return false; });
      Var<S> x = tape.constant(slice_leading(x_t, begin, count));
      DenoiserOutput<S> r = model_forward(p, cfg, mode, x, std::vector<int>(static_cast<std::size_t>(count), t), ids,
                                          &patches, schedule);
      out.eps.vec().segment(begin * inner, count * inner) = r.eps.value().vec();
      if (r.v.valid()) out.v.vec().segment(begin * inner, count * inner) = r.v.value().vec();
    }
    return out;
  };
}

#define SGDIFF_INSTANTIATE_MODEL(S)                                                                                  \
  template Var<S> condition_tokens(BoundParams<S>&, const ModelConfig&, Conditioning, const std::vector<int>&,       \
                                   const Tensor<S>*, Index);                                                         \
  template DenoiserOutput<S> model_forward(BoundParams<S>&, const ModelConfig&, Conditioning, const Var<S>&,         \
                                           const std::vector<int>&, const std::vector<int>&, const Tensor<S>*,       \
                                           const NoiseSchedule&);    \
  template EpsModel<S> make_eps_model(const ParamStore<S>&, const ModelConfig&, Conditioning, const NoiseSchedule&,  \
                                      Index);

SGDIFF_INSTANTIATE_MODEL(float)
SGDIFF_INSTANTIATE_MODEL(double)

}  // namespace sgdiff

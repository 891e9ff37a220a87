#include "sgdiff/denoiser.hpp"

#include <algorithm>
#include <cmath>

namespace sgdiff {
namespace {

bool has_attention(const DenoiserConfig& cfg, int level) {
  return std::find(cfg.attention_levels.begin(), cfg.attention_levels.end(), level) != cfg.attention_levels.end();
}

std::string level_name(const char* part, int level, int block) {
  return std::string("unet.") + part + std::to_string(level) + "." + std::to_string(block);
}

void init_res_block(ParamStore<float>& store, const DenoiserConfig& cfg, const std::string& name, Index in, Index out,
                    CounterRng& rng) {
  init_norm(store, name + ".norm1", in);
  init_conv(store, name + ".conv1", in, out, 3, rng);
  init_linear(store, name + ".temb", cfg.time_width, out, rng);
  init_norm(store, name + ".norm2", out);
  init_conv(store, name + ".conv2", out, out, 3, rng);
  if (in != out) init_conv(store, name + ".skip", in, out, 1, rng);
}

void init_attn_block(ParamStore<float>& store, const DenoiserConfig& cfg, const std::string& name, Index ch,
                     CounterRng& rng) {
  init_norm(store, name + ".norm", ch);
  init_projected_attention(store, name + ".attn", ch, cfg.cond_width, rng);
}

template <typename S>
Var<S> res_block(BoundParams<S>& p, const DenoiserConfig& cfg, const std::string& name, const Var<S>& x,
                 const Var<S>& temb) {
  Var<S> h = conv_layer(p, name + ".conv1", silu(group_norm_layer(p, name + ".norm1", x, cfg.groups)));
  h = add_channel_bias(h, dense(p, name + ".temb", temb));
  h = conv_layer(p, name + ".conv2", silu(group_norm_layer(p, name + ".norm2", h, cfg.groups)));
  const Var<S> skip = p.store().contains(name + ".skip.w") ? conv_layer(p, name + ".skip", x) : x;
  return add(skip, h);
}

template <typename S>
Var<S> attn_block(BoundParams<S>& p, const DenoiserConfig& cfg, const std::string& name, const Var<S>& x,
                  const Var<S>& cond) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Var<S> seq = transpose_last2(reshape(group_norm_layer(p, name + ".norm", x, cfg.groups), {n, c, h * w}));
  Var<S> a = projected_attention(p, name + ".attn", seq, cond, cfg.heads);
  return add(x, reshape(transpose_last2(a), {n, c, h, w}));
}

}  // namespace

void DenoiserConfig::validate() const {
  if (multipliers.empty()) throw ConfigError("denoiser needs at least one resolution level");
  const int downs = static_cast<int>(multipliers.size()) - 1;
  if (image_size < 1 || image_size % (1 << downs) != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " not divisible by 2^" + std::to_string(downs));
  }
  if (sinusoid_width < 2 || sinusoid_width % 2 != 0) throw ConfigError("sinusoid width must be even");
  for (int m : multipliers) {
    const int ch = base_width * m;
    if (ch % groups != 0) throw ConfigError("channel count " + std::to_string(ch) + " not divisible by groups");
    if (ch % heads != 0) throw ConfigError("channel count " + std::to_string(ch) + " not divisible by heads");
  }
  if (res_blocks < 1) throw ConfigError("denoiser needs at least one residual block per level");
}

Tensor<double> sinusoid_features(double t, int width) {
  if (width < 2 || width % 2 != 0) throw ConfigError("sinusoid width must be even");
  const int half = width / 2;
  Tensor<double> out({width});
  for (int i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * i / half);
    out[2 * i] = std::sin(t * f);
    out[2 * i + 1] = std::cos(t * f);
  }
  return out;
}

void init_denoiser(ParamStore<float>& store, const DenoiserConfig& cfg, CounterRng& rng) {
  cfg.validate();
  init_linear(store, "unet.time1", cfg.sinusoid_width, cfg.time_width, rng);
  init_linear(store, "unet.time2", cfg.time_width, cfg.time_width, rng);
  init_conv(store, "unet.conv_in", cfg.channels, cfg.base_width, 3, rng);

  const int levels = static_cast<int>(cfg.multipliers.size());
  Index ch = cfg.base_width;
  std::vector<Index> skips;
  for (int l = 0; l < levels; ++l) {
    const Index out = cfg.base_width * cfg.multipliers[static_cast<std::size_t>(l)];
    for (int b = 0; b < cfg.res_blocks; ++b) {
      init_res_block(store, cfg, level_name("down", l, b), ch, out, rng);
      if (has_attention(cfg, l)) init_attn_block(store, cfg, level_name("down", l, b) + "_x", out, rng);
      ch = out;
      skips.push_back(ch);
    }
    if (l + 1 < levels) init_conv(store, "unet.downsample" + std::to_string(l), ch, ch, 3, rng);
  }
  init_res_block(store, cfg, "unet.mid.res0", ch, ch, rng);
  init_attn_block(store, cfg, "unet.mid.attn", ch, rng);
  init_res_block(store, cfg, "unet.mid.res1", ch, ch, rng);
  for (int l = levels - 1; l >= 0; --l) {
    const Index out = cfg.base_width * cfg.multipliers[static_cast<std::size_t>(l)];
    for (int b = 0; b < cfg.res_blocks; ++b) {
      init_res_block(store, cfg, level_name("up", l, b), ch + skips.back(), out, rng);
      skips.pop_back();
      if (has_attention(cfg, l)) init_attn_block(store, cfg, level_name("up", l, b) + "_x", out, rng);
      ch = out;
    }
    if (l > 0) init_conv(store, "unet.upsample" + std::to_string(l), ch, ch, 3, rng);
  }
  init_norm(store, "unet.norm_out", ch);
  init_conv(store, "unet.conv_out", ch, cfg.channels * (cfg.learn_variance ? 2 : 1), 3, rng);
}

template <typename S>
Var<S> time_embed(BoundParams<S>& p, const DenoiserConfig& cfg, const std::vector<int>& t,
                  const NoiseSchedule& schedule) {
  Tensor<S> feats({static_cast<Index>(t.size()), cfg.sinusoid_width});
  for (std::size_t i = 0; i < t.size(); ++i) {
    schedule.check_timestep(t[i]);
    feats.rows_view().row(static_cast<Index>(i)) =
        sinusoid_features(t[i], cfg.sinusoid_width).vec().template cast<S>().transpose();
  }
  Var<S> h = silu(dense(p, "unet.time1", p.tape().constant(std::move(feats))));
  return dense(p, "unet.time2", h);
}

template <typename S>
DenoiserOutput<S> predict_eps(BoundParams<S>& p, const DenoiserConfig& cfg, const Var<S>& x_t,
                              const std::vector<int>& t, const Var<S>& cond, const NoiseSchedule& schedule) {
  if (x_t.value().rank() != 4 || x_t.dim(1) != cfg.channels || x_t.dim(2) != cfg.image_size ||
      x_t.dim(3) != cfg.image_size) {
    throw DimensionError("predict_eps: x_t shape " + shape_string(x_t.shape()) + " does not match the configured [N x " +
                         std::to_string(cfg.channels) + " x " + std::to_string(cfg.image_size) + " x " +
                         std::to_string(cfg.image_size) + "]");
  }
  const Index n = x_t.dim(0);
  if (static_cast<Index>(t.size()) != n) throw DimensionError("predict_eps: one timestep per example required");
  if (cond.value().rank() != 3 || cond.dim(0) != n || cond.dim(2) != cfg.cond_width) {
    throw DimensionError("predict_eps: condition tokens " + shape_string(cond.shape()) + " do not match width " +
                         std::to_string(cfg.cond_width));
  }

  const Var<S> temb = silu(time_embed(p, cfg, t, schedule));
  const int levels = static_cast<int>(cfg.multipliers.size());
  Var<S> h = conv_layer(p, "unet.conv_in", x_t);
  std::vector<Var<S>> skips;
  for (int l = 0; l < levels; ++l) {
    for (int b = 0; b < cfg.res_blocks; ++b) {
      h = res_block(p, cfg, level_name("down", l, b), h, temb);
      if (has_attention(cfg, l)) h = attn_block(p, cfg, level_name("down", l, b) + "_x", h, cond);
      skips.push_back(h);
    }
    if (l + 1 < levels) h = conv_layer(p, "unet.downsample" + std::to_string(l), h, 2);
  }
  h = res_block(p, cfg, "unet.mid.res0", h, temb);
  h = attn_block(p, cfg, "unet.mid.attn", h, cond);
  h = res_block(p, cfg, "unet.mid.res1", h, temb);
  for (int l = levels - 1; l >= 0; --l) {
    for (int b = 0; b < cfg.res_blocks; ++b) {
      h = res_block(p, cfg, level_name("up", l, b), concat(h, skips.back(), 1), temb);
      skips.pop_back();
      if (has_attention(cfg, l)) h = attn_block(p, cfg, level_name("up", l, b) + "_x", h, cond);
    }
    if (l > 0) h = conv_layer(p, "unet.upsample" + std::to_string(l), upsample_nearest2(h));
  }
  Var<S> out = conv_layer(p, "unet.conv_out", silu(group_norm_layer(p, "unet.norm_out", h, cfg.groups)));
  if (!cfg.learn_variance) return {out, Var<S>()};
  Var<S> eps = slice(out, 1, 0, cfg.channels);
  Var<S> raw = slice(out, 1, cfg.channels, cfg.channels);
  // v = (raw + 1) / 2
  Var<S> v = add(scale(raw, S(0.5)), p.tape().constant(Tensor<S>::full(raw.shape(), S(0.5))));
  return {eps, v};
}

template Var<float> time_embed(BoundParams<float>&, const DenoiserConfig&, const std::vector<int>&,
                               const NoiseSchedule&);
template Var<double> time_embed(BoundParams<double>&, const DenoiserConfig&, const std::vector<int>&,
                                const NoiseSchedule&);
template DenoiserOutput<float> predict_eps(BoundParams<float>&, const DenoiserConfig&, const Var<float>&,
                                           const std::vector<int>&, const Var<float>&, const NoiseSchedule&);
template DenoiserOutput<double> predict_eps(BoundParams<double>&, const DenoiserConfig&, const Var<double>&,
                                            const std::vector<int>&, const Var<double>&, const NoiseSchedule&);

}  // namespace sgdiff

#include "sgdiff/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "sgdiff/pixels.hpp"

namespace sgdiff {
namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  tokens_ = {"<pad>", "<cls>"};
  for (const auto& w : words) {
    if (w == "<pad>" || w == "<cls>") continue;
    tokens_.push_back(lower(w));
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw ConfigError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

std::optional<int> Vocabulary::id(const std::string& word) const {
  auto it = ids_.find(lower(word));
  if (it == ids_.end() || it->second < 2) return std::nullopt;
  return it->second;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocabulary " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    words.push_back(line);
  }
  if (words.size() < 2 || words[0] != "<pad>" || words[1] != "<cls>") {
    throw ConfigError("vocabulary " + path.string() + " must start with <pad> and <cls>");
  }
  return Vocabulary(words);
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab, int length) {
  std::vector<int> ids;
  std::istringstream words(text);
  std::string w;
  while (words >> w && static_cast<int>(ids.size()) < length) {
    if (auto id = vocab.id(w)) ids.push_back(*id);
  }
  ids.resize(static_cast<std::size_t>(length), kPadId);
  return ids;
}

int EncoderConfig::style_tokens() const {
  const int g = patch_size / patch_stride;
  return g * g + 1;
}

void EncoderConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("encoder vocab_size must be >= 2");
  if (text_length < 1 || width < 1 || heads < 1) throw ConfigError("encoder dimensions must be positive");
  if (width % heads != 0) {
    throw ConfigError("encoder width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
  }
  if (patch_stride < 1 || patch_size % patch_stride != 0) {
    throw ConfigError("style patch size " + std::to_string(patch_size) + " not divisible by stride " +
                      std::to_string(patch_stride));
  }
}

void init_text_encoder(ParamStore<float>& store, const EncoderConfig& cfg, CounterRng& rng) {
  cfg.validate();
  init_normal(store, "text.embed", {cfg.vocab_size, cfg.width}, 1.0, rng);
  init_normal(store, "text.pos", {cfg.text_length, cfg.width}, 0.5, rng);
  for (int l = 0; l < cfg.text_layers; ++l) {
    init_transformer_block(store, "text.block" + std::to_string(l), cfg.width, cfg.mlp_hidden, rng);
  }
  init_norm(store, "text.ln_final", cfg.width);
}

void init_style_encoder(ParamStore<float>& store, const EncoderConfig& cfg, CounterRng& rng) {
  cfg.validate();
  const Index patch_dim = 3 * cfg.patch_stride * cfg.patch_stride;
  init_linear(store, "style.patch_embed", patch_dim, cfg.width, rng);
  init_normal(store, "style.cls", {1, cfg.width}, 1.0, rng);
  init_normal(store, "style.pos", {cfg.style_tokens(), cfg.width}, 0.5, rng);
  for (int l = 0; l < cfg.style_layers; ++l) {
    init_transformer_block(store, "style.block" + std::to_string(l), cfg.width, cfg.mlp_hidden, rng);
  }
  init_norm(store, "style.ln_final", cfg.width);
}

template <typename S>
Var<S> encode_text(BoundParams<S>& p, const EncoderConfig& cfg, const std::vector<int>& ids, Index batch) {
  if (static_cast<Index>(ids.size()) != batch * cfg.text_length) {
    throw DimensionError("encode_text: " + std::to_string(ids.size()) + " ids for batch " + std::to_string(batch) +
                         " of length " + std::to_string(cfg.text_length));
  }
  Var<S> h = embedding(ids, {batch, cfg.text_length}, p("text.embed"));
  h = add_broadcast(h, p("text.pos"));
  for (int l = 0; l < cfg.text_layers; ++l) h = transformer_block(p, "text.block" + std::to_string(l), h, cfg.heads);
  return layer_norm_layer(p, "text.ln_final", h);
}

template <typename S>
Tensor<S> extract_patches(const Tensor<S>& patches, int stride) {
  if (patches.rank() != 4 || patches.dim(1) != 3 || patches.dim(2) != patches.dim(3)) {
    throw DimensionError("extract_patches: expected [N x 3 x P x P], got " + shape_string(patches.shape()));
  }
  const Index n = patches.dim(0), size = patches.dim(2);
  if (stride < 1 || size % stride != 0) {
    throw ConfigError("style patch size " + std::to_string(size) + " not divisible by stride " +
                      std::to_string(stride));
  }
  const Index g = size / stride, cols = 3 * stride * stride;
  Tensor<S> out({n, g * g, cols});
  for (Index b = 0; b < n; ++b)
    for (Index gy = 0; gy < g; ++gy)
      for (Index gx = 0; gx < g; ++gx) {
        S* row = out.data() + ((b * g * g) + gy * g + gx) * cols;
        Index k = 0;
        for (Index c = 0; c < 3; ++c)
          for (Index y = 0; y < stride; ++y)
            for (Index x = 0; x < stride; ++x)
              row[k++] = patches.data()[((b * 3 + c) * size + gy * stride + y) * size + gx * stride + x];
      }
  return out;
}

template <typename S>
Var<S> encode_style(BoundParams<S>& p, const EncoderConfig& cfg, const Tensor<S>& patches) {
  const Tensor<S> batch = patches.rank() == 3 ? patches.reshaped({1, patches.dim(0), patches.dim(1), patches.dim(2)})
                                              : patches;
  if (batch.rank() != 4 || batch.dim(2) != cfg.patch_size) {
    throw DimensionError("encode_style: expected patches of side " + std::to_string(cfg.patch_size) + ", got " +
                         shape_string(patches.shape()));
  }
  const Index n = batch.dim(0);
  Tape<S>& tape = p.tape();
  Var<S> tokens = dense(p, "style.patch_embed", tape.constant(extract_patches(batch, cfg.patch_stride)));
  Var<S> cls = embedding(std::vector<int>(static_cast<std::size_t>(n), 0), {n, 1}, p("style.cls"));
  Var<S> h = add_broadcast(concat(cls, tokens, 1), p("style.pos"));
  for (int l = 0; l < cfg.style_layers; ++l) h = transformer_block(p, "style.block" + std::to_string(l), h, cfg.heads);
  return layer_norm_layer(p, "style.ln_final", h);
}

NullConditions null_conditions(const EncoderConfig& cfg) {
  return {std::vector<int>(static_cast<std::size_t>(cfg.text_length), kPadId),
          Tensor<float>::full({3, cfg.patch_size, cfg.patch_size}, kBackgroundSentinel)};
}

#define SGDIFF_INSTANTIATE_ENCODERS(S)                                                                 \
  template Var<S> encode_text(BoundParams<S>&, const EncoderConfig&, const std::vector<int>&, Index); \
  template Tensor<S> extract_patches(const Tensor<S>&, int);                                          \
  template Var<S> encode_style(BoundParams<S>&, const EncoderConfig&, const Tensor<S>&);

SGDIFF_INSTANTIATE_ENCODERS(float)
SGDIFF_INSTANTIATE_ENCODERS(double)

}  // namespace sgdiff

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sgdiff/layers.hpp"

namespace sgdiff {

inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;

/// Token strings to dense ids. Line n of the vocabulary file is id n; the
/// first two entries are always the PAD and CLS markers.
class Vocabulary {
 public:
  explicit Vocabulary(const std::vector<std::string>& words);

  int size() const { return static_cast<int>(tokens_.size()); }
  std::optional<int> id(const std::string& word) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

/// Whitespace split; known words mapped (case-insensitive), unknown dropped,
/// truncated or right-padded with PAD to `length`.
std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab, int length);

struct EncoderConfig {
  int vocab_size = 0;
  int text_length = 16;
  int width = 64;
  int heads = 4;
  int text_layers = 2;
  int style_layers = 2;
  int mlp_hidden = 128;
  int patch_size = 8;
  int patch_stride = 4;

  /// (patch_size / patch_stride)^2 + 1.
  int style_tokens() const;
  /// Throws ConfigError if the shape relations do not hold.
  void validate() const;
};

void init_text_encoder(ParamStore<float>& store, const EncoderConfig& cfg, CounterRng& rng);
void init_style_encoder(ParamStore<float>& store, const EncoderConfig& cfg, CounterRng& rng);

/// ids holds `batch` rows of cfg.text_length ids; result [batch x L_T x d].
template <typename S>
Var<S> encode_text(BoundParams<S>& p, const EncoderConfig& cfg, const std::vector<int>& ids, Index batch);

/// Non-overlapping stride x stride patches of [N x 3 x P x P] as rows [N x G x 3 s s].
template <typename S>
Tensor<S> extract_patches(const Tensor<S>& patches, int stride);

/// patches [N x 3 x P x P] (or a single [3 x P x P]) in normalised pixels; result [N x L_S x d].
template <typename S>
Var<S> encode_style(BoundParams<S>& p, const EncoderConfig& cfg, const Tensor<S>& patches);

struct NullConditions {
  std::vector<int> text_ids;
  Tensor<float> style_patch;
};

/// All-PAD text and a patch filled with the normalised background sentinel.
NullConditions null_conditions(const EncoderConfig& cfg);

}  // namespace sgdiff

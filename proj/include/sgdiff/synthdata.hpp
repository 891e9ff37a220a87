#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sgdiff/encoders.hpp"
#include "sgdiff/pixels.hpp"
#include "sgdiff/tensor.hpp"

namespace sgdiff {

using Rgb = std::array<float, 3>;

struct NamedColor {
  std::string name;
  Rgb rgb;
};

struct GeneratorConfig {
  int image_size = 16;
  int patch_size = 8;
  float background_raw = 230.0f;
  std::vector<std::string> categories = {"tshirt", "tank", "dress", "pants", "skirt", "jacket"};
  std::vector<NamedColor> palette = {
      {"red", {210, 40, 40}},     {"blue", {50, 90, 210}},    {"green", {50, 170, 70}},  {"yellow", {235, 205, 50}},
      {"purple", {150, 70, 180}}, {"orange", {245, 140, 40}}, {"pink", {240, 120, 170}}, {"teal", {30, 160, 160}}};
  std::vector<std::string> patterns = {"solid", "stripes", "checks", "dots"};
  /// Pattern pixels use the base colour scaled by this factor.
  float accent_scale = 0.45f;
  int stripe_period_min = 2, stripe_period_max = 4;
  int check_size_min = 2, check_size_max = 3;
  int dot_spacing_min = 3, dot_spacing_max = 4;
  /// Dataset key; example `seed` values index into it.
  std::uint64_t seed = 0;

  void validate() const;
};

struct GarmentAttributes {
  std::string category;
  std::string color;
  std::string pattern;
  /// "long" / "short" for categories with a length variant, otherwise empty.
  std::string length;

  friend bool operator==(const GarmentAttributes&, const GarmentAttributes&) = default;
};

/// Categories whose silhouette has a long and a short variant.
bool has_length_variant(const std::string& category);

/// Foreground pixel set of a category template (1 = garment), row-major [S x S].
std::vector<std::uint8_t> garment_template(const std::string& category, const std::string& length, int size);

/// Tokens describing the attributes: category, colour, pattern, then length if any.
std::vector<std::string> describe(const GarmentAttributes& attrs);
std::string describe_text(const GarmentAttributes& attrs);
/// Inverse of describe; throws ConfigError on tokens that do not form a description.
GarmentAttributes decode_tokens(const std::vector<std::string>& tokens, const GeneratorConfig& cfg);

struct StyleCrop {
  Tensor<float> patch;  // [3 x P x P] raw
  Tensor<float> mask;   // [P x P]
  int x = 0, y = 0;
  double coverage = 0;
};

struct SynthExample {
  Tensor<float> image;  // [3 x S x S] raw [0, 255]
  Tensor<float> mask;   // [S x S], 1 = foreground
  GarmentAttributes attributes;
  std::vector<std::string> text;
  StyleCrop style;
  std::uint64_t seed = 0;
};

/// Deterministic in (cfg, seed).
SynthExample synthesize_example(const GeneratorConfig& cfg, std::uint64_t seed);

/// Rejection-samples a P x P window with at least 95% foreground; after 100
/// rejections falls back to the window of maximal coverage (first in raster order).
StyleCrop style_crop(const Tensor<float>& image, const Tensor<float>& mask, int P, CounterRng& rng);

/// Fully foreground [3 x size x size] raw patch of a palette colour and pattern.
Tensor<float> texture_patch(const GeneratorConfig& cfg, const std::string& color, const std::string& pattern, int size,
                            std::uint64_t seed = 0);

/// Background to raw -255, then x / 127.5 - 1 everywhere. image [3 x H x W], mask [H x W].
Tensor<float> mask_background(const Tensor<float>& image_raw, const Tensor<float>& mask);
/// x / 127.5 - 1 without masking.
Tensor<float> normalize_image(const Tensor<float>& image_raw);

/// All description tokens the generator can emit.
std::vector<std::string> vocabulary_words(const GeneratorConfig& cfg);

/// Attribute detector for rendered garments (raw [0, 255] pixels). Category
/// by template IoU on pixels that differ from the background, colour by the
/// nearest palette entry to the bright foreground, pattern from the layout of
/// darker foreground pixels.
GarmentAttributes classify_garment(const Tensor<float>& image_raw, const GeneratorConfig& cfg);
/// Fraction of attributes (category, colour, pattern, length) that agree.
double attribute_agreement(const GarmentAttributes& predicted, const GarmentAttributes& target);

struct ManifestRow {
  std::uint64_t seed = 0;
  GarmentAttributes attributes;
  std::string split;
};

struct Dataset {
  GeneratorConfig config;
  std::vector<SynthExample> train;
  std::vector<SynthExample> test;
};

/// Seeds 0..n_train-1 form the train split, n_train..n_train+n_test-1 the test split.
Dataset generate_dataset(const GeneratorConfig& cfg, int n_train, int n_test);

/// Writes one little-endian record per example, manifest.csv, vocab.txt and generator.json.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

void write_example(const SynthExample& ex, const std::filesystem::path& path);
SynthExample read_example(const std::filesystem::path& path);

}  // namespace sgdiff

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgdiff/guidance.hpp"
#include "sgdiff/losses.hpp"
#include "sgdiff/model.hpp"
#include "sgdiff/sampler.hpp"
#include "sgdiff/schedule.hpp"
#include "sgdiff/synthdata.hpp"

namespace sgdiff {

struct DataConfig {
  GeneratorConfig generator;
  int n_train = 2000;
  int n_test = 256;
  /// Also replace the background of training targets by the sentinel
  /// (style patches are always masked).
  bool mask_targets = false;

  void validate() const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const;
};

struct StageConfig {
  double lr = 1e-4;
  int batch = 8;
  int iterations = 5000;

  void validate(const char* stage) const;
};

struct TrainConfig {
  StageConfig backbone{1e-4, 8, 5000};
  StageConfig style{1e-5, 16, 2000};
  /// Keep probability of the text condition while training the backbone.
  double p_text_backbone = 0.8;
  /// Independent keep probabilities while training the style branch.
  DropoutConfig dropout;
  LossWeights loss;
  AdamWConfig adamw;
  /// Trailing window of the smoothed loss.
  int smoothing_window = 100;

  /// Iteration counts of the full-scale schedule (235k backbone, 50k style).
  static TrainConfig paper_profile();
  void validate() const;
};

struct ScorerConfig {
  int width = 32;
  int iterations = 600;
  int batch = 64;
  double lr = 3e-3;
  double temperature = 0.1;
  int n_pairs = 1024;

  void validate() const;
};

struct EvalConfig {
  ExtractorConfig extractor;
  ScorerConfig scorer;
  int n_samples = 256;
  /// Ablation grid: images per cell and DDIM steps per image.
  int ablation_samples = 64;
  int ablation_steps = 8;
  std::vector<double> sweep_weights = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.5, 3.0};

  void validate() const;
};

struct RunConfig {
  ScheduleConfig schedule = ScheduleConfig::scaled_linear(200);
  ModelConfig model = default_model();
  GuidanceWeights guidance;
  SamplerConfig sampler;
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";

  /// Desk model: the vocabulary is the generator's, and the variance head is on.
  static ModelConfig default_model();
  /// Checks every section. The encoder vocabulary must match the data vocabulary.
  void validate() const;
};

nlohmann::json config_to_json(const GeneratorConfig& cfg);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json config_to_json(const RunConfig& cfg);
/// Keys missing from `j` keep the values already in `base`; unknown keys and
/// type mismatches raise ConfigError naming the dotted key.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

/// Stable 64-bit FNV-1a hash of the canonical JSON dump, as 16 hex digits.
/// A top-level output_dir is ignored so that the same run hashes the same anywhere.
std::string config_hash(const nlohmann::json& j);

}  // namespace sgdiff

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sgdiff/config.hpp"

namespace sgdiff {

template <typename S>
struct AdamState {
  std::map<std::string, Tensor<S>> m;
  std::map<std::string, Tensor<S>> v;
  std::int64_t step = 0;
};

/// One AdamW update of every parameter named in `grads`, with decoupled
/// weight decay. Throws NumericError naming the first parameter whose
/// gradient is not finite; nothing is updated in that case.
template <typename S>
void adamw_step(ParamStore<S>& params, const std::map<std::string, Tensor<S>>& grads, AdamState<S>& state, double lr,
                const AdamWConfig& cfg);

/// Corrupt, truncated or incompatible checkpoint file.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  /// "init", "backbone" or "style".
  std::string stage = "init";
  /// Resolved run config that produced the checkpoint.
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t iteration = 0;
  std::uint64_t rng_key = 0;
  std::uint64_t rng_counter = 0;
  ParamStore<float> params;
};

/// Little-endian: "SGCK", version, stage, config JSON, iteration, RNG key and
/// counter, named float32 blobs with shapes, FNV-1a checksum, "END!".
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Parses the whole file before returning; any defect raises CheckpointError.
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Copies every blob of `target` under `prefix` from the checkpoint. Missing
/// blobs and shape mismatches raise CheckpointError naming the blob.
void load_params(const Checkpoint& ckpt, ParamStore<float>& target, std::string_view prefix = "");

struct TrainLogRow {
  int step = 0;
  double l_simple = 0;
  double l_vlb = 0;
  double l_perc = 0;
  double total = 0;
};

using TrainObserver = std::function<void(const TrainLogRow&)>;

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainLogRow> log;
};

/// Backbone parameters (text encoder and denoiser) as initialised for `cfg`.
Checkpoint initial_checkpoint(const RunConfig& cfg);

/// Stage 1: text encoder and denoiser under text-only conditioning, the text
/// kept with probability p_text_backbone. The result holds no style parameters.
TrainResult train_backbone(const RunConfig& cfg, const Dataset& data, const TrainObserver& observer = nullptr);

/// Stage 2: style encoder and fusion with the backbone frozen. Crops are
/// redrawn every step and both conditions are dropped independently. Throws
/// std::logic_error if a frozen parameter receives a gradient or changes.
TrainResult train_style_stage(const RunConfig& cfg, const Dataset& data, const Checkpoint& backbone,
                              const TrainObserver& observer = nullptr);

struct BatchLoss {
  double l_simple = 0;
  double l_vlb = 0;
  double l_perc = 0;
  double total = 0;
};

/// Loss on a fixed batch (no update): each example once, t and noise drawn
/// from `seed`, crops from the stored style crop. `null_text`/`null_style`
/// force the null condition on every row.
BatchLoss evaluate_loss(const RunConfig& cfg, const ParamStore<float>& params, Conditioning mode,
                        const std::vector<SynthExample>& examples, std::uint64_t seed, bool null_text = false,
                        bool null_style = false);

/// Mean of `total` over the trailing window ending at `index` (0-based).
double smoothed_total(const std::vector<TrainLogRow>& log, std::size_t index, int window);

/// step,l_simple,l_vlb,l_perc,total
void write_loss_csv(const std::vector<TrainLogRow>& log, const std::filesystem::path& path);

extern template void adamw_step<float>(ParamStore<float>&, const std::map<std::string, Tensor<float>>&,
                                       AdamState<float>&, double, const AdamWConfig&);
extern template void adamw_step<double>(ParamStore<double>&, const std::map<std::string, Tensor<double>>&,
                                        AdamState<double>&, double, const AdamWConfig&);

}  // namespace sgdiff

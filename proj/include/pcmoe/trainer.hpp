#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pcmoe/analytics.hpp"
#include "pcmoe/seg.hpp"
#include "pcmoe/trace_io.hpp"

namespace pcmoe {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double lr = 2e-2;
  double momentum = 0.9;
  std::uint64_t seed = 7;
  int n_train = 256;
  int n_val = 64;
  int image_size = 64;
  /// Selects the synthetic split; independent of the model seed.
  std::uint64_t data_seed = 0;
  SegModelConfig model;
  /// Record the routing of every trace_every-th step (0 disables).
  int trace_every = 0;
  /// Added to expert 0's gate logit bias at initialisation.
  double gate_bias = 0.0;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;    // mean task loss over the epoch's steps
  double val_miou = 0.0;
  double balance_loss = 0.0;  // mean unweighted balancing loss
  double nre = 0.0;           // first MoE layer on the validation set, NaN without MoE
  double tec = 0.0;
};

struct SlotTrace {
  std::string slot;
  std::vector<TraceRecord> records;
};

struct Dataset {
  std::vector<SceneSample> train;
  std::vector<SceneSample> val;
};

/// Scene seeds: train i -> 1e6 * (2 * data_seed + 1) + i,
/// val j -> 1e6 * (2 * data_seed + 2) + j.
Dataset make_dataset(const TrainConfig& config);

struct TrainResult {
  TinySegModel model;
  std::vector<EpochRecord> history;
  std::vector<SlotTrace> train_traces;
  std::int64_t steps = 0;
};

/// Model initialised from config.seed, including the optional gate bias.
TinySegModel initial_model(const TrainConfig& config);

/// Deterministic SGD with momentum. Each epoch visits floor(n_train /
/// batch_size) batches in an order drawn by Fisher-Yates from an Rng seeded
/// with splitmix64(seed ^ 0x5348554646). Throws NumericError naming the step
/// when the loss or any activation becomes non-finite.
TrainResult train(const TrainConfig& config);
TrainResult train(const TrainConfig& config, const Dataset& data);

struct EvalResult {
  double miou = 0.0;
  std::vector<SlotTrace> traces;     // per MoE slot
  std::vector<RoutingTrace> routing; // aggregated, same order as traces
};

/// Inference only; parameters are not touched. batch_index in the traces is
/// the sample's position in samples.
EvalResult evaluate(TinySegModel& model, std::span<const SceneSample> samples, int batch_size = 8,
                    std::int64_t step = 0);

std::string history_csv(std::span<const EpochRecord> history);
void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history);

/// FNV-1a over the bytes of every parameter value, in parameter order.
std::uint64_t parameter_checksum(TinySegModel& model);

/// Checkpoint of the model with the training config as JSON metadata.
void save_model(const std::filesystem::path& path, TinySegModel& model, const TrainConfig& config);
struct LoadedModel {
  TrainConfig config;
  TinySegModel model;
};
LoadedModel load_model(const std::filesystem::path& path);

}  // namespace pcmoe

#pragma once

// AdamW training with linear warmup and cosine decay, per-epoch validation,
// and resumable checkpoints.
//
// All randomness is keyed on (seed, epoch, step, record) rather than drawn
// from a running stream, so a run resumed from a checkpoint repeats the
// uninterrupted run bit for bit.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "deformpic/dataset.hpp"
#include "deformpic/geometry.hpp"
#include "deformpic/model.hpp"

namespace deformpic::train {

enum class Preset : std::uint8_t { paper = 0, desk = 1 };

std::string_view preset_name(Preset p);
Preset parse_preset(std::string_view name);

struct TrainConfig {
  int epochs = 50;
  int batch_size = 16;
  double lr_peak = 1e-3;
  double lr_init = 1e-5;
  int warmup_epochs = 5;
  double weight_decay = 0.05;
  std::uint64_t seed = 0;
  Preset preset = Preset::desk;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 10.0;

  static TrainConfig paper();
  static TrainConfig desk();
  static TrainConfig for_preset(Preset p);

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::ordered_json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::ordered_json& j);

/// Linear warmup from lr_init to lr_peak over `warmup_steps`, then cosine
/// decay from lr_peak towards 0 at `total_steps`.
double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, const TrainConfig& cfg);

using Gradients = std::vector<std::vector<float>>;

struct OptimizerState {
  std::uint64_t step = 0;
  Gradients m;
  Gradients v;

  static OptimizerState zeros_like(const model::ParameterSet<float>& params);
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// Decoupled weight decay (skipped where Param::decay is false) followed by
/// the bias-corrected Adam update. Throws NumericError naming the parameter
/// on a non-finite gradient.
void adamw_step(model::ParameterSet<float>& params, const Gradients& grads, OptimizerState& state, double lr,
                const TrainConfig& cfg);

/// Scales all gradients so their joint L2 norm is at most max_norm; returns
/// the norm before clipping.
double clip_global_norm(Gradients& grads, double max_norm);

/// One training example with its patches precomputed.
struct Example {
  std::size_t record = 0;
  InContextSample sample;
  geometry::JointPatches patches;
};

std::vector<Example> make_examples(const std::vector<InContextSample>& samples,
                                   const std::vector<std::size_t>& records, const model::ModelConfig& cfg,
                                   int threads = 1);

/// Records split by dataset::is_heldout.
struct Split {
  std::vector<Example> train;
  std::vector<Example> val;
};
Split split_dataset(const dataset::Dataset& ds, const model::ModelConfig& cfg, int threads = 1);

/// Chamfer-L2 between the flattened prediction and the full query-target cloud.
double prediction_cd(const Tensor<float>& prediction, const InContextSample& sample);

/// Inference prediction [m, k, 3] for one example.
Tensor<float> predict(const model::Model<float>& net, const Example& ex);

struct MetricsRow {
  int epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  /// Mean held-out CD per task (rec, den, reg); NaN when a task has no held-out records.
  std::array<double, 3> val_cd{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(),
                               std::numeric_limits<double>::quiet_NaN()};

  /// Mean over the tasks that have held-out records; NaN if none do.
  double val_mean() const;
  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

std::string metrics_header();
std::string metrics_line(const MetricsRow& row);

std::array<double, 3> validate_cd(const model::Model<float>& net, const std::vector<Example>& val, int threads = 1);

struct ParamEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;  // in floats
  bool decay = true;
};

/// Everything needed to resume or evaluate a run.
struct Checkpoint {
  model::ModelConfig model;
  TrainConfig train;
  int epoch = 0;  // completed epochs
  std::uint64_t step = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::string dataset_fingerprint;
  std::vector<MetricsRow> history;
  std::vector<ParamEntry> table;
  std::vector<float> params;
  OptimizerState optimizer;
};

inline constexpr int kCheckpointVersion = 1;

/// Writes checkpoint.json and params.bin (parameters, then Adam m, then v;
/// little-endian f32) into `dir`.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

Checkpoint make_checkpoint(const model::Model<float>& net, const TrainConfig& cfg, const OptimizerState& opt);
/// A model carrying the checkpoint's parameters.
model::Model<float> restore_model(const Checkpoint& ckpt);

struct TrainOptions {
  /// Run directory for metrics.csv and checkpoints; empty writes nothing.
  std::filesystem::path out_dir;
  int threads = 1;
  std::string dataset_fingerprint;
  /// Continue from this checkpoint directory.
  std::filesystem::path resume;
  /// Stop once this many epochs are complete (0: run all); no final checkpoint.
  int stop_after_epochs = 0;
  /// Called after every epoch.
  std::function<void(const MetricsRow&)> on_epoch;
  /// Called after every optimizer step with (step, mean batch loss).
  std::function<void(std::uint64_t, double)> on_step;
};

struct TrainResult {
  std::vector<MetricsRow> history;
  double best_val = std::numeric_limits<double>::infinity();
  std::uint64_t steps = 0;
};

/// Trains `net` in place. Throws NumericError("... at step N") on divergence.
TrainResult train(model::Model<float>& net, const std::vector<Example>& train_set, const std::vector<Example>& val_set,
                  const TrainConfig& cfg, const TrainOptions& options);

/// Mean loss and summed-then-averaged gradients of one batch. Samples are
/// processed in parallel; gradients are reduced in batch order.
struct BatchResult {
  double loss = 0.0;
  Gradients grads;
};
BatchResult batch_gradients(const model::Model<float>& net, const std::vector<const Example*>& batch,
                            const TrainConfig& cfg, std::uint64_t step, int threads);

}  // namespace deformpic::train

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "normlab/model.hpp"

namespace normlab {

inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kReservedTokens = 3;  // pad, bos, eos

struct DivergencePolicy {
  bool nan_is_divergence = true;
  double loss_blowup_factor = 3.0;
  std::int64_t grace_steps = 200;  // blow-up is only checked after this step
};

/// Optimiser settings; defaults are the base-model recipe.
struct TrainConfig {
  double lr = 5e-4;
  std::int64_t warmup_updates = 4000;
  double warmup_init_lr = 1e-7;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-8;
  double label_smoothing = 0.1;
  double weight_decay = 1e-4;
  double grad_clip = 0.0;  // 0 = off
  std::int64_t max_updates = 100000;
  std::size_t batch_size_tokens = 128 * 4096;
  std::uint64_t seed = 1;  // dropout stream
  DivergencePolicy divergence;
  /// final_loss is the mean training NLL over this many trailing steps.
  std::int64_t final_window = 50;

  void validate() const;
};

enum class TaskKind { kCopy, kReverse };
std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

/// Synthetic seq2seq task over content tokens 3..vocab_size-1.
struct TaskSpec {
  TaskKind kind = TaskKind::kCopy;
  std::size_t vocab_size = 16;
  std::size_t min_len = 4;
  std::size_t max_len = 8;
  std::uint64_t seed = 1;  // data stream
  /// 0 = fresh samples every step; otherwise batches are drawn from a fixed pool
  /// of this many sequences.
  std::size_t samples = 0;

  void validate() const;
};

/// Batch for `step` holding at least `tokens` target tokens (pad excluded).
/// A pure function of (task, step, tokens).
Batch sample_batch(const TaskSpec& task, std::int64_t step, std::size_t tokens);

struct TrainRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;       // NLL of the batch
  double objective = 0.0;  // label-smoothed loss being optimised
  double alpha = 1.0;      // BranchNorm branch factor at this step (1 otherwise)
  double grad_norm = 0.0;
  bool diverged = false;
};

/// Linear warmup from warmup_init_lr to lr, then lr * sqrt(warmup / step).
/// With warmup_updates = 0 the rate is the constant lr.
double lr_at(std::int64_t step, const TrainConfig& cfg);

struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One Adam update with bias correction. Weight decay (1 - lr*wd) is applied to
/// rank-2 tensors only. Missing gradients count as zero.
void adam_step(const std::vector<Tensor*>& params, AdamState& state, double lr,
               const TrainConfig& cfg);

/// Global L2 norm of the parameter gradients.
double grad_norm(const std::vector<Tensor*>& params);
/// Rescales gradients so their global norm is at most max_norm; returns the norm before.
double clip_grad_norm(const std::vector<Tensor*>& params, double max_norm);

struct TrainResult {
  Model model;
  std::vector<TrainRecord> records;
  bool diverged = false;
  std::int64_t steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;  // mean NLL over the last final_window finite steps
};

using RecordSink = std::function<void(const TrainRecord&)>;

/// Deterministic given the seeds. Stops after max_updates or at the first
/// divergence, whose record carries diverged = true.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const TaskSpec& task, const RecordSink& sink = {});

/// FNV-1a over the bytes of every parameter, as 16 hex digits.
std::string parameter_checksum(Model& m);

struct SweepGrid {
  std::vector<NormKind> strategies;  // empty = all four
  std::vector<int> depths;           // N = M = depth; empty = base config
  std::vector<std::int64_t> max_norm_steps;  // empty = base config
  std::vector<std::int64_t> warmups;         // empty = base config
  std::vector<double> lrs;                   // empty = base config
};

struct SweepCell {
  NormKind strategy = NormKind::kPostLN;
  int depth = 0;
  std::int64_t max_norm_step = 0;
  std::int64_t warmup = 0;
  double lr = 0.0;
};

struct SweepRow {
  SweepCell cell;
  double final_loss = 0.0;
  bool diverged = false;
  std::int64_t steps = 0;
  std::string error;  // set when the cell failed to run
  std::vector<TrainRecord> records;
};

/// Cartesian product in the order strategy, depth, T, warmup, lr.
std::vector<SweepCell> expand_grid(const SweepGrid& grid, const ModelConfig& base_model,
                                   const TrainConfig& base_train);

/// Model and optimiser settings of one cell. DeepNorm coefficients follow the cell depth.
std::pair<ModelConfig, TrainConfig> cell_configs(const SweepCell& cell, const ModelConfig& base_model,
                                                 const TrainConfig& base_train);

/// Runs every cell on the shared task stream with at most `workers` threads.
/// Rows come back in grid order; a failing cell is recorded, never rethrown.
std::vector<SweepRow> sweep(const SweepGrid& grid, const ModelConfig& base_model,
                            const TrainConfig& base_train, const TaskSpec& task,
                            std::size_t workers = 1);

/// Header plus one line per row: strategy,depth,T,warmup,lr,final_loss,diverged,steps,error.
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace normlab

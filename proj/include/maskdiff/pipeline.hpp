// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/config.hpp"
#include "maskdiff/data.hpp"
#include "maskdiff/optim.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>

namespace maskdiff {

template <typename Scalar>
struct Batch {
  Tensor<Scalar> image;    // [N, 3, H, W]
  Tensor<Scalar> gt_mask;  // [N, 1, H, W]
  Tensor<Scalar> gt_edge;  // [N, 1, H, W]
};

template <typename Scalar>
Batch<Scalar> make_batch(const Dataset& data, const std::vector<std::size_t>& indices);

/// Thrown when a training step produces a non-finite loss or gradient.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepStats {
  long step = 0;
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;
  std::vector<int> t;
};

/// One optimiser over one model. All randomness of step k is drawn from a
/// stream derived from (seed, k), so runs are reproducible and resumable.
template <typename Scalar>
class Trainer {
 public:
  Trainer(const TrainConfig& config, MaskDiffusionModel<Scalar>& model, long total_steps);

  /// Draws t and noise per example, runs the model on x_t, and applies one
  /// AdamW update on the composite loss.
  StepStats train_step(const Batch<Scalar>& batch);

  long step() const { return step_; }
  void set_step(long step) { step_ = step; }
  long total_steps() const { return total_steps_; }
  double current_lr() const;

  AdamW<Scalar>& optimizer() { return optimizer_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  const TrainConfig& config() const { return config_; }

 private:
  TrainConfig config_;
  MaskDiffusionModel<Scalar>& model_;
  DiffusionSchedule schedule_;
  AdamW<Scalar> optimizer_;
  long total_steps_;
  long step_ = 0;
};

struct DatasetSplits {
  Dataset train;
  Dataset heldout;
};

/// Synthetic: `synthetic_n` training images from `seed` and `eval_n` held-out
/// images from `seed + 1`. Folder: the last `eval_n` images (sorted by id)
/// are held out.
DatasetSplits load_splits(const DataConfig& data);

/// Number of optimiser steps implied by the config for a dataset of n items.
long planned_steps(const TrainConfig& config, std::size_t n);

/// Runs the schedule over `data`, reshuffling every epoch with a stream
/// derived from (seed, epoch). Stops at total_steps(), or earlier at step
/// `until` when positive. `on_step` may be empty.
template <typename Scalar>
void train(Trainer<Scalar>& trainer, const Dataset& data, const std::function<void(const StepStats&)>& on_step = {},
           long until = 0);

struct SampleOptions {
  int T_sample = 10;
  bool ddim = false;
  std::uint64_t seed = 0;
  bool record_trace = true;
};

template <typename Scalar>
struct TraceStep {
  int t = 0;
  Tensor<Scalar> x_t;       // [N, 1, H, W] input of this step
  Tensor<Scalar> x0_hat;    // [N, 1, H, W] in [-1, 1]
  Tensor<Scalar> edge_prob;  // [N, 1, H, W] in [0, 1]
};

template <typename Scalar>
using SampleTrace = std::vector<TraceStep<Scalar>>;

template <typename Scalar>
struct SampleResult {
  Tensor<Scalar> prob_map;  // [N, 1, H, W] in [0, 1]
  SampleTrace<Scalar> trace;
};

/// Reverse chain from pure noise over make_sampling_subsequence(T_train,
/// T_sample). Batch item n draws its noise from a stream derived from
/// (seed, n, step).
template <typename Scalar>
SampleResult<Scalar> sample(const MaskDiffusionModel<Scalar>& model, const Tensor<Scalar>& image,
                            const DiffusionSchedule& sched, const SampleOptions& options);

/// Mean of K sample() maps with seeds seed, seed + 1, ..., seed + K - 1.
/// `variance` (optional) receives the pixel-wise population variance.
template <typename Scalar>
Tensor<Scalar> sample_ensemble(const MaskDiffusionModel<Scalar>& model, const Tensor<Scalar>& image,
                               const DiffusionSchedule& sched, const SampleOptions& options, int K,
                               Tensor<Scalar>* variance = nullptr);

SampleOptions sample_options(const TrainConfig& config, std::uint64_t seed);

/// Checkpoint directory: weights.bin, optimizer.bin (optional), config.json,
/// step.
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& dir, MaskDiffusionModel<Scalar>& model, const TrainConfig& config,
                     long step, const AdamW<Scalar>* optimizer = nullptr);

template <typename Scalar>
struct Checkpoint {
  TrainConfig config;
  long step = 0;
  std::unique_ptr<MaskDiffusionModel<Scalar>> model;
};

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& dir);

/// Restores optimiser moments saved next to the weights.
template <typename Scalar>
void load_optimizer_state(const std::filesystem::path& dir, AdamW<Scalar>& optimizer);

/// Copies archived values into the model's parameters, matching by name.
template <typename Scalar>
void load_weights(const std::filesystem::path& file, MaskDiffusionModel<Scalar>& model);

}  // namespace maskdiff

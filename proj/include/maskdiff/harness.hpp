// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/metrics.hpp"
#include "maskdiff/pipeline.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace maskdiff {

inline constexpr const char* kAucAggregation = "per-image mean over images with both classes present";

struct EvalReport {
  std::vector<std::string> ids;
  std::vector<std::optional<double>> auc;
  AucSummary summary;
  std::string fingerprint;
};

/// Samples every image (config.ensemble samples each, T_sample steps) and
/// scores it against its mask. Images are processed in dataset order in
/// batches of `batch_size`, so the same dataset always sees the same noise.
EvalReport evaluate(const MaskDiffusionModel<float>& model, const Dataset& data, const TrainConfig& config,
                    std::uint64_t seed, int batch_size = 8);

/// Structured text with the fingerprint and aggregation note in the header.
std::string format_report(const EvalReport& report);
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);

struct AblationRow {
  bool dmfe_on = true;
  bool es_on = true;
  AucSummary summary;
  std::string fingerprint;
};

struct AblationOptions {
  /// Per-cell checkpoints live in checkpoint_root/dmfe{0,1}_es{0,1}. Empty
  /// disables loading and saving.
  std::filesystem::path checkpoint_root;
  bool allow_training = true;
  std::uint64_t eval_seed = 0;
  std::function<void(const std::string&)> log;
};

/// The 2 x 2 grid over (dmfe_on, es_on), rows ordered (on,on), (on,off),
/// (off,on), (off,off). Cells without a checkpoint are trained from `base`.
std::vector<AblationRow> run_ablation(const Dataset& train_set, const Dataset& test_set, const TrainConfig& base,
                                      const AblationOptions& options);

std::string format_ablation(const std::vector<AblationRow>& rows);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

struct RobustnessPoint {
  AttackSpec attack;
  AucSummary summary;
};

struct RobustnessReport {
  AucSummary clean;
  std::vector<RobustnessPoint> points;
  std::string fingerprint;
};

/// Attacks the test set with every spec in `grid`, samples and scores it.
RobustnessReport run_robustness(const MaskDiffusionModel<float>& model, const Dataset& test_set,
                                const TrainConfig& config, const std::vector<AttackSpec>& grid, std::uint64_t seed);

/// Reads "kind,strength" lines ('#' comments allowed).
std::vector<AttackSpec> read_attack_grid(const std::filesystem::path& path, std::uint64_t seed);

void write_robustness_csv(const std::filesystem::path& path, const RobustnessReport& report);
/// One panel per attack kind: strength on x, mean AUC in [0, 1] on y.
void render_robustness_plot(const std::filesystem::path& path, const RobustnessReport& report);

/// Grid image with rows x_t, x0_hat, edge probability and one column per
/// sampling step, for batch item `item`. Signal-range rows map [-1, 1] to
/// black..white, probabilities map [0, 1].
void render_trace(const SampleTrace<float>& trace, const std::filesystem::path& path, Index item = 0);

/// Step-by-step record: one CSV line per (step, row) with summary statistics.
void write_trace_csv(const SampleTrace<float>& trace, const std::filesystem::path& path, Index item = 0);

}  // namespace maskdiff

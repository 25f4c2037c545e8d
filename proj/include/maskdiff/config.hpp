// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/diffusion.hpp"
#include "maskdiff/losses.hpp"
#include "maskdiff/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

namespace maskdiff {

/// Where training/evaluation images come from. An empty `dir` selects the
/// procedural generator.
struct DataConfig {
  std::string dir;
  int synthetic_n = 64;
  int size = 64;
  std::uint64_t seed = 1;
  /// Number of held-out images (generated with a different seed, or the
  /// tail of a folder dataset).
  int eval_n = 16;
};

struct TrainConfig {
  int epochs = 50;
  int batch_size = 8;
  /// Overrides epochs when positive.
  long max_steps = 0;
  double lr = 1e-3;
  std::string lr_schedule = "cosine";  // "cosine" or "constant"
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  int T_train = 1000;
  int T_sample = 10;
  double snr_shift = kDefaultSnrShift;
  double lambda_mask = 0.7;
  double mu_edge = 0.3;
  std::uint64_t seed = 0;
  bool dmfe_on = true;
  bool es_on = true;
  std::string sampler = "ancestral";  // "ancestral" or "ddim"
  int ensemble = 1;
  DataConfig data;
  ModelConfig model;

  /// Values of the full-scale setting (150 epochs, batch 32).
  static TrainConfig full_scale();

  LossWeights loss_weights() const { return {lambda_mask, es_on ? mu_edge : 0.0}; }
  /// Model config with the ablation flags and T_train folded in.
  ModelConfig effective_model() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

TrainConfig load_train_config(const std::filesystem::path& path);
void save_train_config(const std::filesystem::path& path, const TrainConfig& config);

/// FNV-1a 64 of the canonical JSON dump of the config and the dataset seed,
/// as 16 hex digits.
std::string config_fingerprint(const TrainConfig& config);

}  // namespace maskdiff

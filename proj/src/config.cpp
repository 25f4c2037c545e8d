// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>

namespace maskdiff {

using nlohmann::json;

namespace {

// Reads key into out when present.
template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) it->get_to(out);
}

// Every object key in `given` must also exist in `known` (the serialised
// defaults), so a misspelt option fails loudly instead of being dropped.
void check_known_keys(const json& given, const json& known, const std::string& where) {
  if (!given.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string name = where.empty() ? it.key() : where + "." + it.key();
    const auto ref = known.find(it.key());
    if (ref == known.end()) throw std::runtime_error("unknown option '" + name + "'");
    if (ref->is_object()) check_known_keys(it.value(), *ref, name);
  }
}

}  // namespace

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.epochs = 150;
  c.batch_size = 32;
  return c;
}

ModelConfig TrainConfig::effective_model() const {
  ModelConfig m = model;
  m.conditions.dmfe_on = dmfe_on;
  m.denoiser.max_timestep = T_train;
  return m;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("train config: " + what);
  };
  require(epochs >= 1, "epochs must be positive");
  require(batch_size >= 1, "batch_size must be positive");
  require(max_steps >= 0, "max_steps must be non-negative");
  require(lr > 0 && std::isfinite(lr), "lr must be positive");
  require(lr_schedule == "cosine" || lr_schedule == "constant", "lr_schedule must be cosine or constant");
  require(weight_decay >= 0, "weight_decay must be non-negative");
  require(grad_clip > 0, "grad_clip must be positive");
  require(T_train >= 2, "T_train must be at least 2");
  require(T_sample >= 1 && T_sample <= T_train, "T_sample must lie in [1, T_train]");
  require(std::isfinite(snr_shift), "snr_shift must be finite");
  require(lambda_mask >= 0 && mu_edge >= 0, "loss weights must be non-negative");
  require(sampler == "ancestral" || sampler == "ddim", "sampler must be ancestral or ddim");
  require(ensemble >= 1, "ensemble must be at least 1");
  require(data.size >= 32 && data.size % 32 == 0, "data.size must be a positive multiple of 32");
  require(data.synthetic_n >= 1 && data.eval_n >= 0, "data counts must be positive");
  maskdiff::validate(effective_model());
}

void to_json(json& j, const ModelConfig& c) {
  const auto& b = c.backbone;
  const auto& a = c.conditions;
  const auto& d = c.denoiser;
  j = json{{"backbone",
            {{"channels", b.channels},
             {"blocks_per_stage", b.blocks_per_stage},
             {"heads", b.heads},
             {"sr_ratios", b.sr_ratios},
             {"mlp_ratio", b.mlp_ratio},
             {"time_sinusoid_dim", b.time_sinusoid_dim},
             {"time_token", b.time_token}}},
           {"conditions",
            {{"cond_channels", a.cond_channels},
             {"dmfe_mid_channels", a.dmfe_mid_channels},
             {"groups", a.groups},
             {"dmfe_shortcut", a.dmfe_shortcut}}},
           {"denoiser",
            {{"channels", d.channels},
             {"stem_channels", d.stem_channels},
             {"head_channels", d.head_channels},
             {"groups", d.groups},
             {"time_sinusoid_dim", d.time_sinusoid_dim},
             {"time_dim", d.time_dim},
             {"cond_channels", d.cond_channels},
             {"concat_image", d.concat_image}}}};
}

void from_json(const json& j, ModelConfig& c) {
  if (auto it = j.find("backbone"); it != j.end()) {
    auto& b = c.backbone;
    read_opt(*it, "channels", b.channels);
    read_opt(*it, "blocks_per_stage", b.blocks_per_stage);
    read_opt(*it, "heads", b.heads);
    read_opt(*it, "sr_ratios", b.sr_ratios);
    read_opt(*it, "mlp_ratio", b.mlp_ratio);
    read_opt(*it, "time_sinusoid_dim", b.time_sinusoid_dim);
    read_opt(*it, "time_token", b.time_token);
  }
  if (auto it = j.find("conditions"); it != j.end()) {
    auto& a = c.conditions;
    read_opt(*it, "cond_channels", a.cond_channels);
    read_opt(*it, "dmfe_mid_channels", a.dmfe_mid_channels);
    read_opt(*it, "groups", a.groups);
    read_opt(*it, "dmfe_shortcut", a.dmfe_shortcut);
  }
  if (auto it = j.find("denoiser"); it != j.end()) {
    auto& d = c.denoiser;
    read_opt(*it, "channels", d.channels);
    read_opt(*it, "stem_channels", d.stem_channels);
    read_opt(*it, "head_channels", d.head_channels);
    read_opt(*it, "groups", d.groups);
    read_opt(*it, "time_sinusoid_dim", d.time_sinusoid_dim);
    read_opt(*it, "time_dim", d.time_dim);
    read_opt(*it, "cond_channels", d.cond_channels);
    read_opt(*it, "concat_image", d.concat_image);
  }
}

void to_json(json& j, const DataConfig& c) {
  j = json{{"dir", c.dir}, {"synthetic_n", c.synthetic_n}, {"size", c.size}, {"seed", c.seed}, {"eval_n", c.eval_n}};
}

void from_json(const json& j, DataConfig& c) {
  read_opt(j, "dir", c.dir);
  read_opt(j, "synthetic_n", c.synthetic_n);
  read_opt(j, "size", c.size);
  read_opt(j, "seed", c.seed);
  read_opt(j, "eval_n", c.eval_n);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"max_steps", c.max_steps},
           {"lr", c.lr},
           {"lr_schedule", c.lr_schedule},
           {"weight_decay", c.weight_decay},
           {"grad_clip", c.grad_clip},
           {"T_train", c.T_train},
           {"T_sample", c.T_sample},
           {"snr_shift", c.snr_shift},
           {"lambda_mask", c.lambda_mask},
           {"mu_edge", c.mu_edge},
           {"seed", c.seed},
           {"dmfe_on", c.dmfe_on},
           {"es_on", c.es_on},
           {"sampler", c.sampler},
           {"ensemble", c.ensemble},
           {"data", c.data},
           {"model", c.model}};
}

void from_json(const json& j, TrainConfig& c) {
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "max_steps", c.max_steps);
  read_opt(j, "lr", c.lr);
  read_opt(j, "lr_schedule", c.lr_schedule);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "grad_clip", c.grad_clip);
  read_opt(j, "T_train", c.T_train);
  read_opt(j, "T_sample", c.T_sample);
  read_opt(j, "snr_shift", c.snr_shift);
  read_opt(j, "lambda_mask", c.lambda_mask);
  read_opt(j, "mu_edge", c.mu_edge);
  read_opt(j, "seed", c.seed);
  read_opt(j, "dmfe_on", c.dmfe_on);
  read_opt(j, "es_on", c.es_on);
  read_opt(j, "sampler", c.sampler);
  read_opt(j, "ensemble", c.ensemble);
  read_opt(j, "data", c.data);
  read_opt(j, "model", c.model);
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path.string());
  TrainConfig c;
  try {
    const json j = json::parse(in);
    if (!j.is_object()) throw std::runtime_error("top level must be an object");
    check_known_keys(j, json(TrainConfig{}), "");
    from_json(j, c);
  } catch (const std::exception& e) {
    throw std::runtime_error("invalid config file " + path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

void save_train_config(const std::filesystem::path& path, const TrainConfig& config) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write config file: " + path.string());
  out << json(config).dump(2) << '\n';
}

std::string config_fingerprint(const TrainConfig& config) {
  const std::string text = json(config).dump() + "|data_seed=" + std::to_string(config.data.seed);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace maskdiff

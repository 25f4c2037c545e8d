// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/conditions.hpp"
#include "maskdiff/denoiser.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace maskdiff {

struct ModelConfig {
  BackboneConfig backbone;
  ConditionConfig conditions;
  DenoiserConfig denoiser;
};

/// Throws std::invalid_argument when the three sub-configs disagree (e.g. the
/// denoiser expects a different number of condition channels).
void validate(const ModelConfig& config);

template <typename Scalar>
using NamedParameters = std::vector<std::pair<std::string, Var<Scalar>>>;

/// Condition network plus denoiser.
template <typename Scalar>
class MaskDiffusionModel {
 public:
  MaskDiffusionModel(const ModelConfig& config, std::uint64_t seed);

  /// image: [N, 3, H, W] in [0, 1]; x_t: [N, 1, H, W] noisy mask.
  DenoiseOutput<Scalar> operator()(const Var<Scalar>& image, const Var<Scalar>& x_t, const std::vector<int>& t,
                                   bool with_edge = true) const;

  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);
  NamedParameters<Scalar> named_parameters();

  const ModelConfig& config() const { return config_; }

  ConditionNetwork<Scalar> conditions;
  Denoiser<Scalar> denoiser;

 private:
  ModelConfig config_;
};

}  // namespace maskdiff

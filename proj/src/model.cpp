// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/model.hpp"

#include <stdexcept>

namespace maskdiff {

void validate(const ModelConfig& config) {
  if (config.conditions.cond_channels != config.denoiser.cond_channels) {
    throw std::invalid_argument("model config: conditions produce " + std::to_string(config.conditions.cond_channels) +
                                " channels but the denoiser expects " +
                                std::to_string(config.denoiser.cond_channels));
  }
  if (config.backbone.in_channels != 4) {
    throw std::invalid_argument("model config: backbone input must be image (3) + noisy mask (1)");
  }
}

template <typename Scalar>
MaskDiffusionModel<Scalar>::MaskDiffusionModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  validate(config);
  Rng rng(seed);
  conditions = ConditionNetwork<Scalar>(config.backbone, config.conditions, rng);
  denoiser = Denoiser<Scalar>(config.denoiser, rng);
}

template <typename Scalar>
DenoiseOutput<Scalar> MaskDiffusionModel<Scalar>::operator()(const Var<Scalar>& image, const Var<Scalar>& x_t,
                                                             const std::vector<int>& t, bool with_edge) const {
  const ConditionSet<Scalar> conds = conditions(image, x_t, t);
  return denoiser(x_t, conds, t, image, with_edge);
}

template <typename Scalar>
void MaskDiffusionModel<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  conditions.for_each_parameter(join_name(prefix, "acn"), fn);
  denoiser.for_each_parameter(join_name(prefix, "denoiser"), fn);
}

template <typename Scalar>
NamedParameters<Scalar> MaskDiffusionModel<Scalar>::named_parameters() {
  NamedParameters<Scalar> out;
  for_each_parameter("", [&](const std::string& name, Var<Scalar>& p) { out.emplace_back(name, p); });
  return out;
}

template class MaskDiffusionModel<float>;
template class MaskDiffusionModel<double>;

}  // namespace maskdiff

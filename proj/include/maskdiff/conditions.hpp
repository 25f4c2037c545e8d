// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/backbone.hpp"
#include "maskdiff/dmfe.hpp"

#include <array>

namespace maskdiff {

struct ConditionConfig {
  int cond_channels = 64;
  int dmfe_mid_channels = 32;
  int groups = 8;
  bool dmfe_on = true;
  bool dmfe_shortcut = true;
};

/// Per-scale semantic conditions (strides 4/8/16/32) and the stride-4 edge
/// condition, all with cond_channels channels.
template <typename Scalar>
struct ConditionSet {
  std::array<Var<Scalar>, 4> semantic;
  Var<Scalar> edge_feature;
};

/// Backbone plus the semantic/edge condition heads.
///
/// Semantic conditions are refined top-down: s4 = B4(f4) and
/// s_i = B_i(f_i) + P_i(up2(s_{i+1})). The edge condition fuses f1 with f4
/// upsampled to stride 4 through one more block.
template <typename Scalar>
class ConditionNetwork {
 public:
  ConditionNetwork() = default;
  ConditionNetwork(const BackboneConfig& backbone, const ConditionConfig& config, Rng& rng);

  FeaturePyramid<Scalar> extract_pyramid(const Var<Scalar>& image, const Var<Scalar>& x_t,
                                         const std::vector<int>& t) const {
    return backbone(image, x_t, t);
  }
  std::array<Var<Scalar>, 4> build_semantic_conditions(const FeaturePyramid<Scalar>& pyramid) const;
  Var<Scalar> build_edge_condition(const FeaturePyramid<Scalar>& pyramid) const;
  ConditionSet<Scalar> build_conditions(const FeaturePyramid<Scalar>& pyramid) const;

  ConditionSet<Scalar> operator()(const Var<Scalar>& image, const Var<Scalar>& x_t, const std::vector<int>& t) const {
    return build_conditions(extract_pyramid(image, x_t, t));
  }
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  const ConditionConfig& config() const { return config_; }

  PyramidBackbone<Scalar> backbone;
  std::array<ContextBlock<Scalar>, 4> semantic_blocks;
  std::array<Conv2d<Scalar>, 3> topdown;
  ContextBlock<Scalar> edge_block;

 private:
  ConditionConfig config_;
};

}  // namespace maskdiff

// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/conditions.hpp"

#include <string>

namespace maskdiff {

template <typename Scalar>
ConditionNetwork<Scalar>::ConditionNetwork(const BackboneConfig& backbone_config, const ConditionConfig& config,
                                           Rng& rng)
    : backbone(backbone_config, rng), config_(config) {
  for (std::size_t i = 0; i < 4; ++i) {
    DmfeConfig dc;
    dc.in_channels = backbone_config.channels[i];
    dc.mid_channels = config.dmfe_mid_channels;
    dc.out_channels = config.cond_channels;
    dc.groups = config.groups;
    dc.outer_shortcut = config.dmfe_shortcut;
    dc.allow_small_input = true;
    semantic_blocks[i] = ContextBlock<Scalar>(dc, config.dmfe_on, rng);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    topdown[i] = Conv2d<Scalar>::same(config.cond_channels, config.cond_channels, 1, rng);
  }
  DmfeConfig ec;
  ec.in_channels = backbone_config.channels[0] + backbone_config.channels[3];
  ec.mid_channels = config.dmfe_mid_channels;
  ec.out_channels = config.cond_channels;
  ec.groups = config.groups;
  ec.outer_shortcut = config.dmfe_shortcut;
  ec.allow_small_input = true;
  edge_block = ContextBlock<Scalar>(ec, config.dmfe_on, rng);
}

template <typename Scalar>
std::array<Var<Scalar>, 4> ConditionNetwork<Scalar>::build_semantic_conditions(
    const FeaturePyramid<Scalar>& pyramid) const {
  std::array<Var<Scalar>, 4> s;
  s[3] = semantic_blocks[3](pyramid[3]);
  for (int i = 2; i >= 0; --i) {
    const auto ui = static_cast<std::size_t>(i);
    const Var<Scalar>& f = pyramid[ui];
    const Var<Scalar>& coarse = s[ui + 1];
    if (f.dim(2) != 2 * coarse.dim(2) || f.dim(3) != 2 * coarse.dim(3)) {
      throw ShapeError("semantic conditions: level " + std::to_string(i) + " " + shape_str(f.shape()) +
                       " is not twice the size of level " + std::to_string(i + 1) + " " +
                       shape_str(coarse.shape()));
    }
    s[ui] = semantic_blocks[ui](f) + topdown[ui](resize_bilinear(coarse, f.dim(2), f.dim(3)));
  }
  return s;
}

template <typename Scalar>
Var<Scalar> ConditionNetwork<Scalar>::build_edge_condition(const FeaturePyramid<Scalar>& pyramid) const {
  const Var<Scalar>& low = pyramid[0];
  const Var<Scalar>& high = pyramid[3];
  if (low.dim(0) != high.dim(0) || low.dim(2) != 8 * high.dim(2) || low.dim(3) != 8 * high.dim(3)) {
    throw ShapeError("edge condition: f1 " + shape_str(low.shape()) + " and f4 " + shape_str(high.shape()) +
                     " are not 8x apart");
  }
  const Var<Scalar> lifted = resize_bilinear(high, low.dim(2), low.dim(3));
  return edge_block(concat<Scalar>({low, lifted}, 1));
}

template <typename Scalar>
ConditionSet<Scalar> ConditionNetwork<Scalar>::build_conditions(const FeaturePyramid<Scalar>& pyramid) const {
  ConditionSet<Scalar> c;
  c.semantic = build_semantic_conditions(pyramid);
  c.edge_feature = build_edge_condition(pyramid);
  return c;
}

template <typename Scalar>
void ConditionNetwork<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  backbone.for_each_parameter(join_name(prefix, "backbone"), fn);
  for (std::size_t i = 0; i < 4; ++i) {
    semantic_blocks[i].for_each_parameter(join_name(prefix, "semantic" + std::to_string(i)), fn);
  }
  for (std::size_t i = 0; i < 3; ++i) topdown[i].for_each_parameter(join_name(prefix, "topdown" + std::to_string(i)), fn);
  edge_block.for_each_parameter(join_name(prefix, "edge"), fn);
}

template class ConditionNetwork<float>;
template class ConditionNetwork<double>;

}  // namespace maskdiff

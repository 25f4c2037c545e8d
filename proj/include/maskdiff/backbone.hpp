// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/nn.hpp"

#include <array>
#include <vector>

namespace maskdiff {

struct BackboneConfig {
  std::array<int, 4> channels{32, 64, 128, 256};
  int blocks_per_stage = 2;
  std::array<int, 4> heads{1, 2, 4, 8};
  /// Spatial-reduction factor of keys/values per stage (1 = full attention).
  std::array<int, 4> sr_ratios{4, 2, 1, 1};
  int mlp_ratio = 2;
  int in_channels = 4;
  int time_sinusoid_dim = 64;
  bool time_token = true;
};

/// Four time-conditioned maps at strides 4, 8, 16 and 32.
template <typename Scalar>
struct FeaturePyramid {
  std::array<Var<Scalar>, 4> levels;
  const Var<Scalar>& operator[](std::size_t i) const { return levels[i]; }
};

/// Attention with optional spatial reduction of keys/values. The first
/// `prefix` tokens (the time token) bypass the reduction and are always keys.
template <typename Scalar>
class ReducedAttention {
 public:
  ReducedAttention() = default;
  ReducedAttention(int dim, int heads, int sr_ratio, Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& tokens, Index prefix, Index h, Index w) const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  int heads = 1;
  int sr_ratio = 1;
  Linear<Scalar> query;
  Linear<Scalar> key_value;
  Linear<Scalar> proj;
  Conv2d<Scalar> reduce;
  LayerNorm<Scalar> reduce_norm;
};

template <typename Scalar>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(int dim, int heads, int sr_ratio, int mlp_ratio, Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& tokens, Index prefix, Index h, Index w) const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  LayerNorm<Scalar> norm1;
  ReducedAttention<Scalar> attn;
  LayerNorm<Scalar> norm2;
  Linear<Scalar> fc1;
  Linear<Scalar> fc2;
};

template <typename Scalar>
class PyramidStage {
 public:
  PyramidStage() = default;
  PyramidStage(int in_channels, int out_channels, int patch_kernel, int patch_stride, int blocks, int heads,
               int sr_ratio, int mlp_ratio, int time_sinusoid_dim, Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& x, const std::vector<int>& t, bool use_time_token) const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  Conv2d<Scalar> patch_embed;
  LayerNorm<Scalar> patch_norm;
  TimeEmbedding<Scalar> time;
  std::vector<TransformerBlock<Scalar>> blocks;
  LayerNorm<Scalar> out_norm;
};

/// Four-stage pyramid transformer over concat(image, x_t). Each stage merges
/// patches, prepends a time token, runs attention + feed-forward blocks,
/// drops the token and folds the tokens back into a map.
template <typename Scalar>
class PyramidBackbone {
 public:
  PyramidBackbone() = default;
  PyramidBackbone(const BackboneConfig& config, Rng& rng);

  /// image: [N, 3, H, W] in [0, 1]; x_t: [N, 1, H, W]; one timestep per sample.
  FeaturePyramid<Scalar> operator()(const Var<Scalar>& image, const Var<Scalar>& x_t, const std::vector<int>& t) const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  const BackboneConfig& config() const { return config_; }

 private:
  BackboneConfig config_;
  std::array<PyramidStage<Scalar>, 4> stages_;
};

}  // namespace maskdiff

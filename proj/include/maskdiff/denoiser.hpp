// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/conditions.hpp"

#include <array>
#include <optional>

namespace maskdiff {

struct DenoiserConfig {
  std::array<int, 4> channels{32, 64, 128, 256};
  int stem_channels = 16;
  int head_channels = 16;
  int groups = 8;
  int time_sinusoid_dim = 64;
  int time_dim = 128;
  int cond_channels = 64;
  int max_timestep = 1000;
  /// Also feed the image to the encoder (off: the encoder sees x_t only).
  bool concat_image = false;
};

template <typename Scalar>
struct DenoiseOutput {
  Var<Scalar> mask_logits;
  Var<Scalar> edge_logits;
};

/// conv -> GN(h) * (1 + scale(t)) + shift(t) -> SiLU
template <typename Scalar>
class AdaGnConv {
 public:
  AdaGnConv() = default;
  AdaGnConv(int in_channels, int out_channels, int kernel, int stride, int groups, int time_dim, Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& x, const Var<Scalar>& time_features) const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  int groups = 1;
  Conv2d<Scalar> conv;
  Linear<Scalar> film;
};

template <typename Scalar>
class AdaGnResidual {
 public:
  AdaGnResidual() = default;
  AdaGnResidual(int channels, int groups, int time_dim, Rng& rng) : body(channels, channels, 3, 1, groups, time_dim, rng) {}

  Var<Scalar> operator()(const Var<Scalar>& x, const Var<Scalar>& time_features) const { return x + body(x, time_features); }
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) { body.for_each_parameter(prefix, fn); }

  AdaGnConv<Scalar> body;
};

/// Encoder features shared by both decoders.
template <typename Scalar>
struct EncoderFeatures {
  Var<Scalar> input;
  Var<Scalar> stem;                    // stride 2
  std::array<Var<Scalar>, 4> levels;  // strides 4, 8, 16, 32
};

/// Upsampling path. The mask decoder fuses a semantic condition at every
/// level; the edge decoder fuses the edge condition at stride 4 only.
template <typename Scalar>
class MaskDecoder {
 public:
  enum class Conditioning { semantic, edge };

  MaskDecoder() = default;
  MaskDecoder(const DenoiserConfig& config, int input_channels, Conditioning conditioning, Rng& rng);

  Var<Scalar> operator()(const EncoderFeatures<Scalar>& enc, const ConditionSet<Scalar>& conds,
                         const Var<Scalar>& time_features) const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  Conditioning conditioning = Conditioning::semantic;
  std::array<Conv2d<Scalar>, 4> fuse;
  std::array<AdaGnResidual<Scalar>, 4> blocks;
  AdaGnConv<Scalar> tail_half;
  AdaGnConv<Scalar> tail_full;
  Conv2d<Scalar> head;
};

template <typename Scalar>
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& config, Rng& rng);

  /// x_t: [N, 1, H, W]. `image` is required only when concat_image is set.
  /// With with_edge == false the edge decoder is not run and edge_logits is
  /// left undefined.
  DenoiseOutput<Scalar> operator()(const Var<Scalar>& x_t, const ConditionSet<Scalar>& conds, const std::vector<int>& t,
                                   const Var<Scalar>& image = Var<Scalar>(), bool with_edge = true) const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  const DenoiserConfig& config() const { return config_; }

  TimeEmbedding<Scalar> time;
  AdaGnConv<Scalar> stem;
  std::array<AdaGnConv<Scalar>, 4> down;
  std::array<AdaGnResidual<Scalar>, 4> encoder_blocks;
  MaskDecoder<Scalar> mask_decoder;
  MaskDecoder<Scalar> edge_decoder;

 private:
  DenoiserConfig config_;
};

/// x0_hat = 2 * logistic(mask_logits) - 1.
template <typename Scalar>
Tensor<Scalar> logits_to_x0hat(const Tensor<Scalar>& mask_logits);

}  // namespace maskdiff

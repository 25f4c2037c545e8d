// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/nn.hpp"

#include <array>
#include <variant>

namespace maskdiff {

struct DmfeConfig {
  int in_channels = 0;
  int mid_channels = 32;
  int out_channels = 0;
  int groups = 8;
  /// Group norm after every inner convolution. Disabled only for exact
  /// receptive-field analysis.
  bool normalize = true;
  /// Adds a 1x1-projected copy of the input to the fused output.
  bool outer_shortcut = true;
  /// Dilation-7 branches need at least 8x8 inputs to see real context; the
  /// coarse pyramid levels of small images opt out of that check.
  bool allow_small_input = false;
};

/// conv -> [group norm] -> SiLU
template <typename Scalar>
class ConvNormAct {
 public:
  ConvNormAct() = default;
  ConvNormAct(int in_channels, int out_channels, int kernel_h, int kernel_w, int dilation, int groups, bool normalize,
              Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& x) const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  Conv2d<Scalar> conv;
  GroupNorm<Scalar> norm;
  bool normalize = true;
};

/// 1x3 followed by 3x1.
template <typename Scalar>
class AsymmetricPair {
 public:
  AsymmetricPair() = default;
  AsymmetricPair(int channels, int groups, bool normalize, Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& x) const { return col(row(x)); }
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  ConvNormAct<Scalar> row;
  ConvNormAct<Scalar> col;
};

/// The stacked branch convolution: 1x3 -> 3x1 -> 3x3 with dilation d in {3, 5, 7}.
template <typename Scalar>
class StackedDilatedConv {
 public:
  StackedDilatedConv() = default;
  StackedDilatedConv(int channels, int dilation, int groups, bool normalize, Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& x) const { return dilated(pair(x)); }
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  int dilation = 3;
  AsymmetricPair<Scalar> pair;
  ConvNormAct<Scalar> dilated;
};

/// Dual-stream multi-scale feature extractor.
///
/// Stream one grows the dilation over its branches (pair, 3, 5, 7), stream two
/// shrinks it (7, 5, 3, pair). Each branch after the first consumes the shared
/// 1x1 reduction plus the previous branch output. The per-stream branch sums
/// are concatenated and fused by a 3x3 convolution.
template <typename Scalar>
class Dmfe {
 public:
  struct Branches {
    Var<Scalar> reduced;
    std::array<Var<Scalar>, 4> down;
    std::array<Var<Scalar>, 4> up;
    Var<Scalar> output;
  };

  Dmfe() = default;
  Dmfe(const DmfeConfig& config, Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& x) const { return forward_branches(x).output; }
  Branches forward_branches(const Var<Scalar>& x) const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  const DmfeConfig& config() const { return config_; }

  ConvNormAct<Scalar> reduce;
  AsymmetricPair<Scalar> down_first;
  std::array<StackedDilatedConv<Scalar>, 3> down_rest;
  std::array<StackedDilatedConv<Scalar>, 3> up_first;
  AsymmetricPair<Scalar> up_last;
  Conv2d<Scalar> fuse;
  Conv2d<Scalar> shortcut;

 private:
  DmfeConfig config_;
};

/// Stand-in used when the extractor is ablated: 3x3 conv -> group norm -> SiLU.
template <typename Scalar>
class PlainConvBlock {
 public:
  PlainConvBlock() = default;
  PlainConvBlock(int in_channels, int out_channels, int groups, Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& x) const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) { block.for_each_parameter(prefix, fn); }

  int in_channels = 0;
  ConvNormAct<Scalar> block;
};

/// Either a Dmfe or its plain replacement, with identical shapes.
template <typename Scalar>
class ContextBlock {
 public:
  ContextBlock() = default;
  ContextBlock(const DmfeConfig& config, bool use_dmfe, Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& x) const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  bool uses_dmfe() const { return std::holds_alternative<Dmfe<Scalar>>(impl_); }
  const Dmfe<Scalar>* dmfe() const { return std::get_if<Dmfe<Scalar>>(&impl_); }
  Dmfe<Scalar>* dmfe() { return std::get_if<Dmfe<Scalar>>(&impl_); }

 private:
  std::variant<Dmfe<Scalar>, PlainConvBlock<Scalar>> impl_;
};

}  // namespace maskdiff

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/ops.hpp"

#include <functional>
#include <random>
#include <string>

namespace maskdiff {

using Rng = std::mt19937_64;

template <typename Scalar>
using ParamVisitor = std::function<void(const std::string& name, Var<Scalar>& param)>;

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// Leaf parameter initialised from U(-bound, bound). Values are drawn in
/// double precision so float and double models built from the same seed agree.
template <typename Scalar>
Var<Scalar> uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return Var<Scalar>(std::move(t), true);
}

template <typename Scalar>
Var<Scalar> constant_parameter(Shape shape, double value) {
  return Var<Scalar>(Tensor<Scalar>::constant(std::move(shape), static_cast<Scalar>(value)), true);
}

template <typename Scalar>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel_h, int kernel_w, Conv2dOptions opt, Rng& rng,
         bool with_bias = true);

  /// Square kernel with "same" padding for stride 1.
  static Conv2d same(int in_channels, int out_channels, int kernel, Rng& rng, int dilation = 1);

  Var<Scalar> operator()(const Var<Scalar>& x) const { return conv2d(x, weight, bias, options); }
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  Var<Scalar> weight;
  Var<Scalar> bias;
  Conv2dOptions options;
};

template <typename Scalar>
class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features, Rng& rng, bool with_bias = true);

  Var<Scalar> operator()(const Var<Scalar>& x) const { return linear(x, weight, bias); }
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  Var<Scalar> weight;
  Var<Scalar> bias;
};

template <typename Scalar>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(int groups, int channels);

  Var<Scalar> operator()(const Var<Scalar>& x) const { return channel_affine(group_norm(x, groups), gamma, beta); }
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  int groups = 1;
  Var<Scalar> gamma;
  Var<Scalar> beta;
};

template <typename Scalar>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int features);

  Var<Scalar> operator()(const Var<Scalar>& x) const { return layer_norm(x, gamma, beta); }
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  Var<Scalar> gamma;
  Var<Scalar> beta;
};

/// Sinusoidal encoding of a timestep, interleaved as [sin, cos, sin, cos, ...]
/// with frequencies 10000^(-2i/dim).
template <typename Scalar>
Tensor<Scalar> sinusoidal_embedding(int t, int dim);

/// Sinusoidal encoding followed by a learned Linear-SiLU-Linear map.
template <typename Scalar>
class TimeEmbedding {
 public:
  TimeEmbedding() = default;
  TimeEmbedding(int sinusoid_dim, int out_dim, Rng& rng);

  /// One embedding row per timestep: [N, out_dim].
  Var<Scalar> operator()(const std::vector<int>& timesteps) const;
  void for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn);

  int sinusoid_dim = 0;
  Linear<Scalar> fc1;
  Linear<Scalar> fc2;
};

/// Counts scalar parameters reachable through a module's visitor.
template <typename Scalar, typename Module>
Index parameter_count(Module& m) {
  Index total = 0;
  m.for_each_parameter("", [&](const std::string&, Var<Scalar>& p) { total += p.size(); });
  return total;
}

}  // namespace maskdiff

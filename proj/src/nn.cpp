// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/nn.hpp"

#include <cmath>

namespace maskdiff {

template <typename Scalar>
Conv2d<Scalar>::Conv2d(int in_channels, int out_channels, int kernel_h, int kernel_w, Conv2dOptions opt, Rng& rng,
                       bool with_bias)
    : options(opt) {
  if (in_channels < 1 || out_channels < 1 || kernel_h < 1 || kernel_w < 1) {
    throw std::invalid_argument("Conv2d: non-positive dimension");
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * kernel_h * kernel_w));
  weight = uniform_parameter<Scalar>({out_channels, in_channels, kernel_h, kernel_w}, bound, rng);
  if (with_bias) bias = uniform_parameter<Scalar>({out_channels}, bound, rng);
}

template <typename Scalar>
Conv2d<Scalar> Conv2d<Scalar>::same(int in_channels, int out_channels, int kernel, Rng& rng, int dilation) {
  Conv2dOptions opt;
  opt.pad_h = opt.pad_w = dilation * (kernel - 1) / 2;
  opt.dilation_h = opt.dilation_w = dilation;
  return Conv2d(in_channels, out_channels, kernel, kernel, opt, rng);
}

template <typename Scalar>
void Conv2d<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  fn(join_name(prefix, "weight"), weight);
  if (bias.defined()) fn(join_name(prefix, "bias"), bias);
}

template <typename Scalar>
Linear<Scalar>::Linear(int in_features, int out_features, Rng& rng, bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight = uniform_parameter<Scalar>({out_features, in_features}, bound, rng);
  if (with_bias) bias = uniform_parameter<Scalar>({out_features}, bound, rng);
}

template <typename Scalar>
void Linear<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  fn(join_name(prefix, "weight"), weight);
  if (bias.defined()) fn(join_name(prefix, "bias"), bias);
}

template <typename Scalar>
GroupNorm<Scalar>::GroupNorm(int groups_, int channels)
    : groups(groups_), gamma(constant_parameter<Scalar>({channels}, 1.0)), beta(constant_parameter<Scalar>({channels}, 0.0)) {
  if (groups < 1 || channels % groups != 0) {
    throw std::invalid_argument("GroupNorm: " + std::to_string(channels) + " channels not divisible by " +
                                std::to_string(groups) + " groups");
  }
}

template <typename Scalar>
void GroupNorm<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  fn(join_name(prefix, "gamma"), gamma);
  fn(join_name(prefix, "beta"), beta);
}

template <typename Scalar>
LayerNorm<Scalar>::LayerNorm(int features)
    : gamma(constant_parameter<Scalar>({features}, 1.0)), beta(constant_parameter<Scalar>({features}, 0.0)) {}

template <typename Scalar>
void LayerNorm<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  fn(join_name(prefix, "gamma"), gamma);
  fn(join_name(prefix, "beta"), beta);
}

template <typename Scalar>
Tensor<Scalar> sinusoidal_embedding(int t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be positive and even");
  if (t < 0) throw std::invalid_argument("sinusoidal_embedding: negative timestep");
  Tensor<Scalar> e(Shape{dim});
  for (int i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / dim);
    e[2 * i] = static_cast<Scalar>(std::sin(t * freq));
    e[2 * i + 1] = static_cast<Scalar>(std::cos(t * freq));
  }
  return e;
}

template <typename Scalar>
TimeEmbedding<Scalar>::TimeEmbedding(int sinusoid_dim_, int out_dim, Rng& rng)
    : sinusoid_dim(sinusoid_dim_), fc1(sinusoid_dim_, out_dim, rng), fc2(out_dim, out_dim, rng) {
  if (sinusoid_dim % 2 != 0 || out_dim % 2 != 0) throw std::invalid_argument("TimeEmbedding: dims must be even");
}

template <typename Scalar>
Var<Scalar> TimeEmbedding<Scalar>::operator()(const std::vector<int>& timesteps) const {
  const auto n = static_cast<Index>(timesteps.size());
  Tensor<Scalar> table(Shape{n, sinusoid_dim});
  for (Index i = 0; i < n; ++i) {
    table.vec().segment(i * sinusoid_dim, sinusoid_dim) =
        sinusoidal_embedding<Scalar>(timesteps[static_cast<std::size_t>(i)], sinusoid_dim).vec();
  }
  return fc2(silu(fc1(Var<Scalar>(std::move(table)))));
}

template <typename Scalar>
void TimeEmbedding<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  fc1.for_each_parameter(join_name(prefix, "fc1"), fn);
  fc2.for_each_parameter(join_name(prefix, "fc2"), fn);
}

template class Conv2d<float>;
template class Conv2d<double>;
template class Linear<float>;
template class Linear<double>;
template class GroupNorm<float>;
template class GroupNorm<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template class TimeEmbedding<float>;
template class TimeEmbedding<double>;
template Tensor<float> sinusoidal_embedding<float>(int, int);
template Tensor<double> sinusoidal_embedding<double>(int, int);

}  // namespace maskdiff

// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/dmfe.hpp"

#include <stdexcept>
#include <string>

namespace maskdiff {

template <typename Scalar>
ConvNormAct<Scalar>::ConvNormAct(int in_channels, int out_channels, int kernel_h, int kernel_w, int dilation,
                                 int groups, bool normalize_, Rng& rng)
    : normalize(normalize_) {
  Conv2dOptions opt;
  opt.dilation_h = opt.dilation_w = dilation;
  opt.pad_h = dilation * (kernel_h - 1) / 2;
  opt.pad_w = dilation * (kernel_w - 1) / 2;
  conv = Conv2d<Scalar>(in_channels, out_channels, kernel_h, kernel_w, opt, rng);
  if (normalize) norm = GroupNorm<Scalar>(groups, out_channels);
}

template <typename Scalar>
Var<Scalar> ConvNormAct<Scalar>::operator()(const Var<Scalar>& x) const {
  Var<Scalar> y = conv(x);
  if (normalize) y = norm(y);
  return silu(y);
}

template <typename Scalar>
void ConvNormAct<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  conv.for_each_parameter(join_name(prefix, "conv"), fn);
  if (normalize) norm.for_each_parameter(join_name(prefix, "norm"), fn);
}

template <typename Scalar>
AsymmetricPair<Scalar>::AsymmetricPair(int channels, int groups, bool normalize, Rng& rng)
    : row(channels, channels, 1, 3, 1, groups, normalize, rng), col(channels, channels, 3, 1, 1, groups, normalize, rng) {}

template <typename Scalar>
void AsymmetricPair<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  row.for_each_parameter(join_name(prefix, "conv1x3"), fn);
  col.for_each_parameter(join_name(prefix, "conv3x1"), fn);
}

template <typename Scalar>
StackedDilatedConv<Scalar>::StackedDilatedConv(int channels, int dilation_, int groups, bool normalize, Rng& rng)
    : dilation(dilation_) {
  if (dilation != 3 && dilation != 5 && dilation != 7) {
    throw std::invalid_argument("StackedDilatedConv: unsupported dilation " + std::to_string(dilation) +
                                " (expected 3, 5 or 7)");
  }
  pair = AsymmetricPair<Scalar>(channels, groups, normalize, rng);
  dilated = ConvNormAct<Scalar>(channels, channels, 3, 3, dilation, groups, normalize, rng);
}

template <typename Scalar>
void StackedDilatedConv<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  pair.for_each_parameter(prefix, fn);
  dilated.for_each_parameter(join_name(prefix, "dilated"), fn);
}

template <typename Scalar>
Dmfe<Scalar>::Dmfe(const DmfeConfig& config, Rng& rng) : config_(config) {
  const int mid = config.mid_channels;
  if (config.in_channels < 1 || config.out_channels < 1 || mid < 1) {
    throw std::invalid_argument("Dmfe: channel counts must be positive");
  }
  if (mid > config.in_channels) {
    throw std::invalid_argument("Dmfe: mid_channels (" + std::to_string(mid) + ") exceeds in_channels (" +
                                std::to_string(config.in_channels) + ")");
  }
  reduce = ConvNormAct<Scalar>(config.in_channels, mid, 1, 1, 1, config.groups, config.normalize, rng);
  down_first = AsymmetricPair<Scalar>(mid, config.groups, config.normalize, rng);
  const std::array<int, 3> ascending{3, 5, 7};
  for (std::size_t k = 0; k < 3; ++k) {
    down_rest[k] = StackedDilatedConv<Scalar>(mid, ascending[k], config.groups, config.normalize, rng);
  }
  for (std::size_t k = 0; k < 3; ++k) {
    up_first[k] = StackedDilatedConv<Scalar>(mid, ascending[2 - k], config.groups, config.normalize, rng);
  }
  up_last = AsymmetricPair<Scalar>(mid, config.groups, config.normalize, rng);
  fuse = Conv2d<Scalar>::same(2 * mid, config.out_channels, 3, rng);
  if (config.outer_shortcut) shortcut = Conv2d<Scalar>::same(config.in_channels, config.out_channels, 1, rng);
}

template <typename Scalar>
typename Dmfe<Scalar>::Branches Dmfe<Scalar>::forward_branches(const Var<Scalar>& x) const {
  if (x.value().rank() != 4 || x.dim(1) != config_.in_channels) {
    throw ShapeError("dmfe: expected " + std::to_string(config_.in_channels) + " input channels, got " +
                     shape_str(x.shape()));
  }
  if (!config_.allow_small_input && (x.dim(2) < 8 || x.dim(3) < 8)) {
    throw ShapeError("dmfe: spatial size " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                     " is below the 8x8 minimum");
  }
  Branches b;
  b.reduced = reduce(x);
  b.down[0] = down_first(b.reduced);
  for (std::size_t k = 1; k < 4; ++k) b.down[k] = down_rest[k - 1](b.reduced + b.down[k - 1]);
  b.up[0] = up_first[0](b.reduced);
  for (std::size_t k = 1; k < 3; ++k) b.up[k] = up_first[k](b.reduced + b.up[k - 1]);
  b.up[3] = up_last(b.reduced + b.up[2]);

  const Var<Scalar> down_sum = b.down[0] + b.down[1] + b.down[2] + b.down[3];
  const Var<Scalar> up_sum = b.up[0] + b.up[1] + b.up[2] + b.up[3];
  b.output = fuse(concat<Scalar>({down_sum, up_sum}, 1));
  if (config_.outer_shortcut) b.output = b.output + shortcut(x);
  return b;
}

template <typename Scalar>
void Dmfe<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  reduce.for_each_parameter(join_name(prefix, "reduce"), fn);
  down_first.for_each_parameter(join_name(prefix, "down0"), fn);
  for (std::size_t k = 0; k < 3; ++k) down_rest[k].for_each_parameter(join_name(prefix, "down" + std::to_string(k + 1)), fn);
  for (std::size_t k = 0; k < 3; ++k) up_first[k].for_each_parameter(join_name(prefix, "up" + std::to_string(k)), fn);
  up_last.for_each_parameter(join_name(prefix, "up3"), fn);
  fuse.for_each_parameter(join_name(prefix, "fuse"), fn);
  if (config_.outer_shortcut) shortcut.for_each_parameter(join_name(prefix, "shortcut"), fn);
}

template <typename Scalar>
PlainConvBlock<Scalar>::PlainConvBlock(int in_channels_, int out_channels, int groups, Rng& rng)
    : in_channels(in_channels_), block(in_channels_, out_channels, 3, 3, 1, groups, true, rng) {}

template <typename Scalar>
Var<Scalar> PlainConvBlock<Scalar>::operator()(const Var<Scalar>& x) const {
  if (x.value().rank() != 4 || x.dim(1) != in_channels) {
    throw ShapeError("plain block: expected " + std::to_string(in_channels) + " input channels, got " +
                     shape_str(x.shape()));
  }
  return block(x);
}

template <typename Scalar>
ContextBlock<Scalar>::ContextBlock(const DmfeConfig& config, bool use_dmfe, Rng& rng)
    : impl_(use_dmfe ? decltype(impl_)(Dmfe<Scalar>(config, rng))
                     : decltype(impl_)(PlainConvBlock<Scalar>(config.in_channels, config.out_channels, config.groups, rng))) {}

template <typename Scalar>
Var<Scalar> ContextBlock<Scalar>::operator()(const Var<Scalar>& x) const {
  return std::visit([&](const auto& m) { return m(x); }, impl_);
}

template <typename Scalar>
void ContextBlock<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  std::visit([&](auto& m) { m.for_each_parameter(prefix, fn); }, impl_);
}

template class ConvNormAct<float>;
template class ConvNormAct<double>;
template class AsymmetricPair<float>;
template class AsymmetricPair<double>;
template class StackedDilatedConv<float>;
template class StackedDilatedConv<double>;
template class Dmfe<float>;
template class Dmfe<double>;
template class PlainConvBlock<float>;
template class PlainConvBlock<double>;
template class ContextBlock<float>;
template class ContextBlock<double>;

}  // namespace maskdiff

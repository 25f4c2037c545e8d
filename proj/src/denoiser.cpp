// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/denoiser.hpp"

#include <stdexcept>
#include <string>

namespace maskdiff {

template <typename Scalar>
AdaGnConv<Scalar>::AdaGnConv(int in_channels, int out_channels, int kernel, int stride, int groups_, int time_dim,
                             Rng& rng)
    : groups(groups_), film(time_dim, 2 * out_channels, rng) {
  Conv2dOptions opt;
  opt.stride = stride;
  opt.pad_h = opt.pad_w = kernel / 2;
  conv = Conv2d<Scalar>(in_channels, out_channels, kernel, kernel, opt, rng);
  if (out_channels % groups != 0) throw std::invalid_argument("AdaGnConv: channels not divisible by groups");
}

template <typename Scalar>
Var<Scalar> AdaGnConv<Scalar>::operator()(const Var<Scalar>& x, const Var<Scalar>& time_features) const {
  const Var<Scalar> h = conv(x);
  const Index c = h.dim(1);
  const Var<Scalar> ss = film(time_features);
  return silu(modulate(group_norm(h, groups), slice(ss, 1, 0, c), slice(ss, 1, c, c)));
}

template <typename Scalar>
void AdaGnConv<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  conv.for_each_parameter(join_name(prefix, "conv"), fn);
  film.for_each_parameter(join_name(prefix, "film"), fn);
}

template <typename Scalar>
MaskDecoder<Scalar>::MaskDecoder(const DenoiserConfig& config, int input_channels, Conditioning conditioning_, Rng& rng)
    : conditioning(conditioning_) {
  const auto& ch = config.channels;
  for (int i = 3; i >= 0; --i) {
    const auto ui = static_cast<std::size_t>(i);
    int in = ch[ui];
    if (i < 3) in += ch[ui + 1];
    const bool has_cond = conditioning == Conditioning::semantic || i == 0;
    if (has_cond) in += config.cond_channels;
    fuse[ui] = Conv2d<Scalar>::same(in, ch[ui], 1, rng);
    blocks[ui] = AdaGnResidual<Scalar>(ch[ui], config.groups, config.time_dim, rng);
  }
  tail_half = AdaGnConv<Scalar>(ch[0] + config.stem_channels, config.head_channels, 3, 1, config.groups,
                                config.time_dim, rng);
  tail_full = AdaGnConv<Scalar>(config.head_channels + input_channels, config.head_channels, 3, 1, config.groups,
                                config.time_dim, rng);
  head = Conv2d<Scalar>::same(config.head_channels, 1, 1, rng);
}

template <typename Scalar>
Var<Scalar> MaskDecoder<Scalar>::operator()(const EncoderFeatures<Scalar>& enc, const ConditionSet<Scalar>& conds,
                                            const Var<Scalar>& time_features) const {
  Var<Scalar> d;
  for (int i = 3; i >= 0; --i) {
    const auto ui = static_cast<std::size_t>(i);
    const Var<Scalar>& skip = enc.levels[ui];
    std::vector<Var<Scalar>> parts;
    if (i < 3) parts.push_back(resize_bilinear(d, skip.dim(2), skip.dim(3)));
    parts.push_back(skip);
    if (conditioning == Conditioning::semantic) {
      parts.push_back(conds.semantic[ui]);
    } else if (i == 0) {
      parts.push_back(conds.edge_feature);
    }
    d = blocks[ui](fuse[ui](concat(parts, 1)), time_features);
  }
  const Var<Scalar>& stem = enc.stem;
  d = tail_half(concat<Scalar>({resize_bilinear(d, stem.dim(2), stem.dim(3)), stem}, 1), time_features);
  const Var<Scalar>& in = enc.input;
  d = tail_full(concat<Scalar>({resize_bilinear(d, in.dim(2), in.dim(3)), in}, 1), time_features);
  return head(d);
}

template <typename Scalar>
void MaskDecoder<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  for (std::size_t i = 0; i < 4; ++i) {
    fuse[i].for_each_parameter(join_name(prefix, "fuse" + std::to_string(i)), fn);
    blocks[i].for_each_parameter(join_name(prefix, "block" + std::to_string(i)), fn);
  }
  tail_half.for_each_parameter(join_name(prefix, "tail_half"), fn);
  tail_full.for_each_parameter(join_name(prefix, "tail_full"), fn);
  head.for_each_parameter(join_name(prefix, "head"), fn);
}

template <typename Scalar>
Denoiser<Scalar>::Denoiser(const DenoiserConfig& config, Rng& rng) : config_(config) {
  const int in = config.concat_image ? 4 : 1;
  const auto& ch = config.channels;
  time = TimeEmbedding<Scalar>(config.time_sinusoid_dim, config.time_dim, rng);
  stem = AdaGnConv<Scalar>(in, config.stem_channels, 3, 2, config.groups, config.time_dim, rng);
  int prev = config.stem_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    down[i] = AdaGnConv<Scalar>(prev, ch[i], 3, 2, config.groups, config.time_dim, rng);
    encoder_blocks[i] = AdaGnResidual<Scalar>(ch[i], config.groups, config.time_dim, rng);
    prev = ch[i];
  }
  using Conditioning = typename MaskDecoder<Scalar>::Conditioning;
  mask_decoder = MaskDecoder<Scalar>(config, in, Conditioning::semantic, rng);
  edge_decoder = MaskDecoder<Scalar>(config, in, Conditioning::edge, rng);
}

template <typename Scalar>
DenoiseOutput<Scalar> Denoiser<Scalar>::operator()(const Var<Scalar>& x_t, const ConditionSet<Scalar>& conds,
                                                   const std::vector<int>& t, const Var<Scalar>& image,
                                                   bool with_edge) const {
  if (x_t.value().rank() != 4 || x_t.dim(1) != 1) {
    throw ShapeError("denoiser: x_t must be [N, 1, H, W], got " + shape_str(x_t.shape()));
  }
  const Index n = x_t.dim(0), h = x_t.dim(2), w = x_t.dim(3);
  if (h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0) {
    throw ShapeError("denoiser: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible by 32");
  }
  if (static_cast<Index>(t.size()) != n) throw std::invalid_argument("denoiser: need one timestep per sample");
  for (int ti : t) {
    if (ti < 1 || ti > config_.max_timestep) {
      throw std::out_of_range("denoiser: timestep " + std::to_string(ti) + " outside [1, " +
                              std::to_string(config_.max_timestep) + "]");
    }
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const Index stride = Index(4) << i;
    const Shape expect{n, config_.cond_channels, h / stride, w / stride};
    if (conds.semantic[i].shape() != expect) {
      throw ShapeError("denoiser: semantic condition " + std::to_string(i) + " is " +
                       shape_str(conds.semantic[i].shape()) + ", expected " + shape_str(expect));
    }
  }
  const Shape edge_expect{n, config_.cond_channels, h / 4, w / 4};
  if (conds.edge_feature.shape() != edge_expect) {
    throw ShapeError("denoiser: edge condition is " + shape_str(conds.edge_feature.shape()) + ", expected " +
                     shape_str(edge_expect));
  }

  EncoderFeatures<Scalar> enc;
  if (config_.concat_image) {
    if (!image.defined() || image.shape() != Shape{n, 3, h, w}) {
      throw ShapeError("denoiser: concat_image requires an image of matching size");
    }
    enc.input = concat<Scalar>({x_t, add_scalar(scale(image, Scalar(2)), Scalar(-1))}, 1);
  } else {
    enc.input = x_t;
  }
  const Var<Scalar> temb = silu(time(t));
  enc.stem = stem(enc.input, temb);
  Var<Scalar> e = enc.stem;
  for (std::size_t i = 0; i < 4; ++i) {
    e = encoder_blocks[i](down[i](e, temb), temb);
    enc.levels[i] = e;
  }
  DenoiseOutput<Scalar> out;
  out.mask_logits = mask_decoder(enc, conds, temb);
  if (with_edge) out.edge_logits = edge_decoder(enc, conds, temb);
  return out;
}

template <typename Scalar>
void Denoiser<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  time.for_each_parameter(join_name(prefix, "time"), fn);
  stem.for_each_parameter(join_name(prefix, "stem"), fn);
  for (std::size_t i = 0; i < 4; ++i) {
    down[i].for_each_parameter(join_name(prefix, "down" + std::to_string(i)), fn);
    encoder_blocks[i].for_each_parameter(join_name(prefix, "enc" + std::to_string(i)), fn);
  }
  mask_decoder.for_each_parameter(join_name(prefix, "mask_decoder"), fn);
  edge_decoder.for_each_parameter(join_name(prefix, "edge_decoder"), fn);
}

template <typename Scalar>
Tensor<Scalar> logits_to_x0hat(const Tensor<Scalar>& mask_logits) {
  Tensor<Scalar> out(mask_logits.shape());
  for (Index i = 0; i < out.size(); ++i) {
    const Scalar x = mask_logits[i];
    // 2 * logistic(x) - 1 == tanh(x / 2), which keeps full precision near saturation.
    out[i] = std::tanh(x / Scalar(2));
  }
  return out;
}

template class AdaGnConv<float>;
template class AdaGnConv<double>;
template class MaskDecoder<float>;
template class MaskDecoder<double>;
template class Denoiser<float>;
template class Denoiser<double>;
template Tensor<float> logits_to_x0hat<float>(const Tensor<float>&);
template Tensor<double> logits_to_x0hat<double>(const Tensor<double>&);

}  // namespace maskdiff

// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/backbone.hpp"

#include <stdexcept>
#include <string>

namespace maskdiff {

template <typename Scalar>
ReducedAttention<Scalar>::ReducedAttention(int dim, int heads_, int sr_ratio_, Rng& rng)
    : heads(heads_),
      sr_ratio(sr_ratio_),
      query(dim, dim, rng),
      key_value(dim, 2 * dim, rng),
      proj(dim, dim, rng) {
  if (dim % heads != 0) throw std::invalid_argument("ReducedAttention: dim not divisible by heads");
  if (sr_ratio > 1) {
    Conv2dOptions opt;
    opt.stride = sr_ratio;
    reduce = Conv2d<Scalar>(dim, dim, sr_ratio, sr_ratio, opt, rng);
    reduce_norm = LayerNorm<Scalar>(dim);
  }
}

template <typename Scalar>
Var<Scalar> ReducedAttention<Scalar>::operator()(const Var<Scalar>& tokens, Index prefix, Index h, Index w) const {
  const Index c = tokens.dim(2);
  const Var<Scalar> q = query(tokens);
  Var<Scalar> kv_source = tokens;
  if (sr_ratio > 1) {
    const Var<Scalar> spatial = prefix > 0 ? slice(tokens, 1, prefix, h * w) : tokens;
    Var<Scalar> reduced = reduce_norm(map_to_tokens(reduce(tokens_to_map(spatial, h, w))));
    kv_source = prefix > 0 ? concat<Scalar>({slice(tokens, 1, 0, prefix), reduced}, 1) : reduced;
  }
  const Var<Scalar> kv = key_value(kv_source);
  const Var<Scalar> out = attention(q, slice(kv, 2, 0, c), slice(kv, 2, c, c), heads);
  return proj(out);
}

template <typename Scalar>
void ReducedAttention<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  query.for_each_parameter(join_name(prefix, "q"), fn);
  key_value.for_each_parameter(join_name(prefix, "kv"), fn);
  proj.for_each_parameter(join_name(prefix, "proj"), fn);
  if (sr_ratio > 1) {
    reduce.for_each_parameter(join_name(prefix, "sr"), fn);
    reduce_norm.for_each_parameter(join_name(prefix, "sr_norm"), fn);
  }
}

template <typename Scalar>
TransformerBlock<Scalar>::TransformerBlock(int dim, int heads, int sr_ratio, int mlp_ratio, Rng& rng)
    : norm1(dim),
      attn(dim, heads, sr_ratio, rng),
      norm2(dim),
      fc1(dim, dim * mlp_ratio, rng),
      fc2(dim * mlp_ratio, dim, rng) {}

template <typename Scalar>
Var<Scalar> TransformerBlock<Scalar>::operator()(const Var<Scalar>& tokens, Index prefix, Index h, Index w) const {
  Var<Scalar> x = tokens + attn(norm1(tokens), prefix, h, w);
  return x + fc2(gelu(fc1(norm2(x))));
}

template <typename Scalar>
void TransformerBlock<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  norm1.for_each_parameter(join_name(prefix, "norm1"), fn);
  attn.for_each_parameter(join_name(prefix, "attn"), fn);
  norm2.for_each_parameter(join_name(prefix, "norm2"), fn);
  fc1.for_each_parameter(join_name(prefix, "mlp.fc1"), fn);
  fc2.for_each_parameter(join_name(prefix, "mlp.fc2"), fn);
}

template <typename Scalar>
PyramidStage<Scalar>::PyramidStage(int in_channels, int out_channels, int patch_kernel, int patch_stride, int n_blocks,
                                   int heads, int sr_ratio, int mlp_ratio, int time_sinusoid_dim, Rng& rng)
    : patch_norm(out_channels), time(time_sinusoid_dim, out_channels, rng), out_norm(out_channels) {
  Conv2dOptions opt;
  opt.stride = patch_stride;
  opt.pad_h = opt.pad_w = patch_kernel / 2;
  patch_embed = Conv2d<Scalar>(in_channels, out_channels, patch_kernel, patch_kernel, opt, rng);
  for (int b = 0; b < n_blocks; ++b) blocks.emplace_back(out_channels, heads, sr_ratio, mlp_ratio, rng);
}

template <typename Scalar>
Var<Scalar> PyramidStage<Scalar>::operator()(const Var<Scalar>& x, const std::vector<int>& t,
                                             bool use_time_token) const {
  const Var<Scalar> merged = patch_embed(x);
  const Index n = merged.dim(0), c = merged.dim(1), h = merged.dim(2), w = merged.dim(3);
  Var<Scalar> tokens = patch_norm(map_to_tokens(merged));
  Index prefix = 0;
  if (use_time_token) {
    tokens = concat<Scalar>({reshape(time(t), Shape{n, 1, c}), tokens}, 1);
    prefix = 1;
  }
  for (const auto& block : blocks) tokens = block(tokens, prefix, h, w);
  if (prefix > 0) tokens = slice(tokens, 1, prefix, h * w);
  return tokens_to_map(out_norm(tokens), h, w);
}

template <typename Scalar>
void PyramidStage<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  patch_embed.for_each_parameter(join_name(prefix, "patch_embed"), fn);
  patch_norm.for_each_parameter(join_name(prefix, "patch_norm"), fn);
  time.for_each_parameter(join_name(prefix, "time"), fn);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    blocks[b].for_each_parameter(join_name(prefix, "block" + std::to_string(b)), fn);
  }
  out_norm.for_each_parameter(join_name(prefix, "norm"), fn);
}

template <typename Scalar>
PyramidBackbone<Scalar>::PyramidBackbone(const BackboneConfig& config, Rng& rng) : config_(config) {
  int in = config.in_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    const bool first = s == 0;
    stages_[s] = PyramidStage<Scalar>(in, config.channels[s], first ? 7 : 3, first ? 4 : 2, config.blocks_per_stage,
                                      config.heads[s], config.sr_ratios[s], config.mlp_ratio,
                                      config.time_sinusoid_dim, rng);
    in = config.channels[s];
  }
}

template <typename Scalar>
FeaturePyramid<Scalar> PyramidBackbone<Scalar>::operator()(const Var<Scalar>& image, const Var<Scalar>& x_t,
                                                           const std::vector<int>& t) const {
  if (image.value().rank() != 4 || image.dim(1) != 3) {
    throw ShapeError("backbone: image must be [N, 3, H, W], got " + shape_str(image.shape()));
  }
  if (x_t.value().rank() != 4 || x_t.dim(1) != 1 || x_t.dim(0) != image.dim(0)) {
    throw ShapeError("backbone: x_t must be [N, 1, H, W], got " + shape_str(x_t.shape()));
  }
  const Index n = image.dim(0), h = image.dim(2), w = image.dim(3);
  if (h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0) {
    throw ShapeError("backbone: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible by 32");
  }
  if (static_cast<Index>(t.size()) != n) throw std::invalid_argument("backbone: need one timestep per sample");
  if (!image.value().all_finite() || !x_t.value().all_finite()) {
    throw std::invalid_argument("backbone: non-finite input");
  }
  const Var<Scalar> mask = (x_t.dim(2) == h && x_t.dim(3) == w) ? x_t : resize_bilinear(x_t, h, w);
  const Var<Scalar> centered = add_scalar(scale(image, Scalar(2)), Scalar(-1));
  Var<Scalar> x = concat<Scalar>({centered, mask}, 1);
  if (x.dim(1) != config_.in_channels) throw ShapeError("backbone: input channel count does not match config");

  FeaturePyramid<Scalar> pyramid;
  for (std::size_t s = 0; s < 4; ++s) {
    x = stages_[s](x, t, config_.time_token);
    pyramid.levels[s] = x;
  }
  return pyramid;
}

template <typename Scalar>
void PyramidBackbone<Scalar>::for_each_parameter(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  for (std::size_t s = 0; s < 4; ++s) stages_[s].for_each_parameter(join_name(prefix, "stage" + std::to_string(s)), fn);
}

template class ReducedAttention<float>;
template class ReducedAttention<double>;
template class TransformerBlock<float>;
template class TransformerBlock<double>;
template class PyramidStage<float>;
template class PyramidStage<double>;
template class PyramidBackbone<float>;
template class PyramidBackbone<double>;

}  // namespace maskdiff

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/autodiff.hpp"

#include <vector>

namespace maskdiff {

struct Conv2dOptions {
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;
  int dilation_h = 1;
  int dilation_w = 1;
};

// Elementwise arithmetic. Shapes must match exactly.
template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> scale(const Var<Scalar>& a, Scalar s);
template <typename Scalar> Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s);

template <typename Scalar> Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar> Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar> Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return mul(a, b); }
template <typename Scalar> Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) { return scale(a, s); }

/// Sum of all elements, shape [1].
template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> mean(const Var<Scalar>& a);

// Activations.
template <typename Scalar> Var<Scalar> silu(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> gelu(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> sigmoid(const Var<Scalar>& a);

/// 2-D convolution. x: [N, Cin, H, W], weight: [Cout, Cin, kh, kw], bias: [Cout] or undefined.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   const Conv2dOptions& opt);

/// Group normalization without affine parameters over [N, C, H, W].
template <typename Scalar> Var<Scalar> group_norm(const Var<Scalar>& x, int groups, Scalar eps = Scalar(1e-5));

/// y = x * gamma[c] + beta[c] for NCHW input.
template <typename Scalar>
Var<Scalar> channel_affine(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta);

/// y = x * (1 + scale[n, c]) + shift[n, c] for NCHW input, scale/shift [N, C].
template <typename Scalar>
Var<Scalar> modulate(const Var<Scalar>& x, const Var<Scalar>& scale, const Var<Scalar>& shift);

/// Affine map over the last axis. x: [..., Cin], weight: [Cout, Cin], bias: [Cout] or undefined.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias);

/// Layer normalization over the last axis with affine gamma/beta [C].
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Scalar eps = Scalar(1e-6));

/// Multi-head scaled dot-product attention. q: [N, Lq, C], k, v: [N, Lk, C].
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, int heads);

template <typename Scalar> Var<Scalar> concat(const std::vector<Var<Scalar>>& xs, int axis);
template <typename Scalar> Var<Scalar> slice(const Var<Scalar>& x, int axis, Index start, Index length);
template <typename Scalar> Var<Scalar> reshape(const Var<Scalar>& x, Shape shape);

/// Bilinear resize of NCHW input (half-pixel centers, edge clamped).
template <typename Scalar> Var<Scalar> resize_bilinear(const Var<Scalar>& x, Index out_h, Index out_w);

/// [N, C, H, W] -> [N, H*W, C]
template <typename Scalar> Var<Scalar> map_to_tokens(const Var<Scalar>& x);
/// [N, H*W, C] -> [N, C, H, W]
template <typename Scalar> Var<Scalar> tokens_to_map(const Var<Scalar>& x, Index h, Index w);

// Forward-only helpers shared by ops and data code.
template <typename Scalar>
void bilinear_resize_plane(const Scalar* src, Index in_h, Index in_w, Scalar* dst, Index out_h, Index out_w);

}  // namespace maskdiff

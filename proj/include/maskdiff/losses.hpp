// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/denoiser.hpp"

namespace maskdiff {

struct LossWeights {
  double lambda_mask = 0.7;
  double mu_edge = 0.3;
};

inline constexpr double kProbClip = 1e-6;
inline constexpr double kDiceEps = 1e-6;
inline constexpr int kBoundaryRadius = 15;

/// Boundary-emphasis weights 1 + 5 |box_mean(gt) - gt| for a [N, 1, H, W]
/// binary mask. The box has side 2 * radius + 1 and averages over the pixels
/// that fall inside the image.
template <typename Scalar>
Tensor<Scalar> boundary_weights(const Tensor<Scalar>& gt, int radius = kBoundaryRadius);

/// Weighted BCE + weighted IoU on probabilities, averaged over the batch.
template <typename Scalar>
Scalar wbce_wiou(const Tensor<Scalar>& pred_prob, const Tensor<Scalar>& gt);

/// 1 - 2 sum(p g) / (sum(p^2) + sum(g^2) + eps), averaged over the batch.
template <typename Scalar>
Scalar dice_loss(const Tensor<Scalar>& pred_prob, const Tensor<Scalar>& gt);

/// Differentiable versions taking logits; probabilities are logistic(logits).
template <typename Scalar>
Var<Scalar> wbce_wiou_from_logits(const Var<Scalar>& logits, const Tensor<Scalar>& gt);

template <typename Scalar>
Var<Scalar> dice_from_logits(const Var<Scalar>& logits, const Tensor<Scalar>& gt);

/// lambda * wbce_wiou(mask) + mu * dice(edge). With mu == 0 the edge logits
/// are left out of the graph entirely.
template <typename Scalar>
Var<Scalar> total_loss(const DenoiseOutput<Scalar>& out, const Tensor<Scalar>& gt_mask, const Tensor<Scalar>& gt_edge,
                       const LossWeights& w);

}  // namespace maskdiff

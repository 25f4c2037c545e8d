// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace maskdiff {
namespace {

template <typename Scalar>
void check_pair(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt, const char* what, bool binary_gt) {
  if (gt.rank() != 4 || gt.dim(1) != 1) {
    throw ShapeError(std::string(what) + ": gt must be [N, 1, H, W], got " + shape_str(gt.shape()));
  }
  if (pred.shape() != gt.shape()) {
    throw ShapeError(std::string(what) + ": prediction " + shape_str(pred.shape()) + " does not match gt " +
                     shape_str(gt.shape()));
  }
  if (binary_gt) {
    for (Index i = 0; i < gt.size(); ++i) {
      if (gt[i] != Scalar(0) && gt[i] != Scalar(1)) {
        throw std::invalid_argument(std::string(what) + ": gt is not binary");
      }
    }
  }
}

template <typename Scalar>
Scalar clip_prob(Scalar p) {
  return std::clamp(p, Scalar(kProbClip), Scalar(1 - kProbClip));
}

template <typename Scalar>
Scalar logistic(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

// Mask loss of one image. p holds clipped probabilities; when dp is non-null it
// receives d(loss)/dp.
template <typename Scalar>
Scalar wbce_wiou_plane(const Scalar* p, const Scalar* g, const Scalar* w, Index count, Scalar* dp) {
  Scalar wsum = 0, bce = 0, inter = 0, uni = 0;
  for (Index i = 0; i < count; ++i) {
    wsum += w[i];
    bce -= w[i] * (g[i] * std::log(p[i]) + (1 - g[i]) * std::log(1 - p[i]));
    inter += w[i] * p[i] * g[i];
    uni += w[i] * (p[i] + g[i] - p[i] * g[i]);
  }
  const Scalar loss = bce / wsum + (Scalar(1) - inter / uni);
  if (dp != nullptr) {
    for (Index i = 0; i < count; ++i) {
      const Scalar dbce = w[i] * (-g[i] / p[i] + (1 - g[i]) / (1 - p[i])) / wsum;
      const Scalar diou = -(w[i] * g[i] * uni - inter * w[i] * (1 - g[i])) / (uni * uni);
      dp[i] = dbce + diou;
    }
  }
  return loss;
}

template <typename Scalar>
Scalar dice_plane(const Scalar* p, const Scalar* g, Index count, Scalar* dp) {
  Scalar a = 0, b = Scalar(kDiceEps);
  for (Index i = 0; i < count; ++i) {
    a += p[i] * g[i];
    b += p[i] * p[i] + g[i] * g[i];
  }
  if (dp != nullptr) {
    for (Index i = 0; i < count; ++i) dp[i] = -Scalar(2) * (g[i] * b - a * Scalar(2) * p[i]) / (b * b);
  }
  return Scalar(1) - Scalar(2) * a / b;
}

enum class Kind { mask, edge };

// Shared forward/backward over a batch of logits.
template <typename Scalar>
Var<Scalar> loss_from_logits(const Var<Scalar>& logits, const Tensor<Scalar>& gt, Kind kind) {
  const char* what = kind == Kind::mask ? "wbce_wiou" : "dice";
  check_pair(logits.value(), gt, what, kind == Kind::mask);
  const Index n = gt.dim(0);
  const Index plane = gt.size() / n;
  Tensor<Scalar> weights;
  if (kind == Kind::mask) weights = boundary_weights(gt);

  const Tensor<Scalar>& x = logits.value();
  Tensor<Scalar> prob(x.shape());
  Tensor<Scalar> local(x.shape());  // d(prob_clipped)/d(logit)
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar s = logistic(x[i]);
    prob[i] = clip_prob(s);
    local[i] = prob[i] == s ? s * (1 - s) : Scalar(0);
  }
  const bool grad = NoGradGuard::grad_enabled() && logits.requires_grad();
  Tensor<Scalar> dlogit(grad ? x.shape() : Shape{});
  Scalar total = 0;
  for (Index k = 0; k < n; ++k) {
    const Index off = k * plane;
    Scalar* dp = grad ? dlogit.data() + off : nullptr;
    if (kind == Kind::mask) {
      total += wbce_wiou_plane(prob.data() + off, gt.data() + off, weights.data() + off, plane, dp);
    } else {
      total += dice_plane(prob.data() + off, gt.data() + off, plane, dp);
    }
  }
  Tensor<Scalar> value(Shape{1});
  value[0] = total / Scalar(n);
  if (!grad) return Var<Scalar>(std::move(value));
  for (Index i = 0; i < dlogit.size(); ++i) dlogit[i] *= local[i] / Scalar(n);
  return detail::record<Scalar>(std::move(value), {logits}, [d = std::move(dlogit)](Node<Scalar>& self) {
    self.parents[0]->grad_buffer().vec() += self.grad[0] * d.vec();
  });
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> boundary_weights(const Tensor<Scalar>& gt, int radius) {
  if (gt.rank() != 4 || gt.dim(1) != 1) throw ShapeError("boundary_weights: gt must be [N, 1, H, W]");
  if (radius < 0) throw std::invalid_argument("boundary_weights: negative radius");
  const Index n = gt.dim(0), h = gt.dim(2), w = gt.dim(3);
  Tensor<Scalar> out(gt.shape());
  // Summed-area table with a zero first row and column.
  std::vector<double> sat(static_cast<std::size_t>((h + 1) * (w + 1)));
  auto at = [&](Index r, Index c) -> double& { return sat[static_cast<std::size_t>(r * (w + 1) + c)]; };
  for (Index k = 0; k < n; ++k) {
    const Scalar* g = gt.data() + k * h * w;
    for (Index r = 0; r <= h; ++r) at(r, 0) = 0;
    for (Index c = 0; c <= w; ++c) at(0, c) = 0;
    for (Index r = 0; r < h; ++r) {
      for (Index c = 0; c < w; ++c) {
        at(r + 1, c + 1) = static_cast<double>(g[r * w + c]) + at(r, c + 1) + at(r + 1, c) - at(r, c);
      }
    }
    Scalar* o = out.data() + k * h * w;
    for (Index r = 0; r < h; ++r) {
      const Index r0 = std::max<Index>(0, r - radius), r1 = std::min<Index>(h, r + radius + 1);
      for (Index c = 0; c < w; ++c) {
        const Index c0 = std::max<Index>(0, c - radius), c1 = std::min<Index>(w, c + radius + 1);
        const double box = at(r1, c1) - at(r0, c1) - at(r1, c0) + at(r0, c0);
        const double mean = box / static_cast<double>((r1 - r0) * (c1 - c0));
        o[r * w + c] = static_cast<Scalar>(1.0 + 5.0 * std::abs(mean - static_cast<double>(g[r * w + c])));
      }
    }
  }
  return out;
}

template <typename Scalar>
Scalar wbce_wiou(const Tensor<Scalar>& pred_prob, const Tensor<Scalar>& gt) {
  check_pair(pred_prob, gt, "wbce_wiou", true);
  const Index n = gt.dim(0), plane = gt.size() / n;
  const Tensor<Scalar> weights = boundary_weights(gt);
  Tensor<Scalar> p(pred_prob.shape());
  for (Index i = 0; i < p.size(); ++i) p[i] = clip_prob(pred_prob[i]);
  Scalar total = 0;
  for (Index k = 0; k < n; ++k) {
    total += wbce_wiou_plane(p.data() + k * plane, gt.data() + k * plane, weights.data() + k * plane, plane,
                             static_cast<Scalar*>(nullptr));
  }
  return total / Scalar(n);
}

template <typename Scalar>
Scalar dice_loss(const Tensor<Scalar>& pred_prob, const Tensor<Scalar>& gt) {
  check_pair(pred_prob, gt, "dice", false);
  const Index n = gt.dim(0), plane = gt.size() / n;
  Scalar total = 0;
  for (Index k = 0; k < n; ++k) {
    total += dice_plane(pred_prob.data() + k * plane, gt.data() + k * plane, plane, static_cast<Scalar*>(nullptr));
  }
  return total / Scalar(n);
}

template <typename Scalar>
Var<Scalar> wbce_wiou_from_logits(const Var<Scalar>& logits, const Tensor<Scalar>& gt) {
  return loss_from_logits(logits, gt, Kind::mask);
}

template <typename Scalar>
Var<Scalar> dice_from_logits(const Var<Scalar>& logits, const Tensor<Scalar>& gt) {
  return loss_from_logits(logits, gt, Kind::edge);
}

template <typename Scalar>
Var<Scalar> total_loss(const DenoiseOutput<Scalar>& out, const Tensor<Scalar>& gt_mask, const Tensor<Scalar>& gt_edge,
                       const LossWeights& w) {
  if (!(w.lambda_mask >= 0) || !(w.mu_edge >= 0)) {
    throw std::invalid_argument("total_loss: loss weights must be non-negative");
  }
  Var<Scalar> loss = scale(wbce_wiou_from_logits(out.mask_logits, gt_mask), static_cast<Scalar>(w.lambda_mask));
  if (w.mu_edge > 0) {
    loss = loss + scale(dice_from_logits(out.edge_logits, gt_edge), static_cast<Scalar>(w.mu_edge));
  }
  return loss;
}

#define MASKDIFF_INSTANTIATE(S)                                                                          \
  template Tensor<S> boundary_weights<S>(const Tensor<S>&, int);                                         \
  template S wbce_wiou<S>(const Tensor<S>&, const Tensor<S>&);                                           \
  template S dice_loss<S>(const Tensor<S>&, const Tensor<S>&);                                           \
  template Var<S> wbce_wiou_from_logits<S>(const Var<S>&, const Tensor<S>&);                             \
  template Var<S> dice_from_logits<S>(const Var<S>&, const Tensor<S>&);                                  \
  template Var<S> total_loss<S>(const DenoiseOutput<S>&, const Tensor<S>&, const Tensor<S>&, const LossWeights&);

MASKDIFF_INSTANTIATE(float)
MASKDIFF_INSTANTIATE(double)
#undef MASKDIFF_INSTANTIATE

}  // namespace maskdiff

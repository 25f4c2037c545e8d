// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/metrics.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace maskdiff {

template <typename Scalar>
std::optional<double> pixel_auc(const Tensor<Scalar>& prob_map, const Tensor<Scalar>& gt_mask) {
  if (prob_map.shape() != gt_mask.shape()) {
    throw ShapeError("pixel_auc: prediction " + shape_str(prob_map.shape()) + " does not match gt " +
                     shape_str(gt_mask.shape()));
  }
  const Index n = gt_mask.size();
  double positives = 0;
  for (Index i = 0; i < n; ++i) {
    if (gt_mask[i] != Scalar(0) && gt_mask[i] != Scalar(1)) throw std::invalid_argument("pixel_auc: gt is not binary");
    positives += static_cast<double>(gt_mask[i]);
  }
  const double negatives = static_cast<double>(n) - positives;
  if (positives == 0 || negatives == 0) return std::nullopt;

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index a, Index b) { return prob_map[a] < prob_map[b]; });
  double positive_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double tied_positives = 0;
    while (j < order.size() && prob_map[order[j]] == prob_map[order[i]]) {
      tied_positives += static_cast<double>(gt_mask[order[j]]);
      ++j;
    }
    // Ranks i+1 .. j share their average.
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    positive_rank_sum += tied_positives * avg_rank;
    i = j;
  }
  const double u = positive_rank_sum - positives * (positives + 1) / 2.0;
  return u / (positives * negatives);
}

AucSummary summarize_auc(const std::vector<std::optional<double>>& values) {
  AucSummary s;
  double total = 0;
  for (const auto& v : values) {
    if (v) {
      total += *v;
      ++s.defined;
    } else {
      ++s.excluded;
    }
  }
  s.mean = s.defined > 0 ? total / s.defined : std::numeric_limits<double>::quiet_NaN();
  return s;
}

template std::optional<double> pixel_auc<float>(const Tensor<float>&, const Tensor<float>&);
template std::optional<double> pixel_auc<double>(const Tensor<double>&, const Tensor<double>&);

}  // namespace maskdiff

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/tensor.hpp"

#include <optional>
#include <string>
#include <vector>

namespace maskdiff {

/// ROC AUC of per-pixel scores against a binary mask, computed as the
/// Mann-Whitney statistic with average ranks for ties. Returns nullopt when
/// the mask has a single class.
template <typename Scalar>
std::optional<double> pixel_auc(const Tensor<Scalar>& prob_map, const Tensor<Scalar>& gt_mask);

/// Mean of the defined entries and the number of undefined ones.
struct AucSummary {
  double mean = 0;  // NaN when no entry is defined
  int defined = 0;
  int excluded = 0;
};
AucSummary summarize_auc(const std::vector<std::optional<double>>& values);

}  // namespace maskdiff

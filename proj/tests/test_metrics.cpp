// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/metrics.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace maskdiff;

using test::threshold_sweep_auc;

TEST_CASE("perfect and uninformative maps") {
  const auto gt = test::binary_tensor<double>({1, 1, 16, 16}, 1);
  CHECK(*pixel_auc(gt, gt) == 1.0);
  CHECK(*pixel_auc(Tensor<double>(gt.shape(), 0.5), gt) == 0.5);
  Tensor<double> inverted(gt.shape());
  inverted.array() = 1 - gt.array();
  CHECK(*pixel_auc(inverted, gt) == 0.0);
}

TEST_CASE("single-class gt is undefined") {
  CHECK_FALSE(pixel_auc(Tensor<double>({1, 1, 4, 4}, 0.3), Tensor<double>({1, 1, 4, 4})).has_value());
  CHECK_FALSE(pixel_auc(Tensor<double>({1, 1, 4, 4}, 0.3), Tensor<double>({1, 1, 4, 4}, 1.0)).has_value());
}

TEST_CASE("argument checks") {
  CHECK_THROWS_AS(pixel_auc(Tensor<double>({1, 1, 4, 4}), Tensor<double>({1, 1, 4, 5})), ShapeError);
  Tensor<double> bad({1, 1, 4, 4});
  bad[0] = 2;
  CHECK_THROWS(pixel_auc(Tensor<double>({1, 1, 4, 4}), bad));
}

TEST_CASE("rank statistic equals the threshold sweep on 200 random instances") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const auto seed = static_cast<std::uint64_t>(1000 + trial);
    const auto gt = test::binary_tensor<double>({1, 1, 16, 16}, seed, 0.05 + 0.9 * (trial % 10) / 10.0);
    auto score = test::uniform_tensor<double>({1, 1, 16, 16}, seed + 7, 0, 1);
    // Every third instance is quantised so that ties are common.
    if (trial % 3 == 0) score.array() = (score.array() * 6).floor() / 6;
    // Make scores informative for some instances.
    if (trial % 2 == 0) score.array() = (score.array() + 0.5 * gt.array()) / 1.5;
    const auto auc = pixel_auc(score, gt);
    if (gt.vec().sum() == 0 || gt.vec().sum() == gt.size()) {
      CHECK_FALSE(auc.has_value());
      continue;
    }
    REQUIRE(auc.has_value());
    CHECK(std::abs(*auc - threshold_sweep_auc(score, gt)) < 1e-9);
  }
}

TEST_CASE("invariant under strictly increasing transforms") {
  const auto gt = test::binary_tensor<double>({1, 1, 16, 16}, 3, 0.3);
  auto score = test::uniform_tensor<double>({1, 1, 16, 16}, 4, 0, 1);
  score.array() = (score.array() * 5).floor() / 5 + 0.3 * gt.array();
  Tensor<double> warped(score.shape());
  warped.array() = (3 * score.array()).exp() - 7;
  CHECK(*pixel_auc(score, gt) == *pixel_auc(warped, gt));
  CHECK(*pixel_auc(score.cast<float>(), gt.cast<float>()) == doctest::Approx(*pixel_auc(score, gt)));
}

TEST_CASE("summaries exclude undefined entries") {
  const AucSummary s = summarize_auc({0.5, std::nullopt, 1.0, std::nullopt, 0.75});
  CHECK(s.mean == doctest::Approx(0.75));
  CHECK(s.defined == 3);
  CHECK(s.excluded == 2);
  const AucSummary none = summarize_auc({std::nullopt});
  CHECK(none.defined == 0);
  CHECK(none.excluded == 1);
  CHECK(std::isnan(none.mean));
}

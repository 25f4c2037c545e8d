// SPDX-License-Identifier: Apache-2.0
//
// Small helpers shared by the unit tests: seeded random tensors and a central
// finite-difference gradient check.
#pragma once

#include "maskdiff/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace maskdiff::test {

template <typename Scalar>
Tensor<Scalar> uniform_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
Tensor<Scalar> binary_tensor(Shape shape, std::uint64_t seed, double p = 0.5) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(p);
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = coin(rng) ? Scalar(1) : Scalar(0);
  return t;
}

struct GradCheck {
  double max_rel = 0;
  int checked = 0;
  int failed = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor) between analytic and numeric
// derivatives; the floor keeps near-zero entries from dominating.
inline double rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares d(loss)/d(param[i]) from backward() with a central difference at
// `indices`. `loss` must rebuild the graph from the current parameter values.
inline GradCheck check_gradient(Var<double>& param, const std::vector<Index>& indices,
                                const std::function<Var<double>()>& loss, double tol, double h = 1e-5,
                                double floor = 1e-6) {
  param.zero_grad();
  backward(loss());
  const Tensor<double> analytic = param.has_grad() ? param.grad() : Tensor<double>::zeros(param.shape());
  GradCheck out;
  for (Index i : indices) {
    double& v = param.mutable_value()[i];
    const double keep = v;
    v = keep + h;
    const double up = loss().value()[0];
    v = keep - h;
    const double down = loss().value()[0];
    v = keep;
    const double numeric = (up - down) / (2 * h);
    const double rel = rel_error(analytic[i], numeric, floor);
    out.max_rel = std::max(out.max_rel, rel);
    ++out.checked;
    if (rel >= tol) ++out.failed;
  }
  return out;
}

inline std::vector<Index> sample_indices(Index n, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> pick(0, n - 1);
  std::vector<Index> idx;
  for (int i = 0; i < count; ++i) idx.push_back(pick(rng));
  return idx;
}

}  // namespace maskdiff::test

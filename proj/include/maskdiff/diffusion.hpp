// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/tensor.hpp"

#include <cmath>
#include <vector>

namespace maskdiff {

/// -2 ln 6: the default additive shift of the log-SNR curve.
inline const double kDefaultSnrShift = -2.0 * std::log(6.0);

/// Cosine log-SNR curve: -2 ln tan(pi u / 2), u in [0, 1], clamped to
/// [-kLogSnrClamp, kLogSnrClamp] so the endpoints stay finite.
double cosine_log_snr(double u);

/// Precomputed noise schedule. alpha_bar(0) == 1 by convention; the remaining
/// sequences are indexed 1..T_train.
class DiffusionSchedule {
 public:
  static constexpr double kLogSnrClamp = 15.0;

  DiffusionSchedule(int T_train, double snr_shift);

  int T_train() const { return T_train_; }
  double snr_shift() const { return snr_shift_; }

  double alpha_bar(int t) const;
  double beta(int t) const;
  double alpha(int t) const { return 1.0 - beta(t); }
  double posterior_var(int t) const;
  /// Shifted log-SNR at t >= 1, i.e. log(alpha_bar / (1 - alpha_bar)).
  double log_snr(int t) const;

  const std::vector<double>& alpha_bar_table() const { return alpha_bar_; }
  const std::vector<double>& beta_table() const { return beta_; }
  const std::vector<double>& posterior_var_table() const { return posterior_var_; }

 private:
  void check_t(int t, int lo) const;

  int T_train_;
  double snr_shift_;
  std::vector<double> log_snr_;        // index 0 unused
  std::vector<double> alpha_bar_;      // 0..T
  std::vector<double> beta_;           // index 0 unused
  std::vector<double> posterior_var_;  // index 0 unused
};

inline DiffusionSchedule build_schedule(int T_train, double snr_shift) { return DiffusionSchedule(T_train, snr_shift); }

/// Mean coefficients and variance of the reverse transition t -> t_prev
/// (t_prev < t; t_prev = t - 1 for adjacent steps).
struct PosteriorCoefficients {
  double coef_xt;
  double coef_x0;
  double variance;
};

PosteriorCoefficients posterior_coefficients(const DiffusionSchedule& sched, int t, int t_prev);

/// Strictly decreasing timesteps round(linspace(T_train, 1, T_sample)).
std::vector<int> make_sampling_subsequence(int T_train, int T_sample);

template <typename Scalar>
struct NoisyMask {
  Tensor<Scalar> values;
  int t = 0;
};

/// Affine mask encoding x0 = 2 M - 1; M must be binary.
template <typename Scalar>
NoisyMask<Scalar> encode_mask(const Tensor<Scalar>& binary_mask);

/// Closed-form q(x_t | x_0) sample.
template <typename Scalar>
NoisyMask<Scalar> add_noise(const NoisyMask<Scalar>& x0, int t, const Tensor<Scalar>& noise,
                            const DiffusionSchedule& sched);

/// Reverse transition x_t -> x_{t_prev} given an x0 estimate (clamped to
/// [-1, 1]) and standard-normal z. An empty z means z = 0. Returns the clamped
/// x0 estimate exactly when t_prev == 0.
template <typename Scalar>
NoisyMask<Scalar> posterior_step(const NoisyMask<Scalar>& x_t, const Tensor<Scalar>& x0_hat, int t_prev,
                                 const Tensor<Scalar>& z, const DiffusionSchedule& sched);

/// Adjacent-step form (t_prev = t - 1).
template <typename Scalar>
NoisyMask<Scalar> posterior_step(const NoisyMask<Scalar>& x_t, const Tensor<Scalar>& x0_hat, const Tensor<Scalar>& z,
                                 const DiffusionSchedule& sched) {
  return posterior_step(x_t, x0_hat, x_t.t - 1, z, sched);
}

/// Deterministic (eta = 0) implicit step x_t -> x_{t_prev}.
template <typename Scalar>
NoisyMask<Scalar> ddim_step(const NoisyMask<Scalar>& x_t, const Tensor<Scalar>& x0_hat, int t_prev,
                            const DiffusionSchedule& sched);

}  // namespace maskdiff

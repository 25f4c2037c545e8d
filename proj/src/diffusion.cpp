// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/diffusion.hpp"

#include <algorithm>
#include <numbers>
#include <stdexcept>
#include <string>

namespace maskdiff {

namespace {

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename Scalar>
Tensor<Scalar> clamp_unit(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.array() = x.array().max(Scalar(-1)).min(Scalar(1));
  return out;
}

}  // namespace

double cosine_log_snr(double u) {
  if (!(u >= 0.0 && u <= 1.0)) throw std::invalid_argument("cosine_log_snr: u outside [0, 1]");
  const double c = DiffusionSchedule::kLogSnrClamp;
  if (u == 0.0) return c;
  if (u == 1.0) return -c;
  const double v = -2.0 * std::log(std::tan(std::numbers::pi * u / 2.0));
  return std::clamp(v, -c, c);
}

DiffusionSchedule::DiffusionSchedule(int T_train, double snr_shift) : T_train_(T_train), snr_shift_(snr_shift) {
  if (T_train < 2) throw std::invalid_argument("build_schedule: T_train must be >= 2, got " + std::to_string(T_train));
  if (!std::isfinite(snr_shift)) throw std::invalid_argument("build_schedule: snr_shift must be finite");
  const auto n = static_cast<std::size_t>(T_train) + 1;
  log_snr_.assign(n, 0.0);
  alpha_bar_.assign(n, 1.0);
  beta_.assign(n, 0.0);
  posterior_var_.assign(n, 0.0);
  for (int t = 1; t <= T_train; ++t) {
    const auto i = static_cast<std::size_t>(t);
    // The clamp applies to the base curve so that the shifted curve stays
    // strictly monotone for any finite shift.
    log_snr_[i] = cosine_log_snr(static_cast<double>(t) / T_train) + snr_shift;
    alpha_bar_[i] = logistic(log_snr_[i]);
    beta_[i] = 1.0 - alpha_bar_[i] / alpha_bar_[i - 1];
    posterior_var_[i] = (1.0 - alpha_bar_[i - 1]) / (1.0 - alpha_bar_[i]) * beta_[i];
  }
}

void DiffusionSchedule::check_t(int t, int lo) const {
  if (t < lo || t > T_train_) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                            std::to_string(T_train_) + "]");
  }
}

double DiffusionSchedule::alpha_bar(int t) const {
  check_t(t, 0);
  return alpha_bar_[static_cast<std::size_t>(t)];
}

double DiffusionSchedule::beta(int t) const {
  check_t(t, 1);
  return beta_[static_cast<std::size_t>(t)];
}

double DiffusionSchedule::posterior_var(int t) const {
  check_t(t, 1);
  return posterior_var_[static_cast<std::size_t>(t)];
}

double DiffusionSchedule::log_snr(int t) const {
  check_t(t, 1);
  return log_snr_[static_cast<std::size_t>(t)];
}

PosteriorCoefficients posterior_coefficients(const DiffusionSchedule& sched, int t, int t_prev) {
  if (t < 1) throw std::out_of_range("posterior step requires t >= 1");
  if (t_prev < 0 || t_prev >= t) {
    throw std::out_of_range("posterior step requires 0 <= t_prev < t, got t=" + std::to_string(t) +
                            ", t_prev=" + std::to_string(t_prev));
  }
  const double ab_t = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t_prev);
  // For strided steps alpha and beta span the whole jump t_prev -> t.
  const double alpha = ab_t / ab_prev;
  const double beta = 1.0 - alpha;
  PosteriorCoefficients c{};
  c.coef_xt = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t);
  c.coef_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab_t);
  c.variance = t_prev == 0 ? 0.0 : (1.0 - ab_prev) / (1.0 - ab_t) * beta;
  if (t_prev == 0) {
    c.coef_xt = 0.0;
    c.coef_x0 = 1.0;
  }
  return c;
}

std::vector<int> make_sampling_subsequence(int T_train, int T_sample) {
  if (T_train < 1) throw std::invalid_argument("make_sampling_subsequence: T_train must be positive");
  if (T_sample < 1 || T_sample > T_train) {
    throw std::invalid_argument("make_sampling_subsequence: need 1 <= T_sample <= T_train, got T_sample=" +
                                std::to_string(T_sample) + ", T_train=" + std::to_string(T_train));
  }
  std::vector<int> steps;
  steps.reserve(static_cast<std::size_t>(T_sample));
  if (T_sample == 1) return {T_train};
  const double span = static_cast<double>(T_train - 1);
  for (int i = 0; i < T_sample; ++i) {
    const double v = T_train - span * i / (T_sample - 1);
    steps.push_back(static_cast<int>(std::lround(v)));
  }
  return steps;
}

template <typename Scalar>
NoisyMask<Scalar> encode_mask(const Tensor<Scalar>& binary_mask) {
  for (Index i = 0; i < binary_mask.size(); ++i) {
    if (binary_mask[i] != Scalar(0) && binary_mask[i] != Scalar(1)) {
      throw std::invalid_argument("encode_mask: mask is not binary");
    }
  }
  NoisyMask<Scalar> x0;
  x0.values = Tensor<Scalar>(binary_mask.shape());
  x0.values.array() = Scalar(2) * binary_mask.array() - Scalar(1);
  x0.t = 0;
  return x0;
}

template <typename Scalar>
NoisyMask<Scalar> add_noise(const NoisyMask<Scalar>& x0, int t, const Tensor<Scalar>& noise,
                            const DiffusionSchedule& sched) {
  if (x0.t != 0) throw std::invalid_argument("add_noise: input must be a clean mask (t = 0)");
  if (t < 1 || t > sched.T_train()) {
    throw std::out_of_range("add_noise: timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(sched.T_train()) + "]");
  }
  if (noise.shape() != x0.values.shape()) throw ShapeError("add_noise: noise shape mismatch");
  const double ab = sched.alpha_bar(t);
  NoisyMask<Scalar> out;
  out.values = Tensor<Scalar>(x0.values.shape());
  out.values.vec() = static_cast<Scalar>(std::sqrt(ab)) * x0.values.vec() +
                     static_cast<Scalar>(std::sqrt(1.0 - ab)) * noise.vec();
  out.t = t;
  return out;
}

template <typename Scalar>
NoisyMask<Scalar> posterior_step(const NoisyMask<Scalar>& x_t, const Tensor<Scalar>& x0_hat, int t_prev,
                                 const Tensor<Scalar>& z, const DiffusionSchedule& sched) {
  if (x_t.t < 1) throw std::out_of_range("posterior_step: t must be >= 1");
  if (x0_hat.shape() != x_t.values.shape()) throw ShapeError("posterior_step: x0_hat shape mismatch");
  if (!z.empty() && z.shape() != x_t.values.shape()) throw ShapeError("posterior_step: z shape mismatch");
  const PosteriorCoefficients c = posterior_coefficients(sched, x_t.t, t_prev);
  Tensor<Scalar> x0c = clamp_unit(x0_hat);
  NoisyMask<Scalar> out;
  out.t = t_prev;
  if (t_prev == 0) {
    out.values = std::move(x0c);
    return out;
  }
  out.values = Tensor<Scalar>(x_t.values.shape());
  out.values.vec() = static_cast<Scalar>(c.coef_xt) * x_t.values.vec() + static_cast<Scalar>(c.coef_x0) * x0c.vec();
  if (!z.empty()) out.values.vec() += static_cast<Scalar>(std::sqrt(c.variance)) * z.vec();
  return out;
}

template <typename Scalar>
NoisyMask<Scalar> ddim_step(const NoisyMask<Scalar>& x_t, const Tensor<Scalar>& x0_hat, int t_prev,
                            const DiffusionSchedule& sched) {
  if (x_t.t < 1) throw std::out_of_range("ddim_step: t must be >= 1");
  if (t_prev < 0 || t_prev >= x_t.t) throw std::out_of_range("ddim_step: t_prev must be in [0, t)");
  if (x0_hat.shape() != x_t.values.shape()) throw ShapeError("ddim_step: x0_hat shape mismatch");
  Tensor<Scalar> x0c = clamp_unit(x0_hat);
  NoisyMask<Scalar> out;
  out.t = t_prev;
  if (t_prev == 0) {
    out.values = std::move(x0c);
    return out;
  }
  const double ab_t = sched.alpha_bar(x_t.t);
  const double ab_prev = sched.alpha_bar(t_prev);
  const auto sa = static_cast<Scalar>(std::sqrt(ab_t));
  const auto sn = static_cast<Scalar>(std::sqrt(1.0 - ab_t));
  typename Tensor<Scalar>::Vector eps = (x_t.values.vec() - sa * x0c.vec()) / sn;
  out.values = Tensor<Scalar>(x_t.values.shape());
  out.values.vec() = static_cast<Scalar>(std::sqrt(ab_prev)) * x0c.vec() +
                     static_cast<Scalar>(std::sqrt(1.0 - ab_prev)) * eps;
  return out;
}

#define MASKDIFF_INSTANTIATE_DIFFUSION(S)                                                                     \
  template NoisyMask<S> encode_mask(const Tensor<S>&);                                                        \
  template NoisyMask<S> add_noise(const NoisyMask<S>&, int, const Tensor<S>&, const DiffusionSchedule&);     \
  template NoisyMask<S> posterior_step(const NoisyMask<S>&, const Tensor<S>&, int, const Tensor<S>&,         \
                                       const DiffusionSchedule&);                                             \
  template NoisyMask<S> ddim_step(const NoisyMask<S>&, const Tensor<S>&, int, const DiffusionSchedule&);

MASKDIFF_INSTANTIATE_DIFFUSION(float)
MASKDIFF_INSTANTIATE_DIFFUSION(double)

#undef MASKDIFF_INSTANTIATE_DIFFUSION

}  // namespace maskdiff

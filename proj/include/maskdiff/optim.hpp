// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/model.hpp"

namespace maskdiff {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Parameters whose gradient is empty after
/// backward (not reached by the loss) are skipped entirely, including decay.
template <typename Scalar>
class AdamW {
 public:
  struct Slot {
    Tensor<Scalar> m;
    Tensor<Scalar> v;
    long steps = 0;
  };

  AdamW(NamedParameters<Scalar> params, AdamWConfig config = {});

  void step(double lr);
  void zero_grad();

  const NamedParameters<Scalar>& parameters() const { return params_; }
  const AdamWConfig& config() const { return config_; }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  NamedParameters<Scalar> params_;
  AdamWConfig config_;
  std::vector<Slot> slots_;
};

/// Half-cosine decay from base_lr at step 0 to 0 at total_steps.
double cosine_lr(double base_lr, long step, long total_steps);

/// L2 norm over all present gradients.
template <typename Scalar>
double global_grad_norm(const NamedParameters<Scalar>& params);

/// Rescales gradients so their global norm is at most max_norm. Returns the
/// norm before clipping.
template <typename Scalar>
double clip_grad_norm(NamedParameters<Scalar>& params, double max_norm);

}  // namespace maskdiff

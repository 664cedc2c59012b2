// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "flowkit/autodiff.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace flowkit {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

/// Moment accumulators for one list of parameters.
struct OptimizerState {
  std::int64_t step = 0;
  double learning_rate = 1e-3;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
};

enum class StepStatus { ok, non_finite_gradient };

/// Adaptive-moment optimizer with bias correction:
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2,
///   p <- p - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps).
class Adam {
 public:
  Adam(std::vector<ad::Var> params, double learning_rate, AdamConfig config = {});

  /// Applies one update from the parameters' current gradients. Nothing is
  /// modified when any gradient entry is non-finite.
  StepStatus step();

  void zero_grad();

  double learning_rate() const { return state_.learning_rate; }
  void set_learning_rate(double lr);
  const OptimizerState& state() const { return state_; }
  std::span<const ad::Var> parameters() const { return params_; }

 private:
  std::vector<ad::Var> params_;
  AdamConfig config_;
  OptimizerState state_;
};

}  // namespace flowkit

// SPDX-License-Identifier: Apache-2.0
#include "flowkit/adam.hpp"

#include <cmath>

namespace flowkit {

Adam::Adam(std::vector<ad::Var> params, double learning_rate, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  set_learning_rate(learning_rate);
  for (const auto& p : params_) {
    state_.first_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
    state_.second_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void Adam::set_learning_rate(double lr) {
  require(lr > 0.0 && std::isfinite(lr), "Adam: learning rate must be positive");
  state_.learning_rate = lr;
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

StepStatus Adam::step() {
  for (const auto& p : params_) {
    if (p.has_grad() && !all_finite(p.node()->grad)) return StepStatus::non_finite_gradient;
  }
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double correction1 = 1.0 - std::pow(config_.beta1, t);
  const double correction2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    const Matrix& g = p.node()->grad;
    Matrix& m = state_.first_moment[i];
    Matrix& v = state_.second_moment[i];
    m = config_.beta1 * m + (1.0 - config_.beta1) * g;
    v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseAbs2();
    p.mutable_value().array() -=
        state_.learning_rate * (m.array() / correction1) /
        ((v.array() / correction2).sqrt() + config_.epsilon);
  }
  return StepStatus::ok;
}

}  // namespace flowkit

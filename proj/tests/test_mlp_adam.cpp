// SPDX-License-Identifier: Apache-2.0
#include "flowkit/adam.hpp"
#include "flowkit/made.hpp"
#include "flowkit/mlp.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace flowkit;
using flowkit::testing::numeric_gradient;
using flowkit::testing::random_matrix;
using flowkit::testing::relative_error;

namespace {

DenseLayer layer(Matrix w, Matrix b) {
  return {ad::Var::parameter(std::move(w)), ad::Var::parameter(std::move(b)), std::nullopt};
}

}  // namespace

TEST(Mlp, HandComputedForwardPass) {
  // x = [1, -2]; hidden relu(x W1 + b1); head linear.
  Matrix w1(2, 2), b1(1, 2), w2(2, 1), b2(1, 1);
  w1 << 1.0, -1.0,
        0.5, 2.0;
  b1 << 0.5, 0.0;
  w2 << 2.0, -3.0;
  b2 << 0.25;
  const Mlp net({layer(w1, b1)}, {layer(w2, b2)}, {Activation::linear});
  Matrix x(1, 2);
  x << 1.0, -2.0;
  // pre-activations: [1 - 1 + 0.5, -1 - 4] = [0.5, -5] -> relu [0.5, 0]
  // head: 0.5 * 2 + 0 * (-3) + 0.25 = 1.25
  const auto out = net.forward(x);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_DOUBLE_EQ(out[0](0, 0), 1.25);
}

TEST(Mlp, TanhHeadAndMultipleHeads) {
  const Mlp net(3, {8, 8}, {{2, Activation::tanh}, {4, Activation::linear}}, 7);
  const Matrix x = random_matrix(5, 3, 1, 4.0);
  const auto out = net.forward(x);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].cols(), 2);
  EXPECT_EQ(out[1].cols(), 4);
  EXPECT_LE(out[0].cwiseAbs().maxCoeff(), 1.0);
}

TEST(Mlp, MatrixAndGraphRoutesAgree) {
  const Mlp net(3, {6, 5}, {{2, Activation::tanh}}, 3);
  const Matrix x = random_matrix(4, 3, 2);
  EXPECT_EQ(net.forward(x)[0], net.forward(ad::Var::constant(x))[0].value());
}

TEST(Mlp, ParameterGradientMatchesFiniteDifferences) {
  const Mlp net(3, {6, 6, 6}, {{2, Activation::tanh}, {2, Activation::linear}}, 11);
  const Matrix x = random_matrix(7, 3, 3);
  const auto loss = [&]() {
    const auto out = net.forward(ad::Var::constant(x));
    return ad::mean(ad::square(out[0])) + ad::mean(out[1]);
  };
  ad::backward(loss());
  for (ad::Var p : net.parameters()) {
    const Matrix analytic = p.grad();
    const Matrix keep = p.value();
    const Matrix numeric = numeric_gradient(
        [&](const Matrix& v) {
          p.mutable_value() = v;
          const double l = loss().value()(0, 0);
          p.mutable_value() = keep;
          return l;
        },
        keep);
    EXPECT_LT(relative_error(analytic, numeric), 1e-6);
  }
}

TEST(Mlp, ZeroHeadInitEmitsZeros) {
  const Mlp net(4, {16, 16}, {{3, Activation::tanh}, {3, Activation::linear}}, 5, HeadInit::zero);
  const auto out = net.forward(random_matrix(10, 4, 4));
  EXPECT_EQ(out[0].norm(), 0.0);
  EXPECT_EQ(out[1].norm(), 0.0);
}

TEST(Mlp, GlorotUniformBounds) {
  Rng rng(1);
  const Matrix w = glorot_uniform(100, 50, rng);
  const double a = std::sqrt(6.0 / 150.0);
  EXPECT_LE(w.cwiseAbs().maxCoeff(), a);
  EXPECT_GT(w.cwiseAbs().maxCoeff(), 0.9 * a);
  EXPECT_NEAR(w.mean(), 0.0, 0.02);
}

TEST(Mlp, SameSeedSameWeights) {
  const Mlp a(3, {8}, {{2, Activation::linear}}, 42);
  const Mlp b(3, {8}, {{2, Activation::linear}}, 42);
  const Mlp c(3, {8}, {{2, Activation::linear}}, 43);
  const Matrix x = random_matrix(3, 3, 1);
  EXPECT_EQ(a.forward(x)[0], b.forward(x)[0]);
  EXPECT_NE(a.forward(x)[0], c.forward(x)[0]);
}

TEST(Mlp, JsonRoundTripIsExact) {
  const MadeLayout made = made_layout(3, std::vector<Index>{7, 7}, {{1, 2}}, 9);
  const Mlp net(3, {7, 7}, {{2, Activation::tanh}}, 9, HeadInit::glorot, made.masks);
  const Mlp back = Mlp::from_json(nlohmann::json::parse(net.to_json().dump()));
  const Matrix x = random_matrix(6, 3, 5);
  EXPECT_EQ(net.forward(x)[0], back.forward(x)[0]);
  ASSERT_TRUE(back.hidden_layers()[0].mask.has_value());
  EXPECT_EQ(*back.hidden_layers()[0].mask, made.masks.hidden[0]);
}

TEST(Mlp, MaskedWeightsStayInert) {
  const MadeLayout made = made_layout(3, std::vector<Index>{5}, {{1, 2}}, 2);
  const Mlp net(3, {5}, {{2, Activation::linear}}, 2, HeadInit::glorot, made.masks);
  // Output of degree 1 must not move when input 2 or 3 moves.
  Matrix x = random_matrix(1, 3, 6);
  const double before = net.forward(x)[0](0, 0);
  x(0, 1) += 10.0;
  x(0, 2) -= 7.0;
  EXPECT_EQ(net.forward(x)[0](0, 0), before);
}

TEST(Mlp, ActivationNames) {
  for (Activation a : {Activation::linear, Activation::relu, Activation::tanh}) {
    EXPECT_EQ(activation_from_string(to_string(a)), a);
  }
  EXPECT_THROW(activation_from_string("gelu"), ContractViolation);
}

// ---------------------------------------------------------------------------

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
  ad::Var p = ad::Var::parameter(Matrix::Zero(1, 3));
  Adam opt({p}, 1e-3);
  ad::backward(ad::sum(p * ad::Var::constant((Matrix(1, 3) << 2.0, -0.5, 1e-3).finished())));
  ASSERT_EQ(opt.step(), StepStatus::ok);
  // m_hat = g, v_hat = g^2, step = lr g / (|g| + eps)
  EXPECT_NEAR(p.value()(0, 0), -1e-3, 1e-9);
  EXPECT_NEAR(p.value()(0, 1), 1e-3, 1e-9);
  EXPECT_NEAR(p.value()(0, 2), -1e-3 * 1e-3 / (1e-3 + 1e-7), 1e-12);
  EXPECT_EQ(opt.state().step, 1);
}

TEST(Adam, SecondStepFollowsBiasCorrectedMoments) {
  ad::Var p = ad::Var::parameter(Matrix::Zero(1, 1));
  Adam opt({p}, 0.1);
  const double g1 = 1.0, g2 = 3.0;
  ad::backward(ad::sum(p * g1));
  opt.step();
  opt.zero_grad();
  ad::backward(ad::sum(p * g2));
  opt.step();
  const double m = 0.9 * 0.1 * g1 + 0.1 * g2;
  const double v = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
  const double m_hat = m / (1 - 0.81), v_hat = v / (1 - 0.999 * 0.999);
  const double expected = -0.1 * 1.0 / (1.0 + 1e-7) - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-7);
  EXPECT_NEAR(p.value()(0, 0), expected, 1e-12);
}

TEST(Adam, NonFiniteGradientLeavesEverythingUntouched) {
  ad::Var p = ad::Var::parameter(Matrix::Constant(1, 2, 1.0));
  Adam opt({p}, 1e-2);
  ad::backward(ad::sum(p));
  opt.step();
  const Matrix after_first = p.value();
  const OptimizerState state = opt.state();
  opt.zero_grad();
  ad::backward(ad::sum(ad::log(p - 1.0 + 0.01)));  // finite
  opt.zero_grad();
  ad::backward(ad::sum(p * std::numeric_limits<double>::infinity()));
  EXPECT_EQ(opt.step(), StepStatus::non_finite_gradient);
  EXPECT_EQ(p.value(), after_first);
  EXPECT_EQ(opt.state().step, state.step);
  EXPECT_EQ(opt.state().first_moment[0], state.first_moment[0]);
}

TEST(Adam, MinimizesAQuadratic) {
  ad::Var p = ad::Var::parameter(random_matrix(2, 2, 3, 5.0));
  const Matrix target = random_matrix(2, 2, 4);
  Adam opt({p}, 0.05);
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    ad::backward(ad::sum(ad::square(p - ad::Var::constant(target))));
    opt.step();
  }
  EXPECT_LT((p.value() - target).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Adam, LearningRateMustBePositive) {
  ad::Var p = ad::Var::parameter(Matrix::Zero(1, 1));
  Adam opt({p}, 1e-3);
  opt.set_learning_rate(5e-4);
  EXPECT_DOUBLE_EQ(opt.learning_rate(), 5e-4);
  EXPECT_THROW(opt.set_learning_rate(0.0), ContractViolation);
  EXPECT_THROW(Adam({p}, -1.0), ContractViolation);
}

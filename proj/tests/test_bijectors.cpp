// SPDX-License-Identifier: Apache-2.0
#include "flowkit/bijectors.hpp"
#include "flowkit/made.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <string>

using namespace flowkit;
using flowkit::testing::random_matrix;

namespace {

const std::vector<Index> kHidden{16, 16};

std::unique_ptr<Bijector> make(const std::string& kind, Index dim, std::uint64_t seed,
                               HeadInit init = HeadInit::glorot) {
  const SplineShape shape{6, 4.0};
  if (kind == "affine_coupling") return std::make_unique<AffineCoupling>(dim, kHidden, seed, init);
  if (kind == "masked_affine") return std::make_unique<MaskedAffine>(dim, kHidden, seed, init);
  if (kind == "spline_coupling")
    return std::make_unique<SplineCoupling>(dim, kHidden, shape, seed, init);
  return std::make_unique<SplineAutoregressive>(dim, kHidden, shape, seed, init);
}

// Adds noise to every weight so heads are far from their initial scale.
void perturb(Bijector& b, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (ad::Var p : b.parameters()) {
    for (Index i = 0; i < p.mutable_value().size(); ++i) p.mutable_value().data()[i] += scale * rng.normal();
  }
}

// J(i, j) = d y_j / d x_i of the generative map at one point.
Matrix numeric_jacobian(const Bijector& b, const Eigen::RowVectorXd& x, double h = 1e-6) {
  const Index d = x.size();
  Matrix j(d, d);
  for (Index i = 0; i < d; ++i) {
    Matrix up = x, down = x;
    up(0, i) += h;
    down(0, i) -= h;
    j.row(i) = (b.forward(up).value - b.forward(down).value) / (2 * h);
  }
  return j;
}

struct Case {
  std::string kind;
  Index dim;
};

class LayerTest : public ::testing::TestWithParam<Case> {};

std::string case_name(const ::testing::TestParamInfo<Case>& info) {
  return info.param.kind + "_D" + std::to_string(info.param.dim);
}

}  // namespace

TEST_P(LayerTest, InverseUndoesForward) {
  const auto [kind, dim] = GetParam();
  auto b = make(kind, dim, 1);
  perturb(*b, 2, 0.1);
  const Matrix x = random_matrix(500, dim, 3);
  const FlowOutput y = b->forward(x);
  const FlowOutput back = b->inverse(y.value);
  EXPECT_LT((back.value - x).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((back.log_det + y.log_det).cwiseAbs().maxCoeff(), 1e-9);
}

TEST_P(LayerTest, LogDetMatchesNumericJacobian) {
  const auto [kind, dim] = GetParam();
  auto b = make(kind, dim, 4);
  perturb(*b, 5, 0.1);
  const Matrix x = random_matrix(20, dim, 6);
  const Vector log_det = b->forward(x).log_det;
  for (Index r = 0; r < x.rows(); ++r) {
    const double fd = std::log(std::abs(numeric_jacobian(*b, x.row(r)).determinant()));
    EXPECT_NEAR(log_det(r), fd, 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST_P(LayerTest, GraphInverseMatchesMatrixInverse) {
  const auto [kind, dim] = GetParam();
  auto b = make(kind, dim, 7);
  const Matrix y = random_matrix(30, dim, 8);
  const GraphFlowOutput g = b->inverse_graph(ad::Var::constant(y));
  const FlowOutput m = b->inverse(y);
  EXPECT_EQ(g.value.value(), m.value);
  EXPECT_EQ(g.log_det.cols(), 1);
}

TEST_P(LayerTest, ZeroHeadInitIsIdentity) {
  const auto [kind, dim] = GetParam();
  auto b = make(kind, dim, 9, HeadInit::zero);
  const Matrix x = random_matrix(50, dim, 10);
  const FlowOutput y = b->forward(x);
  EXPECT_LT((y.value - x).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(y.log_det.cwiseAbs().maxCoeff(), 1e-12);
}

TEST_P(LayerTest, JsonRoundTripIsExact) {
  const auto [kind, dim] = GetParam();
  auto b = make(kind, dim, 11);
  const auto back = bijector_from_json(nlohmann::json::parse(b->to_json().dump()));
  EXPECT_EQ(back->kind(), kind);
  const Matrix x = random_matrix(10, dim, 12);
  EXPECT_EQ(back->forward(x).value, b->forward(x).value);
}

TEST_P(LayerTest, ParameterGradientsMatchFiniteDifferences) {
  const auto [kind, dim] = GetParam();
  auto b = make(kind, dim, 13);
  perturb(*b, 14, 0.05);
  const Matrix y = random_matrix(8, dim, 15);
  const auto loss = [&]() {
    const GraphFlowOutput o = b->inverse_graph(ad::Var::constant(y));
    return ad::mean(ad::square(o.value)) - ad::mean(o.log_det);
  };
  for (ad::Var p : b->parameters()) p.zero_grad();
  ad::backward(loss());
  Rng rng(16);
  for (ad::Var p : b->parameters()) {
    const Matrix g = p.grad();
    for (int t = 0; t < 3; ++t) {
      const auto i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(p.value().size())));
      const double keep = p.value().data()[i];
      const double h = 1e-6;
      p.mutable_value().data()[i] = keep + h;
      const double up = loss().value()(0, 0);
      p.mutable_value().data()[i] = keep - h;
      const double down = loss().value()(0, 0);
      p.mutable_value().data()[i] = keep;
      EXPECT_NEAR(g.data()[i], (up - down) / (2 * h), 1e-6 * std::max(1.0, std::abs(g.data()[i])));
    }
  }
}

INSTANTIATE_TEST_SUITE_P(
    AllLayers, LayerTest,
    ::testing::Values(Case{"affine_coupling", 2}, Case{"affine_coupling", 5},
                      Case{"masked_affine", 1}, Case{"masked_affine", 2}, Case{"masked_affine", 6},
                      Case{"spline_coupling", 2}, Case{"spline_coupling", 5},
                      Case{"spline_autoregressive", 1}, Case{"spline_autoregressive", 3},
                      Case{"spline_autoregressive", 6}),
    case_name);

TEST(Autoregressive, JacobianIsTriangular) {
  for (const std::string kind : {"masked_affine", "spline_autoregressive"}) {
    auto b = make(kind, 5, 21);
    perturb(*b, 22, 0.1);
    const Matrix x = random_matrix(10, 5, 23);
    for (Index r = 0; r < x.rows(); ++r) {
      const Matrix j = numeric_jacobian(*b, x.row(r));
      for (Index out = 0; out < 5; ++out) {
        for (Index in = out + 1; in < 5; ++in) EXPECT_LT(std::abs(j(in, out)), 1e-8) << kind;
      }
      EXPECT_NEAR(j(0, 0), 1.0, 1e-8) << kind;  // first coordinate passes through
    }
  }
}

TEST(Coupling, FirstBlockPassesThroughExactly) {
  for (const std::string kind : {"affine_coupling", "spline_coupling"}) {
    auto b = make(kind, 5, 31);
    perturb(*b, 32, 0.2);
    const Matrix x = random_matrix(100, 5, 33);
    const Index d = coupling_split(5);
    EXPECT_EQ(b->forward(x).value.leftCols(d), x.leftCols(d)) << kind;
    EXPECT_EQ(b->inverse(x).value.leftCols(d), x.leftCols(d)) << kind;
  }
}

TEST(Coupling, TransformedBlockDependsOnlyOnTheFirst) {
  auto b = make("affine_coupling", 4, 34);
  Matrix x = random_matrix(1, 4, 35);
  const Matrix y = b->forward(x).value;
  x(0, 3) += 1.0;
  const Matrix y2 = b->forward(x).value;
  EXPECT_EQ(y2(0, 2), y(0, 2));
  EXPECT_NE(y2(0, 3), y(0, 3));
}

TEST(Coupling, NeedsTwoDimensions) {
  EXPECT_THROW(AffineCoupling(1, kHidden, 1), ContractViolation);
  EXPECT_THROW(SplineCoupling(1, kHidden, {}, 1), ContractViolation);
}

TEST(MaskedAffine, PassCount) {
  EXPECT_EQ(MaskedAffine(6, kHidden, 1).passes_per_forward(), 5);
  EXPECT_EQ(MaskedAffine(1, kHidden, 1).passes_per_forward(), 1);
}

TEST(SplineAutoregressive, RawParameterBlocksFollowTheirDegrees) {
  const SplineAutoregressive b(4, kHidden, {5, 3.0}, 41);
  const Index w = rqs_raw_width(5);
  Matrix y = random_matrix(1, 4, 42);
  const Matrix before = b.raw_parameters(ad::Var::constant(y)).value();
  ASSERT_EQ(before.cols(), 3 * w);
  y(0, 2) += 0.5;  // input 3 feeds only the block of dimension 4
  const Matrix after = b.raw_parameters(ad::Var::constant(y)).value();
  EXPECT_EQ(after.leftCols(2 * w), before.leftCols(2 * w));
  EXPECT_NE(after.rightCols(w), before.rightCols(w));
}

TEST(SplineLayers, OutsideTheRangeIsIdentity) {
  for (const std::string kind : {"spline_coupling", "spline_autoregressive"}) {
    auto b = make(kind, 3, 51);
    perturb(*b, 52, 0.2);
    Matrix x = random_matrix(20, 3, 53);
    x.col(2).array() = 4.0 + x.col(2).array().abs() + 1e-9;  // beyond B = 4
    const FlowOutput y = b->forward(x);
    EXPECT_EQ(y.value.col(2), x.col(2)) << kind;
  }
}

// ---------------------------------------------------------------------------

TEST(Permutation, ForwardAndInverse) {
  const Permutation p({2, 0, 1});
  Matrix x(1, 3);
  x << 10, 20, 30;
  const FlowOutput y = p.forward(x);
  EXPECT_EQ(y.value, (Matrix(1, 3) << 30, 10, 20).finished());
  EXPECT_EQ(y.log_det(0), 0.0);
  EXPECT_EQ(p.inverse(y.value).value, x);
  EXPECT_THROW(Permutation({0, 0, 1}), ContractViolation);
}

TEST(Permutation, Builders) {
  EXPECT_EQ(Permutation::identity(3).indices(), (std::vector<Index>{0, 1, 2}));
  EXPECT_EQ(Permutation::reverse(3).indices(), (std::vector<Index>{2, 1, 0}));
  // Halves of a 5-vector: [0,1] and [2,3,4] -> [2,3,4,0,1]
  EXPECT_EQ(Permutation::swap_halves(5).indices(), (std::vector<Index>{2, 3, 4, 0, 1}));
  const Permutation r = Permutation::random(10, 7);
  EXPECT_EQ(r.indices(), Permutation::random(10, 7).indices());
  std::vector<Index> sorted = r.indices();
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, Permutation::identity(10).indices());
}

// ---------------------------------------------------------------------------

TEST(Made, OutputsSeeOnlyEarlierInputs) {
  const Index dim = 5;
  const MadeLayout m = made_masks(std::vector<Index>{dim, 12, 12, 2 * (dim - 1)}, dim, 3);
  // Connectivity of input i to output o through all layers.
  Matrix path = m.masks.hidden[0];
  path = (path * m.masks.hidden[1]).cwiseMin(1.0);
  for (const Matrix& head : m.masks.heads) {
    const Matrix reach = path * head;  // [dim x (dim - 1)]
    for (Index o = 0; o < dim - 1; ++o) {
      // Output o has degree o + 1 and conditions coordinate o + 2 (1-based).
      for (Index i = 0; i < dim; ++i) {
        if (i > o) {
          EXPECT_EQ(reach(i, o), 0.0);
        }
      }
      EXPECT_GT(reach(o, o), 0.0);
    }
  }
}

TEST(Made, DegreesCoverTheRange) {
  const MadeLayout m = made_layout(4, std::vector<Index>{9}, {{1, 2, 3}}, 5);
  std::vector<Index> deg = m.hidden_degrees[0];
  std::sort(deg.begin(), deg.end());
  EXPECT_EQ(deg, (std::vector<Index>{1, 1, 1, 2, 2, 2, 3, 3, 3}));
  EXPECT_EQ(m.input_degrees, (std::vector<Index>{1, 2, 3, 4}));
}

TEST(Made, MasksAreSparse) {
  const MadeLayout m = made_masks(std::vector<Index>{6, 30, 10}, 6, 1);
  const double density = m.masks.hidden[0].mean();
  EXPECT_GT(density, 0.2);
  EXPECT_LT(density, 0.8);
  // The last input connects to nothing.
  EXPECT_EQ(m.masks.hidden[0].row(5).sum(), 0.0);
}

TEST(Made, InvalidLayouts) {
  EXPECT_THROW(made_masks(std::vector<Index>{1, 4, 0}, 1, 1), ContractViolation);
  EXPECT_THROW(made_masks(std::vector<Index>{3, 4, 3}, 3, 1), ContractViolation);
  EXPECT_THROW(made_layout(3, std::vector<Index>{4}, {{0, 3}}, 1), ContractViolation);
}

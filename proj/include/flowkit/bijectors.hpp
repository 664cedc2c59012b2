// SPDX-License-Identifier: Apache-2.0
//
// Invertible layers. Every layer maps base-side points x to data-side points
// y (`forward`, the generative direction) and back (`inverse_graph`, the
// normalizing direction). The normalizing direction is built on the autodiff
// graph because it is the one the likelihood is trained through.
#pragma once

#include "flowkit/autodiff.hpp"
#include "flowkit/mlp.hpp"
#include "flowkit/rqs.hpp"

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace flowkit {

struct FlowOutput {
  Matrix value;
  Vector log_det;  // log |det J| of the map that produced `value`
};

struct GraphFlowOutput {
  ad::Var value;
  ad::Var log_det;  // N x 1
};

class Bijector {
 public:
  virtual ~Bijector() = default;

  virtual Index dim() const = 0;
  virtual std::string kind() const = 0;

  /// Generative direction x -> y.
  virtual FlowOutput forward(const Matrix& x) const = 0;

  /// Normalizing direction y -> x, differentiable in the parameters and in y.
  virtual GraphFlowOutput inverse_graph(const ad::Var& y) const = 0;

  /// Normalizing direction on plain data.
  FlowOutput inverse(const Matrix& y) const;

  virtual std::vector<ad::Var> parameters() const = 0;
  virtual nlohmann::json to_json() const = 0;
};

std::unique_ptr<Bijector> bijector_from_json(const nlohmann::json& j);

/// Column permutation: y[:, i] = x[:, perm[i]]. Volume preserving.
class Permutation final : public Bijector {
 public:
  explicit Permutation(std::vector<Index> perm);

  static Permutation identity(Index dim);
  static Permutation reverse(Index dim);
  /// Exchanges the first floor(D/2) and the last D - floor(D/2) columns, so
  /// the next coupling layer conditions on the block just transformed.
  static Permutation swap_halves(Index dim);
  static Permutation random(Index dim, std::uint64_t seed);

  Index dim() const override { return static_cast<Index>(perm_.size()); }
  std::string kind() const override { return "permutation"; }
  FlowOutput forward(const Matrix& x) const override;
  GraphFlowOutput inverse_graph(const ad::Var& y) const override;
  std::vector<ad::Var> parameters() const override { return {}; }
  nlohmann::json to_json() const override;

  const std::vector<Index>& indices() const { return perm_; }
  const std::vector<Index>& inverse_indices() const { return inverse_; }

 private:
  std::vector<Index> perm_;
  std::vector<Index> inverse_;
};

/// Split point of coupling layers.
constexpr Index coupling_split(Index dim) { return dim / 2; }

/// Affine coupling (RealNVP):
///   y_{1:d} = x_{1:d},  y_{d+1:D} = x_{d+1:D} * exp(s(x_{1:d})) + t(x_{1:d}),
/// log det = sum s. The conditioner maps d inputs to a tanh scale head and a
/// linear shift head, each of width D - d.
class AffineCoupling final : public Bijector {
 public:
  AffineCoupling(Index dim, const std::vector<Index>& hidden, std::uint64_t seed,
                 HeadInit head_init = HeadInit::glorot);
  AffineCoupling(Index dim, Mlp conditioner);

  Index dim() const override { return dim_; }
  std::string kind() const override { return "affine_coupling"; }
  FlowOutput forward(const Matrix& x) const override;
  GraphFlowOutput inverse_graph(const ad::Var& y) const override;
  std::vector<ad::Var> parameters() const override { return conditioner_.parameters(); }
  nlohmann::json to_json() const override;

  const Mlp& conditioner() const { return conditioner_; }

 private:
  Index dim_;
  Mlp conditioner_;
};

/// Masked affine autoregressive layer (MAF):
///   y_1 = x_1,  y_i = x_i * exp(s_{i-1}(y_{1:i-1})) + t_{i-1}(y_{1:i-1}).
/// The conditioner is a MADE network with D inputs and scale/shift heads of
/// width D - 1. Sampling needs D - 1 sequential network passes; density
/// evaluation needs one. In one dimension there is nothing to condition on,
/// so the single coordinate gets an unconditional affine map (heads reduce
/// to their biases).
class MaskedAffine final : public Bijector {
 public:
  MaskedAffine(Index dim, const std::vector<Index>& hidden, std::uint64_t seed,
               HeadInit head_init = HeadInit::glorot);
  MaskedAffine(Index dim, Mlp conditioner);

  Index dim() const override { return dim_; }
  std::string kind() const override { return "masked_affine"; }
  FlowOutput forward(const Matrix& x) const override;
  GraphFlowOutput inverse_graph(const ad::Var& y) const override;
  std::vector<ad::Var> parameters() const override { return conditioner_.parameters(); }
  nlohmann::json to_json() const override;

  const Mlp& conditioner() const { return conditioner_; }
  /// Sequential network passes made by one forward() call.
  Index passes_per_forward() const { return dim_ == 1 ? 1 : dim_ - 1; }

 private:
  Index first_transformed() const { return dim_ == 1 ? 0 : 1; }

  Index dim_;
  Mlp conditioner_;
};

struct SplineShape {
  Index bins = 8;
  double bound = 16.0;
};

/// Rational-quadratic spline coupling (C-RQS): the conditioner maps x_{1:d}
/// to 3K - 1 raw parameters per transformed dimension (laid out dimension by
/// dimension), which define one spline per dimension d+1..D.
class SplineCoupling final : public Bijector {
 public:
  SplineCoupling(Index dim, const std::vector<Index>& hidden, SplineShape shape,
                 std::uint64_t seed, HeadInit head_init = HeadInit::glorot);
  SplineCoupling(Index dim, SplineShape shape, Mlp conditioner);

  Index dim() const override { return dim_; }
  std::string kind() const override { return "spline_coupling"; }
  FlowOutput forward(const Matrix& x) const override;
  GraphFlowOutput inverse_graph(const ad::Var& y) const override;
  std::vector<ad::Var> parameters() const override { return conditioner_.parameters(); }
  nlohmann::json to_json() const override;

  const Mlp& conditioner() const { return conditioner_; }
  SplineShape shape() const { return shape_; }

 private:
  Index dim_;
  SplineShape shape_;
  Mlp conditioner_;
};

/// Rational-quadratic spline autoregressive layer (A-RQS): y_1 = x_1 and the
/// spline of dimension i is parametrized from y_{1:i-1} by a MADE network
/// emitting 3K - 1 raw values per dimension 2..D. Same pass structure as
/// MaskedAffine, including the unconditional one-dimensional case.
class SplineAutoregressive final : public Bijector {
 public:
  SplineAutoregressive(Index dim, const std::vector<Index>& hidden, SplineShape shape,
                       std::uint64_t seed, HeadInit head_init = HeadInit::glorot);
  SplineAutoregressive(Index dim, SplineShape shape, Mlp conditioner);

  Index dim() const override { return dim_; }
  std::string kind() const override { return "spline_autoregressive"; }
  FlowOutput forward(const Matrix& x) const override;
  GraphFlowOutput inverse_graph(const ad::Var& y) const override;
  std::vector<ad::Var> parameters() const override { return conditioner_.parameters(); }
  nlohmann::json to_json() const override;

  const Mlp& conditioner() const { return conditioner_; }
  SplineShape shape() const { return shape_; }

  /// Raw spline parameters of every transformed dimension for inputs y,
  /// [N x (D_t (3K - 1))] with dimension-major blocks.
  ad::Var raw_parameters(const ad::Var& y) const;

 private:
  Index first_transformed() const { return dim_ == 1 ? 0 : 1; }

  Index dim_;
  SplineShape shape_;
  Mlp conditioner_;
};

}  // namespace flowkit

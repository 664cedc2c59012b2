// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "flowkit/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <iosfwd>
#include <string>

namespace flowkit {

/// Correlated mixture of Gaussians: a categorical mixture of n diagonal
/// Gaussians in D dimensions. Mixing the components is what correlates the
/// dimensions.
struct CMoGSpec {
  Index dim = 0;
  Index n_components = 0;
  Matrix means;          // n x D, entries in [0, 10]
  Matrix stds;           // n x D, entries in (0, 1]
  Vector mixture_probs;  // n, sums to 1
  std::uint64_t seed = 0;

  /// Throws ContractViolation when shapes or probabilities are inconsistent.
  void validate() const;
};

enum class SampleSource { target, flow, base };

std::string to_string(SampleSource s);

struct SampleBatch {
  Matrix data;  // N x D
  SampleSource source = SampleSource::target;
  std::uint64_t seed = 0;
};

CMoGSpec make_cmog(Index dim, Index n_components, std::uint64_t seed);

/// Draws the component index from the categorical, then D independent normals.
SampleBatch sample_cmog(const CMoGSpec& spec, Index n, std::uint64_t seed);

/// log sum_k pi_k prod_i N(x_i; mu_ki, sigma_ki), evaluated with log-sum-exp.
Vector log_prob_cmog(const CMoGSpec& spec, const Matrix& x);

SampleBatch sample_base(Index dim, Index n, std::uint64_t seed);

/// Standard normal log-density: -(D/2) log(2 pi) - |x|^2 / 2.
Vector log_prob_base(const Matrix& x);

nlohmann::json to_json(const CMoGSpec& spec);
CMoGSpec cmog_from_json(const nlohmann::json& j);

/// Header row x0,x1,...; one point per line; values in round-trip precision.
/// read_csv skips lines starting with #.
void write_csv(std::ostream& out, const Matrix& data);
Matrix read_csv(std::istream& in);

}  // namespace flowkit

// SPDX-License-Identifier: Apache-2.0
//
// Two-sample test statistics, each scaled by sqrt(m n / (m + n)), which is
// sqrt(N / 2) for equal sample sizes N:
//   KS  - Kolmogorov-Smirnov distance averaged over the D marginals
//   SWD - 1-D Wasserstein distance averaged over 2D random projections
//   FN  - Frobenius norm of the correlation-matrix difference, divided by D
#pragma once

#include "flowkit/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>

namespace flowkit {

enum class Statistic { ks, swd, fn };

/// "KS", "SWD", "FN".
std::string to_string(Statistic s);
Statistic statistic_from_string(const std::string& name);
inline constexpr Statistic kAllStatistics[] = {Statistic::ks, Statistic::swd, Statistic::fn};

struct StatValue {
  Statistic statistic = Statistic::ks;
  double raw = 0.0;     // mean KS distance, mean W1, or |C_y - C_z|_F / D
  double scaled = 0.0;  // sqrt(m n / (m + n)) * raw
  Index size_y = 0;
  Index size_z = 0;
};

/// sqrt(m n / (m + n)).
double scale_factor(Index m, Index n);

/// sup_x |F_a(x) - F_b(x)| for right-continuous ECDFs. Inputs must be sorted.
double ks_1d(std::span<const double> a, std::span<const double> b);

/// Integral of |F_a - F_b| over the merged breakpoints. Inputs must be sorted.
double wasserstein_1d(std::span<const double> a, std::span<const double> b);

/// 2D directions drawn uniformly on the unit sphere, stored as rows.
struct DirectionSet {
  Matrix directions;  // 2D x D
  std::uint64_t seed = 0;
};

DirectionSet sample_directions(Index dim, std::uint64_t seed);

StatValue ks_mean(const Matrix& y, const Matrix& z);
StatValue swd(const Matrix& y, const Matrix& z, const DirectionSet& dirs);

/// Pearson correlation matrix (D x D, population normalization). Throws
/// ContractViolation naming the column when a column has zero variance.
Matrix correlation_matrix(const Matrix& x);
StatValue frobenius_corr(const Matrix& y, const Matrix& z);

/// All three statistics at once.
struct StatTriple {
  StatValue ks;
  StatValue swd;
  StatValue fn;

  const StatValue& get(Statistic s) const;
};

StatTriple all_statistics(const Matrix& y, const Matrix& z, const DirectionSet& dirs);

}  // namespace flowkit

// SPDX-License-Identifier: Apache-2.0
#include "flowkit/metrics.hpp"

#include "flowkit/random.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace flowkit {

std::string to_string(Statistic s) {
  switch (s) {
    case Statistic::ks: return "KS";
    case Statistic::swd: return "SWD";
    case Statistic::fn: return "FN";
  }
  return "KS";
}

Statistic statistic_from_string(const std::string& name) {
  for (Statistic s : kAllStatistics) {
    if (name == to_string(s)) return s;
  }
  throw ContractViolation("unknown statistic '" + name + "' (KS, SWD, FN)");
}

double scale_factor(Index m, Index n) {
  const auto md = static_cast<double>(m);
  const auto nd = static_cast<double>(n);
  return std::sqrt(md * nd / (md + nd));
}

namespace {

// Walks the merged breakpoints of two sorted samples and calls
// visit(x, next_x, Fa(x), Fb(x)) once per distinct breakpoint, where the CDF
// values are right-continuous at x and constant on [x, next_x).
template <typename Visit>
void merge_steps(std::span<const double> a, std::span<const double> b, Visit visit) {
  const auto m = static_cast<double>(a.size());
  const auto n = static_cast<double>(b.size());
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < a.size() || j < b.size()) {
    double x;
    if (j == b.size() || (i < a.size() && a[i] <= b[j])) {
      x = a[i];
    } else {
      x = b[j];
    }
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
    double next = x;
    if (i < a.size() && j < b.size()) {
      next = std::min(a[i], b[j]);
    } else if (i < a.size()) {
      next = a[i];
    } else if (j < b.size()) {
      next = b[j];
    }
    visit(x, next, static_cast<double>(i) / m, static_cast<double>(j) / n);
  }
}

void require_sorted(std::span<const double> v, const char* who) {
  require(!v.empty(), std::string(who) + ": empty sample");
  require(std::is_sorted(v.begin(), v.end()), std::string(who) + ": sample must be sorted");
}

std::vector<double> sorted_column(const Matrix& x, Index c) {
  std::vector<double> v(static_cast<std::size_t>(x.rows()));
  for (Index r = 0; r < x.rows(); ++r) v[r] = x(r, c);
  std::sort(v.begin(), v.end());
  return v;
}

std::vector<double> sorted_projection(const Matrix& x, const Eigen::RowVectorXd& direction) {
  const Vector proj = x * direction.transpose();
  std::vector<double> v(proj.data(), proj.data() + proj.size());
  std::sort(v.begin(), v.end());
  return v;
}

StatValue make_value(Statistic s, double raw, Index m, Index n) {
  return {s, raw, scale_factor(m, n) * raw, m, n};
}

void check_pair(const Matrix& y, const Matrix& z, const char* who) {
  require(y.cols() == z.cols(), std::string(who) + ": sample widths differ (" +
                                    std::to_string(y.cols()) + " vs " + std::to_string(z.cols()) +
                                    ")");
  require(y.rows() >= 1 && z.rows() >= 1 && y.cols() >= 1, std::string(who) + ": empty sample");
}

}  // namespace

double ks_1d(std::span<const double> a, std::span<const double> b) {
  require_sorted(a, "ks_1d");
  require_sorted(b, "ks_1d");
  double sup = 0.0;
  merge_steps(a, b, [&](double, double, double fa, double fb) {
    sup = std::max(sup, std::abs(fa - fb));
  });
  return sup;
}

double wasserstein_1d(std::span<const double> a, std::span<const double> b) {
  require_sorted(a, "wasserstein_1d");
  require_sorted(b, "wasserstein_1d");
  double area = 0.0;
  merge_steps(a, b, [&](double x, double next, double fa, double fb) {
    area += std::abs(fa - fb) * (next - x);
  });
  return area;
}

DirectionSet sample_directions(Index dim, std::uint64_t seed) {
  require(dim >= 1, "sample_directions: D must be >= 1");
  Rng rng(seed);
  DirectionSet set{Matrix(2 * dim, dim), seed};
  for (Index a = 0; a < 2 * dim; ++a) {
    double norm = 0.0;
    do {
      for (Index i = 0; i < dim; ++i) set.directions(a, i) = rng.normal();
      norm = set.directions.row(a).norm();
    } while (norm == 0.0);
    set.directions.row(a) /= norm;
  }
  return set;
}

StatValue ks_mean(const Matrix& y, const Matrix& z) {
  check_pair(y, z, "ks_mean");
  double total = 0.0;
  for (Index c = 0; c < y.cols(); ++c) total += ks_1d(sorted_column(y, c), sorted_column(z, c));
  return make_value(Statistic::ks, total / static_cast<double>(y.cols()), y.rows(), z.rows());
}

StatValue swd(const Matrix& y, const Matrix& z, const DirectionSet& dirs) {
  check_pair(y, z, "swd");
  require(dirs.directions.cols() == y.cols(), "swd: direction dimension differs from sample width");
  require(dirs.directions.rows() >= 1, "swd: no directions");
  double total = 0.0;
  for (Index a = 0; a < dirs.directions.rows(); ++a) {
    const Eigen::RowVectorXd v = dirs.directions.row(a);
    total += wasserstein_1d(sorted_projection(y, v), sorted_projection(z, v));
  }
  return make_value(Statistic::swd, total / static_cast<double>(dirs.directions.rows()), y.rows(),
                    z.rows());
}

Matrix correlation_matrix(const Matrix& x) {
  require(x.rows() >= 2, "correlation: need at least 2 points");
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Matrix centered = x.rowwise() - mean;
  const Matrix cov = (centered.transpose() * centered) / static_cast<double>(x.rows());
  const Vector sd = cov.diagonal().cwiseSqrt();
  for (Index c = 0; c < sd.size(); ++c) {
    require(sd(c) > 0.0, "correlation undefined: column " + std::to_string(c) +
                             " has zero variance");
  }
  Matrix corr = cov.array() / (sd * sd.transpose()).array();
  corr.diagonal().setOnes();
  return corr;
}

StatValue frobenius_corr(const Matrix& y, const Matrix& z) {
  check_pair(y, z, "frobenius_corr");
  const Matrix diff = correlation_matrix(y) - correlation_matrix(z);
  return make_value(Statistic::fn, diff.norm() / static_cast<double>(y.cols()), y.rows(), z.rows());
}

const StatValue& StatTriple::get(Statistic s) const {
  switch (s) {
    case Statistic::ks: return ks;
    case Statistic::swd: return swd;
    case Statistic::fn: return fn;
  }
  return ks;
}

StatTriple all_statistics(const Matrix& y, const Matrix& z, const DirectionSet& dirs) {
  return {ks_mean(y, z), swd(y, z, dirs), frobenius_corr(y, z)};
}

}  // namespace flowkit

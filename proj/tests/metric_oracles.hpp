// SPDX-License-Identifier: Apache-2.0
//
// Slow, direct implementations of the test statistics and a fixed set of
// sample pairs to check the fast ones against.
#pragma once

#include "flowkit/metrics.hpp"
#include "flowkit/random.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace flowkit::oracle {

inline std::vector<double> sorted_column(const Matrix& x, Index c) {
  std::vector<double> v(static_cast<std::size_t>(x.rows()));
  for (Index r = 0; r < x.rows(); ++r) v[static_cast<std::size_t>(r)] = x(r, c);
  std::sort(v.begin(), v.end());
  return v;
}

inline double ecdf(const std::vector<double>& v, double t) {
  double count = 0;
  for (double x : v) count += x <= t ? 1.0 : 0.0;
  return count / static_cast<double>(v.size());
}

/// Evaluates both ECDFs at every sample point.
inline double ks(const std::vector<double>& a, const std::vector<double>& b) {
  double best = 0.0;
  for (const auto* v : {&a, &b}) {
    for (double t : *v) best = std::max(best, std::abs(ecdf(a, t) - ecdf(b, t)));
  }
  return best;
}

/// Integral over u in (0, 1) of |Q_a(u) - Q_b(u)| with step quantile functions.
inline double wasserstein(const std::vector<double>& a, const std::vector<double>& b) {
  const double m = static_cast<double>(a.size()), n = static_cast<double>(b.size());
  std::vector<double> cuts{0.0, 1.0};
  for (std::size_t i = 1; i < a.size(); ++i) cuts.push_back(static_cast<double>(i) / m);
  for (std::size_t j = 1; j < b.size(); ++j) cuts.push_back(static_cast<double>(j) / n);
  std::sort(cuts.begin(), cuts.end());
  double total = 0.0;
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
    const double width = cuts[k + 1] - cuts[k];
    if (width <= 0.0) continue;
    const double mid = 0.5 * (cuts[k] + cuts[k + 1]);
    const auto ia = static_cast<std::size_t>(std::floor(mid * m));
    const auto ib = static_cast<std::size_t>(std::floor(mid * n));
    total += width * std::abs(a[ia] - b[ib]);
  }
  return total;
}

inline double scale(Index m, Index n) {
  const double a = static_cast<double>(m), b = static_cast<double>(n);
  return std::sqrt(a * b / (a + b));
}

inline double ks_mean(const Matrix& y, const Matrix& z) {
  double sum = 0.0;
  for (Index c = 0; c < y.cols(); ++c) sum += ks(sorted_column(y, c), sorted_column(z, c));
  return scale(y.rows(), z.rows()) * sum / static_cast<double>(y.cols());
}

inline double swd(const Matrix& y, const Matrix& z, const Matrix& dirs) {
  double sum = 0.0;
  for (Index k = 0; k < dirs.rows(); ++k) {
    Matrix py(y.rows(), 1), pz(z.rows(), 1);
    for (Index r = 0; r < y.rows(); ++r) {
      double s = 0.0;
      for (Index c = 0; c < y.cols(); ++c) s += y(r, c) * dirs(k, c);
      py(r, 0) = s;
    }
    for (Index r = 0; r < z.rows(); ++r) {
      double s = 0.0;
      for (Index c = 0; c < z.cols(); ++c) s += z(r, c) * dirs(k, c);
      pz(r, 0) = s;
    }
    sum += wasserstein(sorted_column(py, 0), sorted_column(pz, 0));
  }
  return scale(y.rows(), z.rows()) * sum / static_cast<double>(dirs.rows());
}

inline Matrix correlation(const Matrix& x) {
  const Index d = x.cols();
  const double n = static_cast<double>(x.rows());
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  for (Index c = 0; c < d; ++c) {
    for (Index r = 0; r < x.rows(); ++r) mean[static_cast<std::size_t>(c)] += x(r, c) / n;
  }
  Matrix cov = Matrix::Zero(d, d);
  for (Index i = 0; i < d; ++i) {
    for (Index j = 0; j < d; ++j) {
      for (Index r = 0; r < x.rows(); ++r) {
        cov(i, j) += (x(r, i) - mean[static_cast<std::size_t>(i)]) *
                     (x(r, j) - mean[static_cast<std::size_t>(j)]) / n;
      }
    }
  }
  Matrix corr(d, d);
  for (Index i = 0; i < d; ++i) {
    for (Index j = 0; j < d; ++j) corr(i, j) = cov(i, j) / std::sqrt(cov(i, i) * cov(j, j));
  }
  return corr;
}

inline double fn(const Matrix& y, const Matrix& z) {
  const Matrix diff = correlation(y) - correlation(z);
  double s = 0.0;
  for (Index i = 0; i < diff.size(); ++i) s += diff.data()[i] * diff.data()[i];
  return scale(y.rows(), z.rows()) * std::sqrt(s) / static_cast<double>(y.cols());
}

struct Case {
  std::string name;
  Matrix y;
  Matrix z;
};

/// 24 fixed sample pairs: unequal sizes, ties, shifted and scaled samples.
inline std::vector<Case> fixed_cases() {
  std::vector<Case> out;
  const Index dims[] = {1, 2, 3, 5};
  const Index sizes[][2] = {{7, 7}, {13, 9}, {40, 55}};
  std::uint64_t seed = 100;
  for (Index d : dims) {
    for (const auto& s : sizes) {
      for (bool ties : {false, true}) {
        Rng rng(++seed);
        Matrix y(s[0], d), z(s[1], d);
        for (Index i = 0; i < y.size(); ++i) y.data()[i] = rng.normal();
        for (Index i = 0; i < z.size(); ++i) z.data()[i] = 0.3 + 1.4 * rng.normal();
        if (ties) {
          y = (y.array() * 2.0).round() / 2.0;
          z = (z.array() * 2.0).round() / 2.0;
        }
        out.push_back({"D" + std::to_string(d) + "_m" + std::to_string(s[0]) + "_n" +
                           std::to_string(s[1]) + (ties ? "_ties" : ""),
                       y, z});
      }
    }
  }
  return out;
}

}  // namespace flowkit::oracle

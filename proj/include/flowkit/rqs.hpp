// SPDX-License-Identifier: Apache-2.0
//
// Monotone rational-quadratic splines on [-B, B] with identity tails.
//
// Each row of a parameter set describes one spline: K bins with knots
// (x_k, y_k), k = 0..K, running from (-B, -B) to (B, B), and knot derivatives
// d_k with d_0 = d_K = 1 so the spline joins the identity tails smoothly.
// Within bin k, with theta = (x - x_k) / h_k, h_k = x_{k+1} - x_k and slope
// s_k = (y_{k+1} - y_k) / h_k:
//
//   y  = y_k + (y_{k+1} - y_k) (s_k theta^2 + d_k theta (1 - theta)) / den
//   dy/dx = s_k^2 (d_{k+1} theta^2 + 2 s_k theta (1 - theta) + d_k (1 - theta)^2) / den^2
//   den = s_k + (d_{k+1} + d_k - 2 s_k) theta (1 - theta)
//
// Two evaluation routes exist: scalar loops over Matrix data (used for
// sampling) and an autodiff graph (used for likelihood training). Raw network
// outputs are turned into knots by one shared builder.
#pragma once

#include "flowkit/autodiff.hpp"
#include "flowkit/tensor.hpp"

#include <stdexcept>

namespace flowkit {

/// Numerical floors applied when turning raw outputs into spline parameters.
struct RqsFloors {
  /// Minimum bin width/height as a fraction of the uniform width 2B/K.
  static constexpr double bin_fraction = 1e-3;
  static constexpr double derivative = 1e-3;
};

/// Raised by the inverse when a bin's quadratic has no real root, which
/// cannot happen for a valid monotone spline.
class SplineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raw parameters per transformed dimension: K width logits, K height logits,
/// K - 1 derivative pre-activations.
constexpr Index rqs_raw_width(Index bins) { return 3 * bins - 1; }

/// One spline per row.
struct RqsParams {
  Index bins = 0;
  double bound = 0.0;
  Matrix knot_x;      // N x (K + 1)
  Matrix knot_y;      // N x (K + 1)
  Matrix derivative;  // N x (K + 1); columns 0 and K equal 1

  Index rows() const { return knot_x.rows(); }
  void validate() const;
};

struct RqsGraphParams {
  Index bins = 0;
  double bound = 0.0;
  ad::Var knot_x;
  ad::Var knot_y;
  ad::Var derivative;
};

struct SplineOutput {
  Vector value;
  Vector log_det;
};

struct SplineGraphOutput {
  ad::Var value;    // N x 1
  ad::Var log_det;  // N x 1
};

/// widths = w_min + (2B - K w_min) softmax(raw[0:K]), likewise heights from
/// raw[K:2K]; knots are running sums from -B. Internal derivatives are
/// d_min + softplus(raw[2K:] + c) with c chosen so that raw = 0 gives
/// exactly 1, which makes an all-zero raw vector the identity spline.
RqsGraphParams rqs_build_params(const ad::Var& raw, Index bins, double bound);
RqsParams rqs_build_params(const Matrix& raw, Index bins, double bound);

/// Scalar route.
SplineOutput rqs_forward(const Vector& x, const RqsParams& params);
SplineOutput rqs_inverse(const Vector& y, const RqsParams& params);

/// Differentiable route. `x`/`y` are N x 1.
SplineGraphOutput rqs_forward(const ad::Var& x, const RqsGraphParams& params);
SplineGraphOutput rqs_inverse(const ad::Var& y, const RqsGraphParams& params);

/// Index of the bin containing v among `knots` (K + 1 ascending values);
/// values on the last knot belong to bin K - 1.
template <typename Row>
Index locate_bin(const Row& knots, double v) {
  const Index k = knots.size() - 1;
  Index bin = 0;
  while (bin + 1 < k && v >= knots(bin + 1)) ++bin;
  return bin;
}

}  // namespace flowkit

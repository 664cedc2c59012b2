// SPDX-License-Identifier: Apache-2.0
#include "flowkit/rqs.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace flowkit {

namespace {

// softplus(c) = 1 - d_min, so d_min + softplus(0 + c) = 1.
const double kDerivativeShift = std::log(std::expm1(1.0 - RqsFloors::derivative));

struct Bin {
  double x0, x1, y0, y1, d0, d1;
};

Bin bin_at(const RqsParams& p, Index r, Index k) {
  return {p.knot_x(r, k),     p.knot_x(r, k + 1),     p.knot_y(r, k),
          p.knot_y(r, k + 1), p.derivative(r, k), p.derivative(r, k + 1)};
}

// log dy/dx inside a bin at relative position theta.
double log_slope(const Bin& b, double theta) {
  const double h = b.x1 - b.x0;
  const double s = (b.y1 - b.y0) / h;
  const double t1 = theta * (1.0 - theta);
  const double den = s + (b.d1 + b.d0 - 2.0 * s) * t1;
  const double num =
      s * s * (b.d1 * theta * theta + 2.0 * s * t1 + b.d0 * (1.0 - theta) * (1.0 - theta));
  return std::log(num) - 2.0 * std::log(den);
}

}  // namespace

void RqsParams::validate() const {
  require(bins >= 1 && bound > 0.0, "RqsParams: need K >= 1 and B > 0");
  const Index n = knot_x.rows();
  require(knot_x.cols() == bins + 1 && knot_y.rows() == n && knot_y.cols() == bins + 1 &&
              derivative.rows() == n && derivative.cols() == bins + 1,
          "RqsParams: knot arrays must be N x (K + 1)");
  for (Index r = 0; r < n; ++r) {
    require(knot_x(r, 0) == -bound && knot_y(r, 0) == -bound && knot_x(r, bins) == bound &&
                knot_y(r, bins) == bound,
            "RqsParams: end knots must be (-B, -B) and (B, B)");
    for (Index k = 0; k < bins; ++k) {
      require(knot_x(r, k + 1) > knot_x(r, k) && knot_y(r, k + 1) > knot_y(r, k),
              "RqsParams: knots must increase strictly");
    }
    require((derivative.row(r).array() > 0.0).all(), "RqsParams: derivatives must be positive");
  }
}

RqsGraphParams rqs_build_params(const ad::Var& raw, Index bins, double bound) {
  require(bins >= 1 && bound > 0.0, "rqs_build_params: need K >= 1 and B > 0");
  require(raw.cols() == rqs_raw_width(bins),
          "rqs_build_params: expected " + std::to_string(rqs_raw_width(bins)) +
              " raw columns, got " + std::to_string(raw.cols()));
  const double span = 2.0 * bound;
  const double min_size = RqsFloors::bin_fraction * span / static_cast<double>(bins);
  const double free_span = span - static_cast<double>(bins) * min_size;

  const ad::Var widths = ad::softmax_rows(ad::cols(raw, 0, bins)) * free_span + min_size;
  const ad::Var heights = ad::softmax_rows(ad::cols(raw, bins, bins)) * free_span + min_size;

  RqsGraphParams p;
  p.bins = bins;
  p.bound = bound;
  p.knot_x = ad::knots_from_sizes(widths, bound);
  p.knot_y = ad::knots_from_sizes(heights, bound);
  const ad::Var ones = ad::Var::constant(Matrix::Ones(raw.rows(), 1));
  if (bins > 1) {
    const ad::Var inner =
        ad::softplus(ad::cols(raw, 2 * bins, bins - 1) + kDerivativeShift) + RqsFloors::derivative;
    p.derivative = ad::concat_cols({ones, inner, ones});
  } else {
    p.derivative = ad::concat_cols({ones, ones});
  }
  return p;
}

RqsParams rqs_build_params(const Matrix& raw, Index bins, double bound) {
  const RqsGraphParams g = rqs_build_params(ad::Var::constant(raw), bins, bound);
  return {bins, bound, g.knot_x.value(), g.knot_y.value(), g.derivative.value()};
}

SplineOutput rqs_forward(const Vector& x, const RqsParams& p) {
  require(x.size() == p.rows(), "rqs_forward: one spline per input required");
  SplineOutput out{x, Vector::Zero(x.size())};
  for (Index r = 0; r < x.size(); ++r) {
    const double v = x(r);
    if (!(v >= -p.bound && v <= p.bound)) continue;
    const Index k = locate_bin(p.knot_x.row(r), v);
    const Bin b = bin_at(p, r, k);
    const double h = b.x1 - b.x0;
    const double dy = b.y1 - b.y0;
    const double s = dy / h;
    const double theta = (v - b.x0) / h;
    const double t1 = theta * (1.0 - theta);
    const double den = s + (b.d1 + b.d0 - 2.0 * s) * t1;
    out.value(r) = b.y0 + dy * (s * theta * theta + b.d0 * t1) / den;
    out.log_det(r) = log_slope(b, theta);
  }
  return out;
}

SplineOutput rqs_inverse(const Vector& y, const RqsParams& p) {
  require(y.size() == p.rows(), "rqs_inverse: one spline per input required");
  SplineOutput out{y, Vector::Zero(y.size())};
  for (Index r = 0; r < y.size(); ++r) {
    const double v = y(r);
    if (!(v >= -p.bound && v <= p.bound)) continue;
    const Index k = locate_bin(p.knot_y.row(r), v);
    const Bin b = bin_at(p, r, k);
    const double h = b.x1 - b.x0;
    const double dy = b.y1 - b.y0;
    const double s = dy / h;
    const double rel = v - b.y0;
    const double curvature = b.d1 + b.d0 - 2.0 * s;
    const double qa = dy * (s - b.d0) + rel * curvature;
    const double qb = dy * b.d0 - rel * curvature;
    const double qc = -s * rel;
    const double disc = qb * qb - 4.0 * qa * qc;
    if (disc < 0.0) {
      throw SplineError("rqs_inverse: negative discriminant " + std::to_string(disc) +
                        " in bin " + std::to_string(k));
    }
    const double theta = (2.0 * qc) / (-qb - std::sqrt(disc));
    out.value(r) = b.x0 + theta * h;
    out.log_det(r) = -log_slope(b, theta);
  }
  return out;
}

namespace {

struct GraphBin {
  ad::Var x0, h, y0, dy, slope, d0, d1;
};

GraphBin gather_bin(const RqsGraphParams& p, const std::vector<Index>& k) {
  std::vector<Index> k1(k.size());
  for (std::size_t r = 0; r < k.size(); ++r) k1[r] = k[r] + 1;
  GraphBin b;
  b.x0 = ad::pick(p.knot_x, k);
  b.y0 = ad::pick(p.knot_y, k);
  b.h = ad::pick(p.knot_x, k1) - b.x0;
  b.dy = ad::pick(p.knot_y, k1) - b.y0;
  b.slope = b.dy / b.h;
  b.d0 = ad::pick(p.derivative, k);
  b.d1 = ad::pick(p.derivative, k1);
  return b;
}

ad::Var graph_log_slope(const GraphBin& b, const ad::Var& theta) {
  const ad::Var one_minus = 1.0 - theta;
  const ad::Var t1 = theta * one_minus;
  const ad::Var den = b.slope + (b.d1 + b.d0 - 2.0 * b.slope) * t1;
  const ad::Var num = ad::square(b.slope) * (b.d1 * ad::square(theta) + 2.0 * b.slope * t1 +
                                             b.d0 * ad::square(one_minus));
  return ad::log(num) - 2.0 * ad::log(den);
}

// Rows outside [-B, B] are evaluated at the lower end knot (theta = 0), which
// keeps every intermediate finite; where() then discards them.
struct Placement {
  Mask inside;
  std::vector<Index> bin;
  ad::Var safe;
};

Placement place(const ad::Var& v, const ad::Var& knots, double bound) {
  const Index n = v.rows();
  Placement pl{Mask(n), std::vector<Index>(static_cast<std::size_t>(n), 0), {}};
  for (Index r = 0; r < n; ++r) {
    const double value = v.value()(r, 0);
    pl.inside(r) = value >= -bound && value <= bound;
    if (pl.inside(r)) pl.bin[r] = locate_bin(knots.value().row(r), value);
  }
  pl.safe = ad::where(pl.inside, v, ad::Var::constant(Matrix::Constant(n, 1, -bound)));
  return pl;
}

}  // namespace

SplineGraphOutput rqs_forward(const ad::Var& x, const RqsGraphParams& p) {
  require(x.cols() == 1 && x.rows() == p.knot_x.rows(), "rqs_forward: expected N x 1 input");
  const Placement pl = place(x, p.knot_x, p.bound);
  const GraphBin b = gather_bin(p, pl.bin);
  const ad::Var theta = (pl.safe - b.x0) / b.h;
  const ad::Var t1 = theta * (1.0 - theta);
  const ad::Var den = b.slope + (b.d1 + b.d0 - 2.0 * b.slope) * t1;
  const ad::Var inner = b.y0 + b.dy * (b.slope * ad::square(theta) + b.d0 * t1) / den;
  const ad::Var zeros = ad::Var::constant(Matrix::Zero(x.rows(), 1));
  return {ad::where(pl.inside, inner, x), ad::where(pl.inside, graph_log_slope(b, theta), zeros)};
}

SplineGraphOutput rqs_inverse(const ad::Var& y, const RqsGraphParams& p) {
  require(y.cols() == 1 && y.rows() == p.knot_y.rows(), "rqs_inverse: expected N x 1 input");
  const Placement pl = place(y, p.knot_y, p.bound);
  const GraphBin b = gather_bin(p, pl.bin);
  const ad::Var rel = pl.safe - b.y0;
  const ad::Var curvature = b.d1 + b.d0 - 2.0 * b.slope;
  const ad::Var qa = b.dy * (b.slope - b.d0) + rel * curvature;
  const ad::Var qb = b.dy * b.d0 - rel * curvature;
  const ad::Var qc = -(b.slope * rel);
  const ad::Var disc = ad::square(qb) - 4.0 * (qa * qc);
  if ((disc.value().array() < 0.0).any()) {
    throw SplineError("rqs_inverse: negative discriminant in graph evaluation");
  }
  const ad::Var theta = (2.0 * qc) / (-qb - ad::sqrt(disc));
  const ad::Var inner = b.x0 + theta * b.h;
  const ad::Var zeros = ad::Var::constant(Matrix::Zero(y.rows(), 1));
  return {ad::where(pl.inside, inner, y),
          ad::where(pl.inside, -graph_log_slope(b, theta), zeros)};
}

}  // namespace flowkit

// SPDX-License-Identifier: Apache-2.0
#include "flowkit/targets.hpp"

#include "flowkit/mlp.hpp"
#include "flowkit/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>

namespace flowkit {

namespace {

const double kLogSqrt2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

}  // namespace

void CMoGSpec::validate() const {
  require(dim >= 1 && n_components >= 1, "CMoGSpec: dim and n_components must be positive");
  require(means.rows() == n_components && means.cols() == dim, "CMoGSpec: means must be n x D");
  require(stds.rows() == n_components && stds.cols() == dim, "CMoGSpec: stds must be n x D");
  require(mixture_probs.size() == n_components, "CMoGSpec: one probability per component");
  require((stds.array() > 0.0).all(), "CMoGSpec: standard deviations must be positive");
  require((mixture_probs.array() >= 0.0).all(), "CMoGSpec: probabilities must be nonnegative");
  require(std::abs(mixture_probs.sum() - 1.0) <= 1e-12, "CMoGSpec: probabilities must sum to 1");
}

std::string to_string(SampleSource s) {
  switch (s) {
    case SampleSource::target: return "target";
    case SampleSource::flow: return "flow";
    case SampleSource::base: return "base";
  }
  return "target";
}

CMoGSpec make_cmog(Index dim, Index n_components, std::uint64_t seed) {
  require(dim >= 1, "make_cmog: D must be >= 1");
  require(n_components >= 1, "make_cmog: n must be >= 1");
  Rng rng(seed);
  CMoGSpec spec;
  spec.dim = dim;
  spec.n_components = n_components;
  spec.seed = seed;
  spec.means.resize(n_components, dim);
  spec.stds.resize(n_components, dim);
  spec.mixture_probs.resize(n_components);
  for (Index k = 0; k < n_components; ++k) {
    for (Index i = 0; i < dim; ++i) spec.means(k, i) = rng.uniform(0.0, 10.0);
  }
  for (Index k = 0; k < n_components; ++k) {
    for (Index i = 0; i < dim; ++i) spec.stds(k, i) = rng.uniform_open_closed();
  }
  for (Index k = 0; k < n_components; ++k) spec.mixture_probs(k) = rng.uniform_open_closed();
  spec.mixture_probs /= spec.mixture_probs.sum();
  return spec;
}

SampleBatch sample_cmog(const CMoGSpec& spec, Index n, std::uint64_t seed) {
  require(n >= 1, "sample_cmog: N must be >= 1");
  spec.validate();
  Rng rng(seed);
  Vector cdf(spec.n_components);
  double acc = 0.0;
  for (Index k = 0; k < spec.n_components; ++k) {
    acc += spec.mixture_probs(k);
    cdf(k) = acc;
  }
  SampleBatch batch;
  batch.source = SampleSource::target;
  batch.seed = seed;
  batch.data.resize(n, spec.dim);
  for (Index r = 0; r < n; ++r) {
    const double u = rng.uniform() * acc;
    Index component = 0;
    while (component + 1 < spec.n_components && u >= cdf(component)) ++component;
    // Zero-probability components are never selected, even on exact ties.
    while (spec.mixture_probs(component) == 0.0 && component > 0) --component;
    for (Index i = 0; i < spec.dim; ++i) {
      batch.data(r, i) = spec.means(component, i) + spec.stds(component, i) * rng.normal();
    }
  }
  return batch;
}

Vector log_prob_cmog(const CMoGSpec& spec, const Matrix& x) {
  spec.validate();
  require(x.cols() == spec.dim, "log_prob_cmog: width " + std::to_string(x.cols()) + " != D " +
                                    std::to_string(spec.dim));
  const Index n = spec.n_components;
  Vector log_weight(n);
  for (Index k = 0; k < n; ++k) {
    log_weight(k) = std::log(spec.mixture_probs(k)) - spec.stds.row(k).array().log().sum() -
                    static_cast<double>(spec.dim) * kLogSqrt2Pi;
  }
  Vector out(x.rows());
  Vector terms(n);
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index k = 0; k < n; ++k) {
      const auto z = (x.row(r) - spec.means.row(k)).array() / spec.stds.row(k).array();
      terms(k) = log_weight(k) - 0.5 * z.square().sum();
    }
    const double m = terms.maxCoeff();
    out(r) = std::isinf(m) ? m : m + std::log((terms.array() - m).exp().sum());
  }
  return out;
}

SampleBatch sample_base(Index dim, Index n, std::uint64_t seed) {
  require(dim >= 1 && n >= 1, "sample_base: D and N must be >= 1");
  Rng rng(seed);
  SampleBatch batch;
  batch.source = SampleSource::base;
  batch.seed = seed;
  batch.data.resize(n, dim);
  for (Index i = 0; i < batch.data.size(); ++i) batch.data.data()[i] = rng.normal();
  return batch;
}

Vector log_prob_base(const Matrix& x) {
  const double norm = static_cast<double>(x.cols()) * kLogSqrt2Pi;
  return (-0.5 * x.rowwise().squaredNorm()).array() - norm;
}

nlohmann::json to_json(const CMoGSpec& spec) {
  return {{"kind", "cmog"},
          {"dim", spec.dim},
          {"n_components", spec.n_components},
          {"seed", spec.seed},
          {"means", matrix_to_json(spec.means)},
          {"stds", matrix_to_json(spec.stds)},
          {"mixture_probs",
           std::vector<double>(spec.mixture_probs.data(),
                               spec.mixture_probs.data() + spec.mixture_probs.size())}};
}

CMoGSpec cmog_from_json(const nlohmann::json& j) {
  require(j.value("kind", std::string{}) == "cmog", "cmog_from_json: not a CMoG spec");
  CMoGSpec spec;
  spec.dim = j.at("dim").get<Index>();
  spec.n_components = j.at("n_components").get<Index>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.means = matrix_from_json(j.at("means"));
  spec.stds = matrix_from_json(j.at("stds"));
  const auto probs = j.at("mixture_probs").get<std::vector<double>>();
  spec.mixture_probs = Eigen::Map<const Vector>(probs.data(), static_cast<Index>(probs.size()));
  spec.validate();
  return spec;
}

void write_csv(std::ostream& out, const Matrix& data) {
  for (Index c = 0; c < data.cols(); ++c) out << (c ? "," : "") << 'x' << c;
  out << '\n';
  char buf[64];
  for (Index r = 0; r < data.rows(); ++r) {
    for (Index c = 0; c < data.cols(); ++c) {
      const auto res = std::to_chars(buf, buf + sizeof(buf), data(r, c));
      if (c) out << ',';
      out.write(buf, res.ptr - buf);
    }
    out << '\n';
  }
}

Matrix read_csv(std::istream& in) {
  std::string line;
  do {
    require(static_cast<bool>(std::getline(in, line)), "read_csv: missing header");
  } while (!line.empty() && line.front() == '#');
  const Index cols = static_cast<Index>(std::count(line.begin(), line.end(), ',')) + 1;
  std::vector<double> values;
  Index rows = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    Index c = 0;
    while (std::getline(ss, cell, ',')) {
      double v = 0.0;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      require(res.ec == std::errc{}, "read_csv: bad number '" + cell + "'");
      values.push_back(v);
      ++c;
    }
    require(c == cols, "read_csv: ragged row " + std::to_string(rows + 1));
    ++rows;
  }
  Matrix m(rows, cols);
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

}  // namespace flowkit

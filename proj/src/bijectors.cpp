// SPDX-License-Identifier: Apache-2.0
#include "flowkit/bijectors.hpp"

#include "flowkit/made.hpp"
#include "flowkit/random.hpp"

#include <numeric>

namespace flowkit {

namespace {

std::uint64_t mask_seed(std::uint64_t seed) { return derive_seed(seed, {1}); }
std::uint64_t weight_seed(std::uint64_t seed) { return derive_seed(seed, {2}); }

std::vector<Index> degree_range(Index count) {
  std::vector<Index> d(static_cast<std::size_t>(count));
  std::iota(d.begin(), d.end(), Index{1});
  return d;
}

// One-dimensional autoregressive layers have nothing to condition on: no
// hidden layers, and head masks that cut the single input off.
MlpMasks unconditional_masks(std::size_t heads, Index head_width) {
  MlpMasks m;
  for (std::size_t h = 0; h < heads; ++h) m.heads.push_back(Matrix::Zero(1, head_width));
  return m;
}

void check_input(const Matrix& x, Index dim, const char* who) {
  require(x.cols() == dim, std::string(who) + ": input width " + std::to_string(x.cols()) +
                               " != D " + std::to_string(dim));
}

void check_input(const ad::Var& x, Index dim, const char* who) {
  require(x.cols() == dim, std::string(who) + ": input width " + std::to_string(x.cols()) +
                               " != D " + std::to_string(dim));
}

ad::Var join(std::vector<ad::Var> parts) {
  if (parts.size() == 1) return parts.front();
  return ad::concat_cols(std::span<const ad::Var>(parts));
}

}  // namespace

FlowOutput Bijector::inverse(const Matrix& y) const {
  const GraphFlowOutput g = inverse_graph(ad::Var::constant(y));
  return {g.value.value(), g.log_det.value().col(0)};
}

// ---------------------------------------------------------------------------

Permutation::Permutation(std::vector<Index> perm) : perm_(std::move(perm)) {
  require(!perm_.empty(), "Permutation: empty");
  inverse_.assign(perm_.size(), -1);
  for (std::size_t i = 0; i < perm_.size(); ++i) {
    const Index p = perm_[i];
    require(p >= 0 && p < static_cast<Index>(perm_.size()) && inverse_[p] == -1,
            "Permutation: not a bijection");
    inverse_[p] = static_cast<Index>(i);
  }
}

Permutation Permutation::identity(Index dim) {
  std::vector<Index> p(static_cast<std::size_t>(dim));
  std::iota(p.begin(), p.end(), Index{0});
  return Permutation(std::move(p));
}

Permutation Permutation::reverse(Index dim) {
  std::vector<Index> p(static_cast<std::size_t>(dim));
  for (Index i = 0; i < dim; ++i) p[i] = dim - 1 - i;
  return Permutation(std::move(p));
}

Permutation Permutation::swap_halves(Index dim) {
  const Index d = coupling_split(dim);
  std::vector<Index> p;
  for (Index i = d; i < dim; ++i) p.push_back(i);
  for (Index i = 0; i < d; ++i) p.push_back(i);
  return Permutation(std::move(p));
}

Permutation Permutation::random(Index dim, std::uint64_t seed) {
  std::vector<Index> p(static_cast<std::size_t>(dim));
  std::iota(p.begin(), p.end(), Index{0});
  Rng rng(seed);
  rng.shuffle(p.begin(), p.end());
  return Permutation(std::move(p));
}

FlowOutput Permutation::forward(const Matrix& x) const {
  check_input(x, dim(), "permute");
  Matrix y(x.rows(), x.cols());
  for (Index i = 0; i < dim(); ++i) y.col(i) = x.col(perm_[i]);
  return {std::move(y), Vector::Zero(x.rows())};
}

GraphFlowOutput Permutation::inverse_graph(const ad::Var& y) const {
  check_input(y, dim(), "permute inverse");
  return {ad::gather_cols(y, inverse_), ad::Var::constant(Matrix::Zero(y.rows(), 1))};
}

nlohmann::json Permutation::to_json() const {
  return {{"kind", kind()}, {"perm", perm_}};
}

// ---------------------------------------------------------------------------

AffineCoupling::AffineCoupling(Index dim, const std::vector<Index>& hidden, std::uint64_t seed,
                               HeadInit head_init)
    : dim_(dim) {
  require(dim >= 2, "AffineCoupling: D must be >= 2");
  const Index d = coupling_split(dim);
  conditioner_ = Mlp(d, hidden, {{dim - d, Activation::tanh}, {dim - d, Activation::linear}},
                     weight_seed(seed), head_init);
}

AffineCoupling::AffineCoupling(Index dim, Mlp conditioner)
    : dim_(dim), conditioner_(std::move(conditioner)) {
  require(dim >= 2, "AffineCoupling: D must be >= 2");
  const Index d = coupling_split(dim);
  require(conditioner_.input_width() == d && conditioner_.head_layers().size() == 2 &&
              conditioner_.head_layers()[0].out_width() == dim - d &&
              conditioner_.head_layers()[1].out_width() == dim - d,
          "AffineCoupling: conditioner must map d inputs to two heads of width D - d");
}

FlowOutput AffineCoupling::forward(const Matrix& x) const {
  check_input(x, dim_, "realnvp_forward");
  const Index d = coupling_split(dim_);
  const auto heads = conditioner_.forward(Matrix(x.leftCols(d)));
  Matrix y = x;
  y.rightCols(dim_ - d) =
      x.rightCols(dim_ - d).cwiseProduct(heads[0].array().exp().matrix()) + heads[1];
  return {std::move(y), heads[0].rowwise().sum()};
}

GraphFlowOutput AffineCoupling::inverse_graph(const ad::Var& y) const {
  check_input(y, dim_, "realnvp_inverse");
  const Index d = coupling_split(dim_);
  const ad::Var kept = ad::cols(y, 0, d);
  const auto heads = conditioner_.forward(kept);
  const ad::Var moved = (ad::cols(y, d, dim_ - d) - heads[1]) * ad::exp(-heads[0]);
  return {ad::concat_cols({kept, moved}), -ad::sum_cols(heads[0])};
}

nlohmann::json AffineCoupling::to_json() const {
  return {{"kind", kind()}, {"dim", dim_}, {"conditioner", conditioner_.to_json()}};
}

// ---------------------------------------------------------------------------

MaskedAffine::MaskedAffine(Index dim, const std::vector<Index>& hidden, std::uint64_t seed,
                           HeadInit head_init)
    : dim_(dim) {
  require(dim >= 1, "MaskedAffine: D must be >= 1");
  if (dim == 1) {
    conditioner_ = Mlp(1, {}, {{1, Activation::tanh}, {1, Activation::linear}}, weight_seed(seed),
                       head_init, unconditional_masks(2, 1));
    return;
  }
  const auto degrees = degree_range(dim - 1);
  MadeLayout layout = made_layout(dim, hidden, {degrees, degrees}, mask_seed(seed));
  conditioner_ = Mlp(dim, hidden, {{dim - 1, Activation::tanh}, {dim - 1, Activation::linear}},
                     weight_seed(seed), head_init, std::move(layout.masks));
}

MaskedAffine::MaskedAffine(Index dim, Mlp conditioner)
    : dim_(dim), conditioner_(std::move(conditioner)) {
  require(dim >= 1, "MaskedAffine: D must be >= 1");
  const Index width = dim == 1 ? 1 : dim - 1;
  require(conditioner_.input_width() == dim && conditioner_.head_layers().size() == 2 &&
              conditioner_.head_layers()[0].out_width() == width &&
              conditioner_.head_layers()[1].out_width() == width,
          "MaskedAffine: conditioner must map D inputs to two heads of width D - 1");
}

FlowOutput MaskedAffine::forward(const Matrix& x) const {
  check_input(x, dim_, "maf_forward");
  const Index first = first_transformed();
  Matrix y = x;
  Vector log_det = Vector::Zero(x.rows());
  // Pass i fixes y_i from the already final y_{1:i-1}.
  for (Index i = first; i < dim_; ++i) {
    const auto heads = conditioner_.forward(y);
    const Index j = i - first;
    y.col(i) = x.col(i).cwiseProduct(heads[0].col(j).array().exp().matrix()) + heads[1].col(j);
    log_det += heads[0].col(j);
  }
  return {std::move(y), std::move(log_det)};
}

GraphFlowOutput MaskedAffine::inverse_graph(const ad::Var& y) const {
  check_input(y, dim_, "maf_inverse");
  const Index first = first_transformed();
  const auto heads = conditioner_.forward(y);
  const ad::Var moved = (ad::cols(y, first, dim_ - first) - heads[1]) * ad::exp(-heads[0]);
  const ad::Var value = first == 0 ? moved : ad::concat_cols({ad::cols(y, 0, first), moved});
  return {value, -ad::sum_cols(heads[0])};
}

nlohmann::json MaskedAffine::to_json() const {
  return {{"kind", kind()}, {"dim", dim_}, {"conditioner", conditioner_.to_json()}};
}

// ---------------------------------------------------------------------------

SplineCoupling::SplineCoupling(Index dim, const std::vector<Index>& hidden, SplineShape shape,
                               std::uint64_t seed, HeadInit head_init)
    : dim_(dim), shape_(shape) {
  require(dim >= 2, "SplineCoupling: D must be >= 2");
  require(shape.bins >= 1 && shape.bound > 0.0, "SplineCoupling: need K >= 1 and B > 0");
  const Index d = coupling_split(dim);
  conditioner_ = Mlp(d, hidden, {{(dim - d) * rqs_raw_width(shape.bins), Activation::linear}},
                     weight_seed(seed), head_init);
}

SplineCoupling::SplineCoupling(Index dim, SplineShape shape, Mlp conditioner)
    : dim_(dim), shape_(shape), conditioner_(std::move(conditioner)) {
  require(dim >= 2, "SplineCoupling: D must be >= 2");
  const Index d = coupling_split(dim);
  require(conditioner_.input_width() == d && conditioner_.head_layers().size() == 1 &&
              conditioner_.head_layers()[0].out_width() == (dim - d) * rqs_raw_width(shape.bins),
          "SplineCoupling: conditioner must map d inputs to (D - d)(3K - 1) outputs");
}

FlowOutput SplineCoupling::forward(const Matrix& x) const {
  check_input(x, dim_, "crqs_forward");
  const Index d = coupling_split(dim_);
  const Index w = rqs_raw_width(shape_.bins);
  const Matrix raw = conditioner_.forward(Matrix(x.leftCols(d)))[0];
  Matrix y = x;
  Vector log_det = Vector::Zero(x.rows());
  for (Index j = 0; j < dim_ - d; ++j) {
    const RqsParams p = rqs_build_params(Matrix(raw.middleCols(j * w, w)), shape_.bins, shape_.bound);
    const SplineOutput out = rqs_forward(Vector(x.col(d + j)), p);
    y.col(d + j) = out.value;
    log_det += out.log_det;
  }
  return {std::move(y), std::move(log_det)};
}

GraphFlowOutput SplineCoupling::inverse_graph(const ad::Var& y) const {
  check_input(y, dim_, "crqs_inverse");
  const Index d = coupling_split(dim_);
  const Index w = rqs_raw_width(shape_.bins);
  const ad::Var kept = ad::cols(y, 0, d);
  const ad::Var raw = conditioner_.forward(kept)[0];
  std::vector<ad::Var> columns{kept};
  std::vector<ad::Var> log_dets;
  for (Index j = 0; j < dim_ - d; ++j) {
    const RqsGraphParams p = rqs_build_params(ad::cols(raw, j * w, w), shape_.bins, shape_.bound);
    const SplineGraphOutput out = rqs_inverse(ad::cols(y, d + j, 1), p);
    columns.push_back(out.value);
    log_dets.push_back(out.log_det);
  }
  return {join(std::move(columns)), ad::sum_cols(join(std::move(log_dets)))};
}

nlohmann::json SplineCoupling::to_json() const {
  return {{"kind", kind()},
          {"dim", dim_},
          {"bins", shape_.bins},
          {"bound", shape_.bound},
          {"conditioner", conditioner_.to_json()}};
}

// ---------------------------------------------------------------------------

SplineAutoregressive::SplineAutoregressive(Index dim, const std::vector<Index>& hidden,
                                           SplineShape shape, std::uint64_t seed,
                                           HeadInit head_init)
    : dim_(dim), shape_(shape) {
  require(dim >= 1, "SplineAutoregressive: D must be >= 1");
  require(shape.bins >= 1 && shape.bound > 0.0, "SplineAutoregressive: need K >= 1 and B > 0");
  const Index w = rqs_raw_width(shape.bins);
  if (dim == 1) {
    conditioner_ = Mlp(1, {}, {{w, Activation::linear}}, weight_seed(seed), head_init,
                       unconditional_masks(1, w));
    return;
  }
  std::vector<Index> degrees;
  for (Index j = 0; j < dim - 1; ++j) degrees.insert(degrees.end(), static_cast<std::size_t>(w), j + 1);
  MadeLayout layout = made_layout(dim, hidden, {degrees}, mask_seed(seed));
  conditioner_ = Mlp(dim, hidden, {{(dim - 1) * w, Activation::linear}}, weight_seed(seed),
                     head_init, std::move(layout.masks));
}

SplineAutoregressive::SplineAutoregressive(Index dim, SplineShape shape, Mlp conditioner)
    : dim_(dim), shape_(shape), conditioner_(std::move(conditioner)) {
  require(dim >= 1, "SplineAutoregressive: D must be >= 1");
  const Index transformed = dim == 1 ? 1 : dim - 1;
  require(conditioner_.input_width() == dim && conditioner_.head_layers().size() == 1 &&
              conditioner_.head_layers()[0].out_width() == transformed * rqs_raw_width(shape.bins),
          "SplineAutoregressive: conditioner must map D inputs to (D - 1)(3K - 1) outputs");
}

ad::Var SplineAutoregressive::raw_parameters(const ad::Var& y) const {
  return conditioner_.forward(y)[0];
}

FlowOutput SplineAutoregressive::forward(const Matrix& x) const {
  check_input(x, dim_, "arqs_forward");
  const Index first = first_transformed();
  const Index w = rqs_raw_width(shape_.bins);
  Matrix y = x;
  Vector log_det = Vector::Zero(x.rows());
  for (Index i = first; i < dim_; ++i) {
    const Matrix raw = conditioner_.forward(y)[0];
    const Index j = i - first;
    const RqsParams p = rqs_build_params(Matrix(raw.middleCols(j * w, w)), shape_.bins, shape_.bound);
    const SplineOutput out = rqs_forward(Vector(x.col(i)), p);
    y.col(i) = out.value;
    log_det += out.log_det;
  }
  return {std::move(y), std::move(log_det)};
}

GraphFlowOutput SplineAutoregressive::inverse_graph(const ad::Var& y) const {
  check_input(y, dim_, "arqs_inverse");
  const Index first = first_transformed();
  const Index w = rqs_raw_width(shape_.bins);
  const ad::Var raw = raw_parameters(y);
  std::vector<ad::Var> columns;
  if (first == 1) columns.push_back(ad::cols(y, 0, 1));
  std::vector<ad::Var> log_dets;
  for (Index i = first; i < dim_; ++i) {
    const Index j = i - first;
    const RqsGraphParams p = rqs_build_params(ad::cols(raw, j * w, w), shape_.bins, shape_.bound);
    const SplineGraphOutput out = rqs_inverse(ad::cols(y, i, 1), p);
    columns.push_back(out.value);
    log_dets.push_back(out.log_det);
  }
  return {join(std::move(columns)), ad::sum_cols(join(std::move(log_dets)))};
}

nlohmann::json SplineAutoregressive::to_json() const {
  return {{"kind", kind()},
          {"dim", dim_},
          {"bins", shape_.bins},
          {"bound", shape_.bound},
          {"conditioner", conditioner_.to_json()}};
}

// ---------------------------------------------------------------------------

std::unique_ptr<Bijector> bijector_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "permutation") {
    return std::make_unique<Permutation>(j.at("perm").get<std::vector<Index>>());
  }
  const Index dim = j.at("dim").get<Index>();
  Mlp conditioner = Mlp::from_json(j.at("conditioner"));
  if (kind == "affine_coupling") return std::make_unique<AffineCoupling>(dim, std::move(conditioner));
  if (kind == "masked_affine") return std::make_unique<MaskedAffine>(dim, std::move(conditioner));
  const SplineShape shape{j.at("bins").get<Index>(), j.at("bound").get<double>()};
  if (kind == "spline_coupling") {
    return std::make_unique<SplineCoupling>(dim, shape, std::move(conditioner));
  }
  if (kind == "spline_autoregressive") {
    return std::make_unique<SplineAutoregressive>(dim, shape, std::move(conditioner));
  }
  throw ContractViolation("unknown bijector kind '" + kind + "'");
}

}  // namespace flowkit

// SPDX-License-Identifier: Apache-2.0
#include "flowkit/flows.hpp"

#include "flowkit/adam.hpp"
#include "flowkit/random.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace flowkit {

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::real_nvp: return "RealNVP";
    case Architecture::maf: return "MAF";
    case Architecture::c_rqs: return "C-RQS";
    case Architecture::a_rqs: return "A-RQS";
  }
  return "MAF";
}

Architecture architecture_from_string(const std::string& name) {
  for (auto a : {Architecture::real_nvp, Architecture::maf, Architecture::c_rqs,
                 Architecture::a_rqs}) {
    if (name == to_string(a)) return a;
  }
  throw ContractViolation("unknown architecture '" + name + "' (RealNVP, MAF, C-RQS, A-RQS)");
}

bool is_autoregressive(Architecture a) { return a == Architecture::maf || a == Architecture::a_rqs; }
bool is_spline(Architecture a) { return a == Architecture::c_rqs || a == Architecture::a_rqs; }

std::string FlowHyperparameters::hidden_label() const {
  if (hidden.empty()) return "0";
  bool uniform = true;
  for (Index w : hidden) uniform = uniform && w == hidden.front();
  if (uniform) return std::to_string(hidden.size()) + "x" + std::to_string(hidden.front());
  std::string label;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    label += (i ? "-" : "") + std::to_string(hidden[i]);
  }
  return label;
}

void FlowHyperparameters::validate() const {
  require(n_bijectors >= 1, "hyperparameters: need at least one bijector");
  for (Index w : hidden) require(w >= 1, "hyperparameters: hidden widths must be positive");
  if (is_spline(architecture)) {
    require(spline_knots >= 1 && spline_range > 0.0,
            "hyperparameters: spline needs K >= 1 and B > 0");
  }
}

nlohmann::json to_json(const FlowHyperparameters& hp) {
  return {{"architecture", to_string(hp.architecture)},
          {"n_bijectors", hp.n_bijectors},
          {"hidden", hp.hidden},
          {"spline_knots", hp.spline_knots},
          {"spline_range", hp.spline_range}};
}

FlowHyperparameters hyperparameters_from_json(const nlohmann::json& j) {
  FlowHyperparameters hp;
  hp.architecture = architecture_from_string(j.at("architecture").get<std::string>());
  hp.n_bijectors = j.at("n_bijectors").get<Index>();
  hp.hidden = j.at("hidden").get<std::vector<Index>>();
  hp.spline_knots = j.value("spline_knots", Index{8});
  hp.spline_range = j.value("spline_range", 16.0);
  hp.validate();
  return hp;
}

// ---------------------------------------------------------------------------

namespace {

Permutation autoregressive_shuffle(Index dim, std::uint64_t seed) {
  if (dim == 1) return Permutation::identity(1);
  Rng rng(seed);
  std::vector<Index> p(static_cast<std::size_t>(dim));
  std::iota(p.begin(), p.end(), Index{0});
  do {
    rng.shuffle(p.begin(), p.end());
  } while (p[0] == 0);
  return Permutation(std::move(p));
}

std::unique_ptr<Bijector> make_layer(Index dim, const FlowHyperparameters& hp, std::uint64_t seed,
                                     HeadInit init) {
  const SplineShape shape{hp.spline_knots, hp.spline_range};
  switch (hp.architecture) {
    case Architecture::real_nvp: return std::make_unique<AffineCoupling>(dim, hp.hidden, seed, init);
    case Architecture::maf: return std::make_unique<MaskedAffine>(dim, hp.hidden, seed, init);
    case Architecture::c_rqs:
      return std::make_unique<SplineCoupling>(dim, hp.hidden, shape, seed, init);
    case Architecture::a_rqs:
      return std::make_unique<SplineAutoregressive>(dim, hp.hidden, shape, seed, init);
  }
  throw ContractViolation("unknown architecture");
}

const double kLogSqrt2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

}  // namespace

FlowModel::FlowModel(Index dim, FlowHyperparameters hp, std::uint64_t seed, HeadInit head_init)
    : dim_(dim), hp_(std::move(hp)), seed_(seed), head_init_(head_init) {
  require(dim >= 1, "FlowModel: D must be >= 1");
  hp_.validate();
  require(dim >= 2 || is_autoregressive(hp_.architecture),
          "FlowModel: coupling architectures need D >= 2");
  for (Index l = 0; l < hp_.n_bijectors; ++l) {
    if (l > 0) {
      const std::uint64_t perm_seed = derive_seed(seed, {2, static_cast<std::uint64_t>(l)});
      if (is_autoregressive(hp_.architecture)) {
        chain_.push_back(std::make_unique<Permutation>(autoregressive_shuffle(dim, perm_seed)));
      } else if (l % 2 == 1) {
        chain_.push_back(std::make_unique<Permutation>(Permutation::swap_halves(dim)));
      } else {
        chain_.push_back(std::make_unique<Permutation>(Permutation::random(dim, perm_seed)));
      }
    }
    chain_.push_back(
        make_layer(dim, hp_, derive_seed(seed, {1, static_cast<std::uint64_t>(l)}), head_init));
  }
}

FlowModel FlowModel::reinitialized(std::uint64_t seed) const {
  return FlowModel(dim_, hp_, seed, head_init_);
}

FlowOutput FlowModel::generate(const Matrix& x) const {
  require(x.cols() == dim_, "generate: width mismatch");
  FlowOutput out{x, Vector::Zero(x.rows())};
  for (const auto& b : chain_) {
    FlowOutput step = b->forward(out.value);
    out.value = std::move(step.value);
    out.log_det += step.log_det;
  }
  return out;
}

GraphFlowOutput FlowModel::normalize_graph(const ad::Var& y) const {
  require(y.cols() == dim_, "normalize: width " + std::to_string(y.cols()) + " != D " +
                                std::to_string(dim_));
  ad::Var v = y;
  ad::Var log_det;
  for (auto it = chain_.rbegin(); it != chain_.rend(); ++it) {
    if (dynamic_cast<const Permutation*>(it->get()) != nullptr) {
      v = (*it)->inverse_graph(v).value;
      continue;
    }
    GraphFlowOutput step = (*it)->inverse_graph(v);
    v = step.value;
    log_det = log_det.valid() ? log_det + step.log_det : step.log_det;
  }
  if (!log_det.valid()) log_det = ad::Var::constant(Matrix::Zero(y.rows(), 1));
  return {v, log_det};
}

FlowOutput FlowModel::normalize(const Matrix& y) const {
  const GraphFlowOutput g = normalize_graph(ad::Var::constant(y));
  return {g.value.value(), g.log_det.value().col(0)};
}

ad::Var log_prob_base(const ad::Var& x) {
  return ad::sum_cols(ad::square(x)) * -0.5 - static_cast<double>(x.cols()) * kLogSqrt2Pi;
}

ad::Var FlowModel::log_prob_graph(const ad::Var& y) const {
  const GraphFlowOutput g = normalize_graph(y);
  return log_prob_base(g.value) + g.log_det;
}

Vector FlowModel::log_prob(const Matrix& y) const {
  return log_prob_graph(ad::Var::constant(y)).value().col(0);
}

ad::Var FlowModel::nll_graph(const ad::Var& y) const { return -ad::mean(log_prob_graph(y)); }

double FlowModel::nll(const Matrix& y) const {
  require(y.rows() >= 1, "nll: empty sample");
  return -log_prob(y).mean();
}

SampleBatch FlowModel::sample(Index n, std::uint64_t seed) const {
  SampleBatch base = sample_base(dim_, n, seed);
  return {generate(base.data).value, SampleSource::flow, seed};
}

std::vector<ad::Var> FlowModel::parameters() const {
  std::vector<ad::Var> params;
  for (const auto& b : chain_) {
    for (auto& p : b->parameters()) params.push_back(std::move(p));
  }
  return params;
}

std::vector<Matrix> FlowModel::parameter_values() const {
  std::vector<Matrix> values;
  for (const auto& p : parameters()) values.push_back(p.value());
  return values;
}

void FlowModel::set_parameter_values(const std::vector<Matrix>& values) {
  auto params = parameters();
  require(values.size() == params.size(), "set_parameter_values: count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(values[i].rows() == params[i].rows() && values[i].cols() == params[i].cols(),
            "set_parameter_values: shape mismatch");
    params[i].mutable_value() = values[i];
  }
}

Index FlowModel::parameter_count() const {
  Index n = 0;
  for (const auto& p : parameters()) n += p.value().size();
  return n;
}

nlohmann::json FlowModel::to_json() const {
  nlohmann::json chain = nlohmann::json::array();
  for (const auto& b : chain_) chain.push_back(b->to_json());
  return {{"format", "flowkit-model"},
          {"version", 1},
          {"tool_version", kToolVersion},
          {"dim", dim_},
          {"hyperparameters", flowkit::to_json(hp_)},
          {"init_seed", seed_},
          {"head_init", head_init_ == HeadInit::zero ? "zero" : "glorot"},
          {"base", "standard_normal"},
          {"chain", chain}};
}

FlowModel FlowModel::from_json(const nlohmann::json& j) {
  require(j.value("format", std::string{}) == "flowkit-model", "model file: unexpected format");
  require(j.value("version", 0) == 1, "model file: unsupported version");
  FlowModel m;
  m.dim_ = j.at("dim").get<Index>();
  m.hp_ = hyperparameters_from_json(j.at("hyperparameters"));
  m.seed_ = j.at("init_seed").get<std::uint64_t>();
  m.head_init_ = j.value("head_init", std::string("glorot")) == "zero" ? HeadInit::zero
                                                                      : HeadInit::glorot;
  for (const auto& b : j.at("chain")) {
    m.chain_.push_back(bijector_from_json(b));
    require(m.chain_.back()->dim() == m.dim_, "model file: layer dimension mismatch");
  }
  const auto expected = static_cast<std::size_t>(2 * m.hp_.n_bijectors - 1);
  require(m.chain_.size() == expected, "model file: chain length does not match hyperparameters");
  return m;
}

// ---------------------------------------------------------------------------

TrainConfig TrainConfig::defaults_for(Architecture a) {
  TrainConfig c;
  c.batch_size = a == Architecture::real_nvp ? 256 : 512;
  return c;
}

void TrainConfig::validate() const {
  require(max_epochs >= 1 && batch_size >= 1, "TrainConfig: epochs and batch size must be >= 1");
  require(plateau_patience >= 1 && early_stop_patience >= 1, "TrainConfig: patience must be >= 1");
  require(initial_learning_rate > 0 && plateau_factor > 0 && min_improvement > 0 &&
              nan_retry_factor > 0 && nan_retry_floor > 0,
          "TrainConfig: rates and factors must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"max_epochs", c.max_epochs},
          {"initial_learning_rate", c.initial_learning_rate},
          {"plateau_factor", c.plateau_factor},
          {"plateau_patience", c.plateau_patience},
          {"early_stop_patience", c.early_stop_patience},
          {"min_improvement", c.min_improvement},
          {"batch_size", c.batch_size},
          {"nan_retry_factor", c.nan_retry_factor},
          {"nan_retry_floor", c.nan_retry_floor},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.initial_learning_rate = j.value("initial_learning_rate", c.initial_learning_rate);
  c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.min_improvement = j.value("min_improvement", c.min_improvement);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.nan_retry_factor = j.value("nan_retry_factor", c.nan_retry_factor);
  c.nan_retry_floor = j.value("nan_retry_floor", c.nan_retry_floor);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

nlohmann::json to_json(const TrainReport& r) {
  return {{"success", r.success},
          {"failure_reason", r.failure_reason},
          {"epochs_run", r.epochs_run},
          {"best_epoch", r.best_epoch},
          {"initial_validation_loss", r.initial_validation_loss},
          {"best_validation_loss", r.best_validation_loss},
          {"final_learning_rate", r.final_learning_rate},
          {"train_curve", r.train_curve},
          {"validation_curve", r.validation_curve},
          {"learning_rate_curve", r.learning_rate_curve},
          {"training_seconds", r.training_seconds},
          {"retries", r.retries}};
}

TrainReport train_report_from_json(const nlohmann::json& j) {
  TrainReport r;
  r.success = j.at("success").get<bool>();
  r.failure_reason = j.value("failure_reason", std::string{});
  r.epochs_run = j.at("epochs_run").get<Index>();
  r.best_epoch = j.value("best_epoch", Index{0});
  r.initial_validation_loss = j.value("initial_validation_loss", 0.0);
  r.best_validation_loss = j.at("best_validation_loss").get<double>();
  r.final_learning_rate = j.value("final_learning_rate", 0.0);
  r.train_curve = j.value("train_curve", std::vector<double>{});
  r.validation_curve = j.value("validation_curve", std::vector<double>{});
  r.learning_rate_curve = j.value("learning_rate_curve", std::vector<double>{});
  r.training_seconds = j.value("training_seconds", 0.0);
  r.retries = j.value("retries", Index{0});
  return r;
}

namespace {

struct Attempt {
  bool diverged = false;
  std::string reason;
};

Attempt run_attempt(FlowModel& model, const Matrix& train_data, const Matrix& validation_data,
                    const TrainConfig& config, double learning_rate, std::uint64_t shuffle_seed,
                    TrainReport& report, const EpochCallback& on_epoch) {
  Adam optimizer(model.parameters(), learning_rate);
  Rng rng(shuffle_seed);
  const Index n = train_data.rows();
  const Index dim = train_data.cols();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});

  double best = model.nll(validation_data);
  if (!std::isfinite(best)) return {true, "non-finite validation loss at initialization"};
  report.initial_validation_loss = best;
  report.best_validation_loss = best;
  std::vector<Matrix> best_values = model.parameter_values();
  Index stale = 0;
  Index plateau = 0;

  Matrix batch;
  for (Index epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index rows = std::min(config.batch_size, n - start);
      batch.resize(rows, dim);
      for (Index r = 0; r < rows; ++r) batch.row(r) = train_data.row(order[start + r]);
      optimizer.zero_grad();
      const ad::Var loss = model.nll_graph(ad::Var::constant(batch));
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value)) {
        return {true, "non-finite training loss in epoch " + std::to_string(epoch)};
      }
      ad::backward(loss);
      if (optimizer.step() != StepStatus::ok) {
        return {true, "non-finite gradient in epoch " + std::to_string(epoch)};
      }
      loss_sum += value * static_cast<double>(rows);
    }
    const double validation = model.nll(validation_data);
    if (!std::isfinite(validation)) {
      return {true, "non-finite validation loss in epoch " + std::to_string(epoch)};
    }
    const double train_loss = loss_sum / static_cast<double>(n);
    report.epochs_run = epoch;
    report.train_curve.push_back(train_loss);
    report.validation_curve.push_back(validation);
    report.learning_rate_curve.push_back(optimizer.learning_rate());
    if (on_epoch) on_epoch({epoch, train_loss, validation, optimizer.learning_rate()});

    const bool significant = validation < best - config.min_improvement;
    if (validation < best) {
      best = validation;
      best_values = model.parameter_values();
      report.best_epoch = epoch;
      report.best_validation_loss = best;
    }
    if (significant) {
      stale = 0;
      plateau = 0;
      continue;
    }
    ++stale;
    ++plateau;
    if (stale >= config.early_stop_patience) break;
    if (plateau >= config.plateau_patience) {
      optimizer.set_learning_rate(optimizer.learning_rate() * config.plateau_factor);
      plateau = 0;
    }
  }
  model.set_parameter_values(best_values);
  report.final_learning_rate = optimizer.learning_rate();
  return {};
}

}  // namespace

TrainReport train(FlowModel& model, const Matrix& train_data, const Matrix& validation_data,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  require(train_data.cols() == model.dim() && validation_data.cols() == model.dim(),
          "train: data width must equal D");
  require(train_data.rows() >= 1 && validation_data.rows() >= 1, "train: empty data");
  require(all_finite(train_data) && all_finite(validation_data), "train: data must be finite");

  const auto start = std::chrono::steady_clock::now();
  double learning_rate = config.initial_learning_rate;
  TrainReport report;
  for (Index retry = 0;; ++retry) {
    report = TrainReport{};
    report.retries = retry;
    const std::uint64_t shuffle_seed =
        derive_seed(config.seed, SeedPurpose::replica_shuffle, static_cast<std::uint64_t>(retry));
    Attempt attempt;
    try {
      attempt = run_attempt(model, train_data, validation_data, config, learning_rate,
                            shuffle_seed, report, on_epoch);
    } catch (const SplineError& e) {
      attempt = {true, e.what()};
    }
    if (!attempt.diverged) {
      report.success = true;
      break;
    }
    learning_rate *= config.nan_retry_factor;
    if (learning_rate < config.nan_retry_floor) {
      report.success = false;
      report.failure_reason = attempt.reason + "; learning rate fell below " +
                              std::to_string(config.nan_retry_floor) + " after " +
                              std::to_string(retry + 1) + " attempts";
      report.final_learning_rate = learning_rate;
      break;
    }
    model = model.reinitialized(
        derive_seed(model.init_seed(), {0xfeedULL, static_cast<std::uint64_t>(retry + 1)}));
  }
  report.training_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace flowkit

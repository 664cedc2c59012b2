// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "flowkit/bijectors.hpp"
#include "flowkit/targets.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace flowkit {

inline constexpr const char* kToolVersion = "flowkit 0.1.0";

enum class Architecture { real_nvp, maf, c_rqs, a_rqs };

/// "RealNVP", "MAF", "C-RQS", "A-RQS".
std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& name);
bool is_autoregressive(Architecture a);
bool is_spline(Architecture a);

struct FlowHyperparameters {
  Architecture architecture = Architecture::maf;
  Index n_bijectors = 5;
  std::vector<Index> hidden{128, 128, 128};
  Index spline_knots = 8;
  double spline_range = 16.0;

  /// "3x128" when all hidden widths agree, else "64-128".
  std::string hidden_label() const;
  void validate() const;
};

nlohmann::json to_json(const FlowHyperparameters& hp);
FlowHyperparameters hyperparameters_from_json(const nlohmann::json& j);

/// A chain of bijectors over a standard-normal base. Sampling pushes base
/// draws through the chain in order; densities pull data back through it in
/// reverse.
///
/// Between consecutive coupling layers the permutation alternates between
/// swapping halves and a seeded random shuffle. Between autoregressive layers
/// it is a seeded random shuffle that never leaves the first coordinate in
/// place, so the coordinate one layer passes through is transformed by the
/// next.
class FlowModel {
 public:
  FlowModel(Index dim, FlowHyperparameters hp, std::uint64_t seed,
            HeadInit head_init = HeadInit::glorot);

  FlowModel(FlowModel&&) noexcept = default;
  FlowModel& operator=(FlowModel&&) noexcept = default;

  /// Same architecture, freshly initialized from another seed.
  FlowModel reinitialized(std::uint64_t seed) const;

  Index dim() const { return dim_; }
  const FlowHyperparameters& hyperparameters() const { return hp_; }
  std::uint64_t init_seed() const { return seed_; }
  const std::vector<std::unique_ptr<Bijector>>& chain() const { return chain_; }

  /// Base draws pushed through the generative direction.
  FlowOutput generate(const Matrix& x) const;
  /// Data pulled back to the base; log_det is that of the normalizing map.
  GraphFlowOutput normalize_graph(const ad::Var& y) const;
  FlowOutput normalize(const Matrix& y) const;

  /// log p(y) = log p_base(f(y)) + log |det J_f(y)|, as [N x 1].
  ad::Var log_prob_graph(const ad::Var& y) const;
  Vector log_prob(const Matrix& y) const;

  /// Mean negative log-likelihood, the training loss.
  ad::Var nll_graph(const ad::Var& y) const;
  double nll(const Matrix& y) const;

  SampleBatch sample(Index n, std::uint64_t seed) const;

  std::vector<ad::Var> parameters() const;
  std::vector<Matrix> parameter_values() const;
  void set_parameter_values(const std::vector<Matrix>& values);
  Index parameter_count() const;

  nlohmann::json to_json() const;
  static FlowModel from_json(const nlohmann::json& j);

 private:
  FlowModel() = default;

  Index dim_ = 0;
  FlowHyperparameters hp_;
  std::uint64_t seed_ = 0;
  HeadInit head_init_ = HeadInit::glorot;
  std::vector<std::unique_ptr<Bijector>> chain_;
};

/// Standard-normal log-density on the graph, [N x 1].
ad::Var log_prob_base(const ad::Var& x);

struct TrainConfig {
  Index max_epochs = 1000;
  double initial_learning_rate = 1e-3;
  double plateau_factor = 0.5;
  Index plateau_patience = 50;
  Index early_stop_patience = 100;
  double min_improvement = 1e-4;
  Index batch_size = 512;
  double nan_retry_factor = 1.0 / 3.0;
  double nan_retry_floor = 1e-6;
  std::uint64_t seed = 0;

  /// Batch size 256 for RealNVP, 512 otherwise.
  static TrainConfig defaults_for(Architecture a);
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochLog {
  Index epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double learning_rate = 0.0;
};

struct TrainReport {
  bool success = false;
  std::string failure_reason;
  Index epochs_run = 0;
  Index best_epoch = 0;  // 0 means the initialization was never beaten
  double initial_validation_loss = 0.0;
  double best_validation_loss = 0.0;
  double final_learning_rate = 0.0;
  std::vector<double> train_curve;
  std::vector<double> validation_curve;
  std::vector<double> learning_rate_curve;
  double training_seconds = 0.0;
  Index retries = 0;
};

nlohmann::json to_json(const TrainReport& r);
TrainReport train_report_from_json(const nlohmann::json& j);

using EpochCallback = std::function<void(const EpochLog&)>;

/// Maximum-likelihood training with Adam on shuffled minibatches. The
/// learning rate is multiplied by `plateau_factor` after `plateau_patience`
/// epochs without a validation improvement larger than `min_improvement`, and
/// training stops after `early_stop_patience` such epochs. A non-finite loss
/// restarts from a fresh initialization with the learning rate scaled by
/// `nan_retry_factor`, until it would drop below `nan_retry_floor`. The
/// parameters of the lowest-validation-loss epoch are restored at exit.
TrainReport train(FlowModel& model, const Matrix& train_data, const Matrix& validation_data,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

}  // namespace flowkit

// SPDX-License-Identifier: Apache-2.0
//
// Evaluation protocol and benchmark driver: null distributions of the test
// statistics from target-vs-target pseudo-experiments, sigma thresholds and
// p-values, repeated evaluation of trained flows, selection of the best
// hyperparameters and replicas, and report files.
#pragma once

#include "flowkit/flows.hpp"
#include "flowkit/metrics.hpp"
#include "flowkit/targets.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace flowkit {

// ---------------------------------------------------------------------------
// Null distributions

/// Confidence levels of the 1, 2 and 3 sigma rejection thresholds.
inline constexpr std::array<double, 3> kSigmaConfidence{0.68, 0.95, 0.99};

/// Empirical quantile of sorted values with linear interpolation between
/// order statistics at 1-based position n p + 1/2, clamped to the sample
/// range. For 1..10000 and p = 0.95 this is 9500.5.
double quantile(std::span<const double> sorted, double p);

struct NullDistribution {
  Statistic statistic = Statistic::ks;
  Index dim = 0;
  std::uint64_t spec_seed = 0;
  Index sample_size = 0;
  std::vector<double> values;  // scaled statistics, ascending
  std::uint64_t seed = 0;
};

/// All three statistics computed on the same pseudo-experiments.
struct NullSet {
  NullDistribution ks;
  NullDistribution swd;
  NullDistribution fn;

  const NullDistribution& get(Statistic s) const;
  NullDistribution& get(Statistic s);
};

/// One pseudo-experiment: two independent target draws of size n and a fresh
/// direction set, all derived from `seed`.
StatTriple pseudo_experiment(const CMoGSpec& spec, Index n, std::uint64_t seed);

/// Pseudo-experiment j uses derive_seed(seed, {j}).
NullDistribution build_null(Statistic statistic, const CMoGSpec& spec, Index n, Index n_pseudo,
                            std::uint64_t seed);
NullSet build_nulls(const CMoGSpec& spec, Index n, Index n_pseudo, std::uint64_t seed);

/// sigma = 1, 2 or 3.
double threshold(const NullDistribution& null, int sigma);
/// Fraction of null values >= t.
double p_value(const NullDistribution& null, double t);
/// Number of sigma thresholds that t exceeds, 0..3.
int sigma_class(const NullDistribution& null, double t);
/// "<1sigma", "1-2sigma", "2-3sigma", ">3sigma".
std::string sigma_label(int sigma_class);

nlohmann::json to_json(const NullDistribution& null);
NullDistribution null_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Model evaluation

struct TestOutcome {
  Statistic statistic = Statistic::ks;
  std::vector<double> values;  // one scaled statistic per kept repeat
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
  std::optional<double> p_value;
  std::optional<int> sigma_class;
};

/// Mean and standard deviation of `values`, and p-value and sigma class of
/// the mean when a null is given.
TestOutcome make_outcome(Statistic statistic, std::vector<double> values,
                         const NullDistribution* null = nullptr);

struct Evaluation {
  TestOutcome ks;
  TestOutcome swd;
  TestOutcome fn;
  Index repeats_requested = 0;
  Index repeats_kept = 0;
  Index non_finite_points = 0;
  double generation_seconds = 0.0;  // per repeat, averaged over kept repeats
  double metric_seconds = 0.0;      // per repeat, averaged over kept repeats

  const TestOutcome& get(Statistic s) const;
  double prediction_seconds() const { return generation_seconds + metric_seconds; }
};

/// Draws n points from whatever is being tested.
using Sampler = std::function<Matrix(Index n, std::uint64_t seed)>;

/// Repeat k draws a fresh target sample, a fresh model sample and fresh
/// directions from derive_seed(seed, SeedPurpose::evaluation, k). Model
/// points with non-finite coordinates are dropped and counted; a repeat with
/// more than 1% of them is discarded.
Evaluation evaluate_sampler(const Sampler& sampler, const CMoGSpec& spec, Index n, Index repeats,
                            std::uint64_t seed, const NullSet* nulls = nullptr);
Evaluation evaluate_model(const FlowModel& model, const CMoGSpec& spec, Index n, Index repeats,
                          std::uint64_t seed, const NullSet* nulls = nullptr);

nlohmann::json to_json(const TestOutcome& outcome);
TestOutcome test_outcome_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Evaluation& evaluation);
Evaluation evaluation_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Grid runs

struct RunConfig {
  std::uint64_t master_seed = 1;
  std::vector<Index> dims{2, 4, 8, 16};
  Index n_components = 3;
  Index n_train = 10'000;
  Index n_validation = 3'000;
  Index n_test = 10'000;
  Index n_pseudo = 1'000;
  Index replicas = 3;
  Index repeats = 5;
  std::vector<FlowHyperparameters> grid;
  /// Overrides applied to TrainConfig::defaults_for(architecture).
  std::optional<Index> max_epochs;
  std::optional<Index> batch_size;
  std::optional<double> learning_rate;
  std::filesystem::path output_dir;  // models are written here when set

  /// One point per architecture with the default hyperparameters.
  static std::vector<FlowHyperparameters> default_grid();
  /// Full-scale sample sizes and counts.
  static RunConfig full_scale();
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Stable identifier of a grid point, used for file names and seeds,
/// e.g. "A-RQS_2x3x128_K8".
std::string grid_label(const FlowHyperparameters& hp);

/// Seed of every stochastic step of a run, derived from the master seed.
/// Replica streams are keyed by the grid label, so a sub-grid reproduces the
/// corresponding part of a larger run.
struct RunSeeds {
  std::uint64_t master = 0;

  std::uint64_t target_spec(Index dim) const;
  std::uint64_t train_data(Index dim) const;
  std::uint64_t validation_data(Index dim) const;
  std::uint64_t nulls(Index dim) const;
  std::uint64_t replica_init(Index dim, const std::string& label, Index replica) const;
  std::uint64_t replica_shuffle(Index dim, const std::string& label, Index replica) const;
  std::uint64_t evaluation(Index dim, const std::string& label, Index replica) const;
};

TrainConfig train_config_for(const RunConfig& config, Architecture architecture,
                             std::uint64_t shuffle_seed);

struct ReplicaResult {
  Index replica = 0;
  std::uint64_t init_seed = 0;
  TrainReport training;
  std::optional<Evaluation> evaluation;
  std::string error;       // set when training or evaluation failed
  std::string model_file;  // relative to the output directory

  bool ok() const { return training.success && evaluation.has_value() && error.empty(); }
};

struct GridPointResult {
  Index dim = 0;
  FlowHyperparameters hp;
  std::vector<ReplicaResult> replicas;
};

/// Replica-level aggregate of one grid point. Test statistics are the mean
/// and spread across successful replicas of each replica's mean statistic.
struct GridSummary {
  Index replicas_ok = 0;
  Index replicas_failed = 0;
  TestOutcome ks;
  TestOutcome swd;
  TestOutcome fn;
  double epochs = 0.0;
  double training_seconds = 0.0;
  double generation_seconds = 0.0;
  double metric_seconds = 0.0;

  const TestOutcome& get(Statistic s) const;
};

GridSummary summarize(const GridPointResult& point, const NullSet* nulls = nullptr);

struct Selection {
  bool found = false;
  std::string reason;          // why nothing was selected
  Index average_best = -1;     // index into the grid results
  Index absolute_best = -1;    // replica index within the average-best point
  Index failed_replicas = 0;   // over all grid points considered
  std::vector<Index> no_result_points;  // grid points where every replica failed
};

/// Average best: the grid point with the lowest mean t_KS over its successful
/// replicas. Absolute best: that point's replica with the lowest mean t_KS.
/// Ties go to the earlier grid point and the lower replica index.
Selection select_best(std::span<const GridPointResult> points);

struct DimensionResult {
  Index dim = 0;
  CMoGSpec spec;
  std::optional<NullSet> nulls;
  std::vector<GridPointResult> points;
};

struct RunResults {
  RunConfig config;
  std::string tool_version = kToolVersion;
  std::vector<DimensionResult> dimensions;
};

nlohmann::json to_json(const RunResults& r);
RunResults run_results_from_json(const nlohmann::json& j);

using ProgressCallback = std::function<void(const std::string& message)>;

/// Runs the whole grid: target, data and nulls per dimension, then every
/// replica of every grid point is trained and evaluated.
RunResults run_grid(const RunConfig& config, const ProgressCallback& progress = {});

/// Loads the stored model of one replica (requires config.output_dir).
FlowModel load_replica_model(const RunResults& results, const ReplicaResult& replica);

// ---------------------------------------------------------------------------
// Reports

struct ResultRow {
  Index dim = 0;
  std::string selection;  // grid, average_best, absolute_best, reference_full_scale
  std::string hidden;
  Index n_bijectors = 0;
  std::string algorithm;
  Index spline_knots = 0;  // 0 for affine flows
  Index replica = -1;
  Index replicas_ok = 0;
  Index replicas_failed = 0;
  std::array<double, 3> mean{};  // KS, SWD, FN
  std::array<double, 3> std{};
  std::array<std::optional<double>, 3> p_value{};
  double epochs = 0.0;
  double training_seconds = 0.0;
  double generation_seconds = 0.0;
  double metric_seconds = 0.0;
};

/// One row per grid point, then the average-best and absolute-best rows of
/// each dimension, then the full-scale comparison row.
std::vector<ResultRow> results_table(const RunResults& results);

/// Reference full-scale result for 4-D A-RQS (average best), kept in the
/// table for comparison only.
ResultRow reference_row();

/// CSV of the table. Timing columns vary from run to run; leave them out to
/// compare runs.
std::string results_csv(std::span<const ResultRow> rows, bool include_timing = true);

struct Histogram1d {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<Index> counts;
};

/// Equal-width bins on [lo, hi]; the last bin is closed. Values outside are
/// not counted.
Histogram1d histogram_1d(std::span<const double> x, double lo, double hi, Index bins);

struct Histogram2d {
  double lo_x = 0.0, hi_x = 1.0, lo_y = 0.0, hi_y = 1.0;
  Index bins = 0;
  std::vector<Index> counts;  // bins x bins, row-major in x

  Index at(Index bx, Index by) const { return counts[static_cast<std::size_t>(bx * bins + by)]; }
};

Histogram2d histogram_2d(std::span<const double> x, std::span<const double> y, double lo_x,
                         double hi_x, double lo_y, double hi_y, Index bins);

/// Test and flow samples of one model, for marginal plots.
struct CornerSamples {
  Index dim = 0;
  std::string label;
  Matrix test;
  Matrix flow;
};

struct ReportOptions {
  Index histogram_bins = 40;
  /// 2-D histograms are written for all pairs among the first this many
  /// dimensions.
  Index max_pair_dims = 4;
  std::uint64_t master_seed = 0;
};

/// Writes histograms shared-range binned from both samples:
///   <dir>/<label>_test.csv, <label>_flow.csv      the samples
///   <dir>/<label>_1d.csv   dim,bin,lo,hi,test,flow
///   <dir>/<label>_2d.csv   dim_x,dim_y,bin_x,bin_y,lo_x,hi_x,lo_y,hi_y,test,flow
void write_corner_data(const CornerSamples& samples, const std::filesystem::path& dir,
                       const ReportOptions& options);

/// Writes results.csv, summary.json and corner/ into `dir`. Corner data are
/// drawn from each dimension's absolute-best model when models were stored.
void emit_report(const RunResults& results, const std::filesystem::path& dir,
                 const ReportOptions& options = {});

/// Throws std::runtime_error naming the path when it cannot be written.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace flowkit

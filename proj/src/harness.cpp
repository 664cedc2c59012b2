// SPDX-License-Identifier: Apache-2.0
#include "flowkit/harness.hpp"

#include "flowkit/random.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace flowkit {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string format_double(double v) {
  if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

std::uint64_t label_key(const std::string& label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Null distributions

double quantile(std::span<const double> sorted, double p) {
  require(!sorted.empty(), "quantile: empty sample");
  require(p >= 0.0 && p <= 1.0, "quantile: level must lie in [0, 1]");
  const auto n = static_cast<double>(sorted.size());
  const double h = std::clamp(n * p + 0.5, 1.0, n);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const double frac = h - static_cast<double>(lo);
  if (lo >= sorted.size()) return sorted.back();
  return sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1]);
}

const NullDistribution& NullSet::get(Statistic s) const {
  switch (s) {
    case Statistic::ks: return ks;
    case Statistic::swd: return swd;
    case Statistic::fn: return fn;
  }
  return ks;
}

NullDistribution& NullSet::get(Statistic s) {
  return const_cast<NullDistribution&>(std::as_const(*this).get(s));
}

StatTriple pseudo_experiment(const CMoGSpec& spec, Index n, std::uint64_t seed) {
  const Matrix y = sample_cmog(spec, n, derive_seed(seed, SeedPurpose::target_sample, 0)).data;
  const Matrix z = sample_cmog(spec, n, derive_seed(seed, SeedPurpose::target_sample, 1)).data;
  const DirectionSet dirs = sample_directions(spec.dim, derive_seed(seed, SeedPurpose::directions));
  return all_statistics(y, z, dirs);
}

NullDistribution build_null(Statistic statistic, const CMoGSpec& spec, Index n, Index n_pseudo,
                            std::uint64_t seed) {
  return build_nulls(spec, n, n_pseudo, seed).get(statistic);
}

NullSet build_nulls(const CMoGSpec& spec, Index n, Index n_pseudo, std::uint64_t seed) {
  spec.validate();
  require(n >= 2, "build_null: sample size must be >= 2");
  require(n_pseudo >= 100, "build_null: n_pseudo must be >= 100, got " + std::to_string(n_pseudo));
  NullSet set;
  for (Statistic s : kAllStatistics) {
    NullDistribution& null = set.get(s);
    null.statistic = s;
    null.dim = spec.dim;
    null.spec_seed = spec.seed;
    null.sample_size = n;
    null.seed = seed;
    null.values.reserve(static_cast<std::size_t>(n_pseudo));
  }
  for (Index j = 0; j < n_pseudo; ++j) {
    const StatTriple t = pseudo_experiment(spec, n, derive_seed(seed, {static_cast<std::uint64_t>(j)}));
    for (Statistic s : kAllStatistics) set.get(s).values.push_back(t.get(s).scaled);
  }
  for (Statistic s : kAllStatistics) {
    auto& v = set.get(s).values;
    std::sort(v.begin(), v.end());
  }
  return set;
}

double threshold(const NullDistribution& null, int sigma) {
  require(sigma >= 1 && sigma <= 3, "threshold: sigma must be 1, 2 or 3");
  return quantile(null.values, kSigmaConfidence[static_cast<std::size_t>(sigma - 1)]);
}

double p_value(const NullDistribution& null, double t) {
  require(!null.values.empty(), "p_value: empty null distribution");
  const auto first = std::lower_bound(null.values.begin(), null.values.end(), t);
  return static_cast<double>(null.values.end() - first) / static_cast<double>(null.values.size());
}

int sigma_class(const NullDistribution& null, double t) {
  int level = 0;
  for (int s = 1; s <= 3; ++s) {
    if (t > threshold(null, s)) level = s;
  }
  return level;
}

std::string sigma_label(int sigma_class) {
  switch (sigma_class) {
    case 0: return "<1sigma";
    case 1: return "1-2sigma";
    case 2: return "2-3sigma";
    default: return ">3sigma";
  }
}

nlohmann::json to_json(const NullDistribution& null) {
  return {{"format", "flowkit-null"},
          {"version", 1},
          {"tool_version", kToolVersion},
          {"statistic", to_string(null.statistic)},
          {"dim", null.dim},
          {"spec_seed", null.spec_seed},
          {"sample_size", null.sample_size},
          {"n_pseudo", null.values.size()},
          {"seed", null.seed},
          {"thresholds",
           {{"1sigma", threshold(null, 1)},
            {"2sigma", threshold(null, 2)},
            {"3sigma", threshold(null, 3)}}},
          {"values", null.values}};
}

NullDistribution null_from_json(const nlohmann::json& j) {
  require(j.value("format", "") == "flowkit-null", "not a flowkit null distribution file");
  NullDistribution null;
  null.statistic = statistic_from_string(j.at("statistic").get<std::string>());
  null.dim = j.at("dim").get<Index>();
  null.spec_seed = j.at("spec_seed").get<std::uint64_t>();
  null.sample_size = j.at("sample_size").get<Index>();
  null.seed = j.at("seed").get<std::uint64_t>();
  null.values = j.at("values").get<std::vector<double>>();
  require(!null.values.empty(), "null distribution has no values");
  require(std::is_sorted(null.values.begin(), null.values.end()),
          "null distribution values must be sorted");
  return null;
}

// ---------------------------------------------------------------------------
// Model evaluation

TestOutcome make_outcome(Statistic statistic, std::vector<double> values,
                         const NullDistribution* null) {
  TestOutcome out;
  out.statistic = statistic;
  out.values = std::move(values);
  const auto n = static_cast<double>(out.values.size());
  if (out.values.empty()) {
    out.mean = std::numeric_limits<double>::quiet_NaN();
    out.std = std::numeric_limits<double>::quiet_NaN();
    return out;
  }
  out.mean = std::accumulate(out.values.begin(), out.values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : out.values) ss += (v - out.mean) * (v - out.mean);
  out.std = out.values.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  if (null != nullptr) {
    require(null->statistic == statistic, "make_outcome: null is for a different statistic");
    out.p_value = p_value(*null, out.mean);
    out.sigma_class = sigma_class(*null, out.mean);
  }
  return out;
}

const TestOutcome& Evaluation::get(Statistic s) const {
  switch (s) {
    case Statistic::ks: return ks;
    case Statistic::swd: return swd;
    case Statistic::fn: return fn;
  }
  return ks;
}

Evaluation evaluate_sampler(const Sampler& sampler, const CMoGSpec& spec, Index n, Index repeats,
                            std::uint64_t seed, const NullSet* nulls) {
  spec.validate();
  require(n >= 2 && repeats >= 1, "evaluate: need n >= 2 and repeats >= 1");
  Evaluation ev;
  ev.repeats_requested = repeats;
  std::array<std::vector<double>, 3> values;
  double generation = 0.0;
  double metric = 0.0;
  for (Index k = 0; k < repeats; ++k) {
    const std::uint64_t rs = derive_seed(seed, SeedPurpose::evaluation, static_cast<std::uint64_t>(k));
    const Matrix target = sample_cmog(spec, n, derive_seed(rs, SeedPurpose::target_sample)).data;

    auto start = Clock::now();
    Matrix flow = sampler(n, derive_seed(rs, SeedPurpose::flow_sample));
    const double gen_seconds = seconds_since(start);
    require(flow.cols() == spec.dim, "evaluate: sampler returned the wrong width");

    std::vector<Index> finite_rows;
    finite_rows.reserve(static_cast<std::size_t>(flow.rows()));
    for (Index r = 0; r < flow.rows(); ++r) {
      if (flow.row(r).allFinite()) finite_rows.push_back(r);
    }
    const Index bad = flow.rows() - static_cast<Index>(finite_rows.size());
    ev.non_finite_points += bad;
    if (bad * 100 > flow.rows()) continue;
    if (bad > 0) flow = Matrix(flow(finite_rows, Eigen::all));

    start = Clock::now();
    const DirectionSet dirs = sample_directions(spec.dim, derive_seed(rs, SeedPurpose::directions));
    const StatTriple t = all_statistics(flow, target, dirs);
    metric += seconds_since(start);
    generation += gen_seconds;
    for (std::size_t s = 0; s < 3; ++s) values[s].push_back(t.get(kAllStatistics[s]).scaled);
    ++ev.repeats_kept;
  }
  for (std::size_t s = 0; s < 3; ++s) {
    const Statistic stat = kAllStatistics[s];
    const NullDistribution* null = nulls != nullptr ? &nulls->get(stat) : nullptr;
    TestOutcome outcome = make_outcome(stat, std::move(values[s]), null);
    (s == 0 ? ev.ks : s == 1 ? ev.swd : ev.fn) = std::move(outcome);
  }
  if (ev.repeats_kept > 0) {
    generation /= static_cast<double>(ev.repeats_kept);
    metric /= static_cast<double>(ev.repeats_kept);
  }
  ev.generation_seconds = generation;
  ev.metric_seconds = metric;
  return ev;
}

Evaluation evaluate_model(const FlowModel& model, const CMoGSpec& spec, Index n, Index repeats,
                          std::uint64_t seed, const NullSet* nulls) {
  require(model.dim() == spec.dim, "evaluate_model: model and target dimensions differ");
  return evaluate_sampler(
      [&model](Index count, std::uint64_t s) { return model.sample(count, s).data; }, spec, n,
      repeats, seed, nulls);
}

nlohmann::json to_json(const TestOutcome& o) {
  nlohmann::json j{{"statistic", to_string(o.statistic)},
                   {"values", o.values},
                   {"mean", o.values.empty() ? nlohmann::json(nullptr) : nlohmann::json(o.mean)},
                   {"std", o.values.empty() ? nlohmann::json(nullptr) : nlohmann::json(o.std)}};
  j["p_value"] = o.p_value ? nlohmann::json(*o.p_value) : nlohmann::json(nullptr);
  j["sigma_class"] = o.sigma_class ? nlohmann::json(*o.sigma_class) : nlohmann::json(nullptr);
  if (o.sigma_class) j["sigma_label"] = sigma_label(*o.sigma_class);
  return j;
}

TestOutcome test_outcome_from_json(const nlohmann::json& j) {
  TestOutcome o = make_outcome(statistic_from_string(j.at("statistic").get<std::string>()),
                               j.at("values").get<std::vector<double>>());
  if (!j.at("p_value").is_null()) o.p_value = j.at("p_value").get<double>();
  if (!j.at("sigma_class").is_null()) o.sigma_class = j.at("sigma_class").get<int>();
  return o;
}

nlohmann::json to_json(const Evaluation& e) {
  return {{"ks", to_json(e.ks)},
          {"swd", to_json(e.swd)},
          {"fn", to_json(e.fn)},
          {"repeats_requested", e.repeats_requested},
          {"repeats_kept", e.repeats_kept},
          {"non_finite_points", e.non_finite_points},
          {"generation_seconds", e.generation_seconds},
          {"metric_seconds", e.metric_seconds}};
}

Evaluation evaluation_from_json(const nlohmann::json& j) {
  Evaluation e;
  e.ks = test_outcome_from_json(j.at("ks"));
  e.swd = test_outcome_from_json(j.at("swd"));
  e.fn = test_outcome_from_json(j.at("fn"));
  e.repeats_requested = j.at("repeats_requested").get<Index>();
  e.repeats_kept = j.at("repeats_kept").get<Index>();
  e.non_finite_points = j.at("non_finite_points").get<Index>();
  e.generation_seconds = j.at("generation_seconds").get<double>();
  e.metric_seconds = j.at("metric_seconds").get<double>();
  return e;
}

// ---------------------------------------------------------------------------
// Grid runs

std::vector<FlowHyperparameters> RunConfig::default_grid() {
  std::vector<FlowHyperparameters> grid;
  for (Architecture a : {Architecture::maf, Architecture::real_nvp, Architecture::a_rqs,
                         Architecture::c_rqs}) {
    FlowHyperparameters hp;
    hp.architecture = a;
    hp.n_bijectors = a == Architecture::a_rqs ? 2 : 5;
    grid.push_back(hp);
  }
  return grid;
}

RunConfig RunConfig::full_scale() {
  RunConfig c;
  c.dims = {4, 8, 16, 32, 64, 100, 200, 400};
  c.n_train = 100'000;
  c.n_validation = 30'000;
  c.n_test = 100'000;
  c.n_pseudo = 10'000;
  c.replicas = 10;
  c.repeats = 10;
  for (Architecture a : {Architecture::maf, Architecture::real_nvp, Architecture::a_rqs,
                         Architecture::c_rqs}) {
    for (Index hidden : {128, 256}) {
      for (Index bijectors : {5, 10}) {
        if (a == Architecture::a_rqs && bijectors != 5) continue;
        for (Index knots : {8, 12}) {
          if (!is_spline(a) && knots != 8) continue;
          FlowHyperparameters hp;
          hp.architecture = a;
          hp.n_bijectors = a == Architecture::a_rqs ? 2 : bijectors;
          hp.hidden = {hidden, hidden, hidden};
          hp.spline_knots = knots;
          c.grid.push_back(hp);
        }
      }
    }
  }
  return c;
}

void RunConfig::validate() const {
  require(!dims.empty(), "RunConfig: no dimensions");
  for (Index d : dims) require(d >= 1, "RunConfig: dimensions must be >= 1");
  require(n_components >= 1, "RunConfig: n_components must be >= 1");
  require(n_train >= 1 && n_validation >= 1 && n_test >= 2, "RunConfig: sample sizes too small");
  require(n_pseudo >= 100, "RunConfig: n_pseudo must be >= 100");
  require(replicas >= 1 && repeats >= 1, "RunConfig: replicas and repeats must be >= 1");
  require(!grid.empty(), "RunConfig: empty hyperparameter grid");
  for (const auto& hp : grid) hp.validate();
  if (max_epochs) require(*max_epochs >= 1, "RunConfig: max_epochs must be >= 1");
  if (batch_size) require(*batch_size >= 1, "RunConfig: batch_size must be >= 1");
  if (learning_rate) require(*learning_rate > 0, "RunConfig: learning_rate must be > 0");
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json grid = nlohmann::json::array();
  for (const auto& hp : c.grid) grid.push_back(to_json(hp));
  nlohmann::json j{{"master_seed", c.master_seed},
                   {"dims", c.dims},
                   {"n_components", c.n_components},
                   {"n_train", c.n_train},
                   {"n_validation", c.n_validation},
                   {"n_test", c.n_test},
                   {"n_pseudo", c.n_pseudo},
                   {"replicas", c.replicas},
                   {"repeats", c.repeats},
                   {"grid", grid},
                   {"output_dir", c.output_dir.string()}};
  if (c.max_epochs) j["max_epochs"] = *c.max_epochs;
  if (c.batch_size) j["batch_size"] = *c.batch_size;
  if (c.learning_rate) j["learning_rate"] = *c.learning_rate;
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.master_seed = j.value("master_seed", c.master_seed);
  c.dims = j.value("dims", c.dims);
  c.n_components = j.value("n_components", c.n_components);
  c.n_train = j.value("n_train", c.n_train);
  c.n_validation = j.value("n_validation", c.n_validation);
  c.n_test = j.value("n_test", c.n_test);
  c.n_pseudo = j.value("n_pseudo", c.n_pseudo);
  c.replicas = j.value("replicas", c.replicas);
  c.repeats = j.value("repeats", c.repeats);
  if (j.contains("grid")) {
    for (const auto& g : j.at("grid")) c.grid.push_back(hyperparameters_from_json(g));
  } else {
    c.grid = RunConfig::default_grid();
  }
  if (j.contains("max_epochs")) c.max_epochs = j.at("max_epochs").get<Index>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<Index>();
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  c.output_dir = j.value("output_dir", std::string());
  c.validate();
  return c;
}

std::string grid_label(const FlowHyperparameters& hp) {
  std::string label = to_string(hp.architecture) + "_" + std::to_string(hp.n_bijectors) + "x" +
                      hp.hidden_label();
  if (is_spline(hp.architecture)) {
    label += "_K" + std::to_string(hp.spline_knots);
    if (hp.spline_range != 16.0) label += "_B" + format_double(hp.spline_range);
  }
  return label;
}

namespace {

std::uint64_t u(Index i) { return static_cast<std::uint64_t>(i); }
std::uint64_t u(SeedPurpose p) { return static_cast<std::uint64_t>(p); }

}  // namespace

std::uint64_t RunSeeds::target_spec(Index dim) const {
  return derive_seed(master, SeedPurpose::target_spec, u(dim));
}
std::uint64_t RunSeeds::train_data(Index dim) const {
  return derive_seed(master, SeedPurpose::train_data, u(dim));
}
std::uint64_t RunSeeds::validation_data(Index dim) const {
  return derive_seed(master, SeedPurpose::validation_data, u(dim));
}
std::uint64_t RunSeeds::nulls(Index dim) const {
  return derive_seed(master, SeedPurpose::pseudo_experiment, u(dim));
}
std::uint64_t RunSeeds::replica_init(Index dim, const std::string& label, Index replica) const {
  return derive_seed(master, {u(SeedPurpose::replica_init), u(dim), label_key(label), u(replica)});
}
std::uint64_t RunSeeds::replica_shuffle(Index dim, const std::string& label, Index replica) const {
  return derive_seed(master,
                     {u(SeedPurpose::replica_shuffle), u(dim), label_key(label), u(replica)});
}
std::uint64_t RunSeeds::evaluation(Index dim, const std::string& label, Index replica) const {
  return derive_seed(master, {u(SeedPurpose::evaluation), u(dim), label_key(label), u(replica)});
}

TrainConfig train_config_for(const RunConfig& config, Architecture architecture,
                             std::uint64_t shuffle_seed) {
  TrainConfig tc = TrainConfig::defaults_for(architecture);
  if (config.max_epochs) tc.max_epochs = *config.max_epochs;
  if (config.batch_size) tc.batch_size = *config.batch_size;
  if (config.learning_rate) tc.initial_learning_rate = *config.learning_rate;
  tc.seed = shuffle_seed;
  return tc;
}

const TestOutcome& GridSummary::get(Statistic s) const {
  switch (s) {
    case Statistic::ks: return ks;
    case Statistic::swd: return swd;
    case Statistic::fn: return fn;
  }
  return ks;
}

GridSummary summarize(const GridPointResult& point, const NullSet* nulls) {
  GridSummary g;
  std::array<std::vector<double>, 3> means;
  for (const auto& r : point.replicas) {
    if (!r.ok() || r.evaluation->repeats_kept == 0) {
      ++g.replicas_failed;
      continue;
    }
    ++g.replicas_ok;
    for (std::size_t s = 0; s < 3; ++s) {
      means[s].push_back(r.evaluation->get(kAllStatistics[s]).mean);
    }
    g.epochs += static_cast<double>(r.training.epochs_run);
    g.training_seconds += r.training.training_seconds;
    g.generation_seconds += r.evaluation->generation_seconds;
    g.metric_seconds += r.evaluation->metric_seconds;
  }
  if (g.replicas_ok > 0) {
    const auto n = static_cast<double>(g.replicas_ok);
    g.epochs /= n;
    g.training_seconds /= n;
    g.generation_seconds /= n;
    g.metric_seconds /= n;
  }
  for (std::size_t s = 0; s < 3; ++s) {
    const Statistic stat = kAllStatistics[s];
    TestOutcome o = make_outcome(stat, std::move(means[s]),
                                 nulls != nullptr ? &nulls->get(stat) : nullptr);
    (s == 0 ? g.ks : s == 1 ? g.swd : g.fn) = std::move(o);
  }
  return g;
}

Selection select_best(std::span<const GridPointResult> points) {
  Selection sel;
  double best_mean = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < points.size(); ++i) {
    const GridSummary g = summarize(points[i]);
    sel.failed_replicas += g.replicas_failed;
    if (g.replicas_ok == 0) {
      sel.no_result_points.push_back(static_cast<Index>(i));
      continue;
    }
    if (g.ks.mean < best_mean) {
      best_mean = g.ks.mean;
      sel.average_best = static_cast<Index>(i);
    }
  }
  if (sel.average_best < 0) {
    sel.reason = points.empty() ? "no grid points" : "every replica of every grid point failed";
    return sel;
  }
  sel.found = true;
  double best_replica = std::numeric_limits<double>::infinity();
  const auto& replicas = points[static_cast<std::size_t>(sel.average_best)].replicas;
  for (std::size_t r = 0; r < replicas.size(); ++r) {
    if (!replicas[r].ok() || replicas[r].evaluation->repeats_kept == 0) continue;
    const double m = replicas[r].evaluation->ks.mean;
    if (sel.absolute_best < 0 || m < best_replica ||
        (m == best_replica && replicas[r].replica < replicas[u(sel.absolute_best)].replica)) {
      best_replica = m;
      sel.absolute_best = static_cast<Index>(r);
    }
  }
  return sel;
}

namespace {

nlohmann::json to_json(const ReplicaResult& r) {
  nlohmann::json j{{"replica", r.replica},
                   {"init_seed", r.init_seed},
                   {"training", to_json(r.training)},
                   {"error", r.error},
                   {"model_file", r.model_file}};
  j["evaluation"] = r.evaluation ? to_json(*r.evaluation) : nlohmann::json(nullptr);
  return j;
}

ReplicaResult replica_from_json(const nlohmann::json& j) {
  ReplicaResult r;
  r.replica = j.at("replica").get<Index>();
  r.init_seed = j.at("init_seed").get<std::uint64_t>();
  r.training = train_report_from_json(j.at("training"));
  r.error = j.value("error", std::string());
  r.model_file = j.value("model_file", std::string());
  if (!j.at("evaluation").is_null()) r.evaluation = evaluation_from_json(j.at("evaluation"));
  return r;
}

NullSet nulls_from_json(const nlohmann::json& j) {
  NullSet set;
  for (Statistic s : kAllStatistics) set.get(s) = null_from_json(j.at(to_string(s)));
  return set;
}

}  // namespace

nlohmann::json to_json(const RunResults& r) {
  nlohmann::json dims = nlohmann::json::array();
  for (const auto& d : r.dimensions) {
    nlohmann::json points = nlohmann::json::array();
    for (const auto& p : d.points) {
      nlohmann::json replicas = nlohmann::json::array();
      for (const auto& rep : p.replicas) replicas.push_back(to_json(rep));
      points.push_back({{"dim", p.dim}, {"hyperparameters", to_json(p.hp)}, {"replicas", replicas}});
    }
    nlohmann::json dj{{"dim", d.dim}, {"spec", to_json(d.spec)}, {"points", points}};
    if (d.nulls) {
      nlohmann::json nj;
      for (Statistic s : kAllStatistics) nj[to_string(s)] = to_json(d.nulls->get(s));
      dj["nulls"] = nj;
    }
    dims.push_back(dj);
  }
  return {{"format", "flowkit-run"},
          {"version", 1},
          {"tool_version", r.tool_version},
          {"master_seed", r.config.master_seed},
          {"config", to_json(r.config)},
          {"dimensions", dims}};
}

RunResults run_results_from_json(const nlohmann::json& j) {
  require(j.value("format", "") == "flowkit-run", "not a flowkit run file");
  RunResults r;
  r.tool_version = j.value("tool_version", std::string(kToolVersion));
  r.config = run_config_from_json(j.at("config"));
  for (const auto& dj : j.at("dimensions")) {
    DimensionResult d;
    d.dim = dj.at("dim").get<Index>();
    d.spec = cmog_from_json(dj.at("spec"));
    if (dj.contains("nulls")) d.nulls = nulls_from_json(dj.at("nulls"));
    for (const auto& pj : dj.at("points")) {
      GridPointResult p;
      p.dim = pj.at("dim").get<Index>();
      p.hp = hyperparameters_from_json(pj.at("hyperparameters"));
      for (const auto& rj : pj.at("replicas")) p.replicas.push_back(replica_from_json(rj));
      d.points.push_back(std::move(p));
    }
    r.dimensions.push_back(std::move(d));
  }
  return r;
}

RunResults run_grid(const RunConfig& config, const ProgressCallback& progress) {
  config.validate();
  const auto say = [&](const std::string& m) {
    if (progress) progress(m);
  };
  const RunSeeds seeds{config.master_seed};
  RunResults results;
  results.config = config;
  for (Index dim : config.dims) {
    DimensionResult d;
    d.dim = dim;
    d.spec = make_cmog(dim, config.n_components, seeds.target_spec(dim));
    const Matrix train_data = sample_cmog(d.spec, config.n_train, seeds.train_data(dim)).data;
    const Matrix validation_data =
        sample_cmog(d.spec, config.n_validation, seeds.validation_data(dim)).data;
    say("D=" + std::to_string(dim) + ": building null distributions");
    d.nulls = build_nulls(d.spec, config.n_test, config.n_pseudo, seeds.nulls(dim));

    for (const auto& hp : config.grid) {
      GridPointResult point;
      point.dim = dim;
      point.hp = hp;
      const std::string label = grid_label(hp);
      for (Index r = 0; r < config.replicas; ++r) {
        ReplicaResult rep;
        rep.replica = r;
        rep.init_seed = seeds.replica_init(dim, label, r);
        say("D=" + std::to_string(dim) + " " + label + " replica " + std::to_string(r));
        try {
          FlowModel model(dim, hp, rep.init_seed);
          const TrainConfig tc =
              train_config_for(config, hp.architecture, seeds.replica_shuffle(dim, label, r));
          rep.training = train(model, train_data, validation_data, tc);
          if (!config.output_dir.empty()) {
            rep.model_file = "models/D" + std::to_string(dim) + "/" + label + "/replica_" +
                             std::to_string(r) + ".json";
            const auto path = config.output_dir / rep.model_file;
            std::filesystem::create_directories(path.parent_path());
            nlohmann::json mj = model.to_json();
            mj["master_seed"] = config.master_seed;
            mj["training"] = to_json(rep.training);
            write_text_file(path, mj.dump());
          }
          if (rep.training.success) {
            rep.evaluation = evaluate_model(model, d.spec, config.n_test, config.repeats,
                                            seeds.evaluation(dim, label, r), &*d.nulls);
            if (rep.evaluation->repeats_kept == 0) {
              rep.error = "every evaluation repeat had more than 1% non-finite points";
            }
          } else {
            rep.error = rep.training.failure_reason;
          }
        } catch (const std::exception& e) {
          rep.error = e.what();
        }
        point.replicas.push_back(std::move(rep));
      }
      d.points.push_back(std::move(point));
    }
    results.dimensions.push_back(std::move(d));
  }
  return results;
}

FlowModel load_replica_model(const RunResults& results, const ReplicaResult& replica) {
  require(!results.config.output_dir.empty() && !replica.model_file.empty(),
          "no stored model for this replica");
  return FlowModel::from_json(
      nlohmann::json::parse(read_text_file(results.config.output_dir / replica.model_file)));
}

// ---------------------------------------------------------------------------
// Reports

namespace {

ResultRow row_skeleton(Index dim, const FlowHyperparameters& hp, std::string selection) {
  ResultRow row;
  row.dim = dim;
  row.selection = std::move(selection);
  row.hidden = hp.hidden_label();
  row.n_bijectors = hp.n_bijectors;
  row.algorithm = to_string(hp.architecture);
  row.spline_knots = is_spline(hp.architecture) ? hp.spline_knots : 0;
  return row;
}

template <typename Outcomes>
void fill_statistics(ResultRow& row, const Outcomes& o) {
  for (std::size_t s = 0; s < 3; ++s) {
    const TestOutcome& t = o.get(kAllStatistics[s]);
    row.mean[s] = t.mean;
    row.std[s] = t.std;
    row.p_value[s] = t.p_value;
  }
}

ResultRow summary_row(const DimensionResult& d, const GridPointResult& p, std::string selection) {
  const GridSummary g = summarize(p, d.nulls ? &*d.nulls : nullptr);
  ResultRow row = row_skeleton(d.dim, p.hp, std::move(selection));
  row.replicas_ok = g.replicas_ok;
  row.replicas_failed = g.replicas_failed;
  fill_statistics(row, g);
  row.epochs = g.epochs;
  row.training_seconds = g.training_seconds;
  row.generation_seconds = g.generation_seconds;
  row.metric_seconds = g.metric_seconds;
  return row;
}

}  // namespace

ResultRow reference_row() {
  FlowHyperparameters hp;
  hp.architecture = Architecture::a_rqs;
  hp.n_bijectors = 2;
  hp.spline_knots = 8;
  ResultRow row = row_skeleton(4, hp, "reference_full_scale");
  row.replicas_ok = 10;
  row.mean = {1.2, 2.6, 0.7};
  row.std = {0.1, 0.4, 0.2};
  row.epochs = 670;
  row.training_seconds = 7606;
  row.generation_seconds = std::numeric_limits<double>::quiet_NaN();
  row.metric_seconds = std::numeric_limits<double>::quiet_NaN();
  return row;
}

std::vector<ResultRow> results_table(const RunResults& results) {
  std::vector<ResultRow> rows;
  for (const auto& d : results.dimensions) {
    for (const auto& p : d.points) rows.push_back(summary_row(d, p, "grid"));
  }
  for (const auto& d : results.dimensions) {
    const Selection sel = select_best(d.points);
    if (!sel.found) continue;
    const auto& point = d.points[u(sel.average_best)];
    rows.push_back(summary_row(d, point, "average_best"));

    const ReplicaResult& rep = point.replicas[u(sel.absolute_best)];
    ResultRow row = row_skeleton(d.dim, point.hp, "absolute_best");
    row.replica = rep.replica;
    row.replicas_ok = 1;
    fill_statistics(row, *rep.evaluation);
    row.epochs = static_cast<double>(rep.training.epochs_run);
    row.training_seconds = rep.training.training_seconds;
    row.generation_seconds = rep.evaluation->generation_seconds;
    row.metric_seconds = rep.evaluation->metric_seconds;
    rows.push_back(row);
  }
  rows.push_back(reference_row());
  return rows;
}

std::string results_csv(std::span<const ResultRow> rows, bool include_timing) {
  std::ostringstream out;
  out << "dim,selection,hidden_layers,n_bijectors,algorithm,spline_knots,replica,replicas_ok,"
         "replicas_failed,ks_mean,ks_std,ks_p_value,swd_mean,swd_std,swd_p_value,fn_mean,fn_std,"
         "fn_p_value,epochs";
  if (include_timing) out << ",training_seconds,generation_seconds,metric_seconds,prediction_seconds";
  out << '\n';
  const auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : ""; };
  for (const auto& r : rows) {
    out << r.dim << ',' << r.selection << ',' << r.hidden << ',' << r.n_bijectors << ','
        << r.algorithm << ',' << (r.spline_knots > 0 ? std::to_string(r.spline_knots) : "--")
        << ',' << (r.replica >= 0 ? std::to_string(r.replica) : "") << ',' << r.replicas_ok << ','
        << r.replicas_failed;
    for (std::size_t s = 0; s < 3; ++s) {
      out << ',' << format_double(r.mean[s]) << ',' << format_double(r.std[s]) << ','
          << opt(r.p_value[s]);
    }
    out << ',' << format_double(r.epochs);
    if (include_timing) {
      out << ',' << format_double(r.training_seconds) << ',' << format_double(r.generation_seconds)
          << ',' << format_double(r.metric_seconds) << ','
          << format_double(r.generation_seconds + r.metric_seconds);
    }
    out << '\n';
  }
  return out.str();
}

Histogram1d histogram_1d(std::span<const double> x, double lo, double hi, Index bins) {
  require(bins >= 1 && hi > lo, "histogram: need bins >= 1 and hi > lo");
  Histogram1d h{lo, hi, std::vector<Index>(u(bins), 0)};
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : x) {
    if (!(v >= lo && v <= hi)) continue;
    auto b = static_cast<Index>((v - lo) / width);
    h.counts[u(std::min(b, bins - 1))]++;
  }
  return h;
}

Histogram2d histogram_2d(std::span<const double> x, std::span<const double> y, double lo_x,
                         double hi_x, double lo_y, double hi_y, Index bins) {
  require(x.size() == y.size(), "histogram_2d: coordinate lengths differ");
  require(bins >= 1 && hi_x > lo_x && hi_y > lo_y, "histogram: need bins >= 1 and hi > lo");
  Histogram2d h{lo_x, hi_x, lo_y, hi_y, bins, std::vector<Index>(u(bins * bins), 0)};
  const double wx = (hi_x - lo_x) / static_cast<double>(bins);
  const double wy = (hi_y - lo_y) / static_cast<double>(bins);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] >= lo_x && x[i] <= hi_x && y[i] >= lo_y && y[i] <= hi_y)) continue;
    const Index bx = std::min(static_cast<Index>((x[i] - lo_x) / wx), bins - 1);
    const Index by = std::min(static_cast<Index>((y[i] - lo_y) / wy), bins - 1);
    h.counts[u(bx * bins + by)]++;
  }
  return h;
}

namespace {

std::vector<double> finite_column(const Matrix& m, Index c) {
  std::vector<double> v;
  v.reserve(u(m.rows()));
  for (Index r = 0; r < m.rows(); ++r) {
    if (m.row(r).allFinite()) v.push_back(m(r, c));
  }
  return v;
}

std::pair<double, double> shared_range(const std::vector<double>& a, const std::vector<double>& b) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto* v : {&a, &b}) {
    for (double x : *v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  if (!(hi > lo)) {
    lo = std::isfinite(lo) ? lo - 0.5 : 0.0;
    hi = lo + 1.0;
  }
  return {lo, hi};
}

std::string samples_csv(const Matrix& m) {
  std::ostringstream out;
  write_csv(out, m);
  return out.str();
}

}  // namespace

void write_corner_data(const CornerSamples& samples, const std::filesystem::path& dir,
                       const ReportOptions& options) {
  require(samples.test.cols() == samples.dim && samples.flow.cols() == samples.dim,
          "corner data: sample widths must equal D");
  std::filesystem::create_directories(dir);
  write_text_file(dir / (samples.label + "_test.csv"), samples_csv(samples.test));
  write_text_file(dir / (samples.label + "_flow.csv"), samples_csv(samples.flow));

  const Index bins = options.histogram_bins;
  std::vector<std::vector<double>> test_cols, flow_cols;
  std::vector<std::pair<double, double>> ranges;
  for (Index c = 0; c < samples.dim; ++c) {
    test_cols.push_back(finite_column(samples.test, c));
    flow_cols.push_back(finite_column(samples.flow, c));
    ranges.push_back(shared_range(test_cols.back(), flow_cols.back()));
  }

  std::ostringstream one;
  one << "dim,bin,lo,hi,test,flow\n";
  for (Index c = 0; c < samples.dim; ++c) {
    const auto [lo, hi] = ranges[u(c)];
    const Histogram1d ht = histogram_1d(test_cols[u(c)], lo, hi, bins);
    const Histogram1d hf = histogram_1d(flow_cols[u(c)], lo, hi, bins);
    const double w = (hi - lo) / static_cast<double>(bins);
    for (Index b = 0; b < bins; ++b) {
      one << c << ',' << b << ',' << format_double(lo + w * static_cast<double>(b)) << ','
          << format_double(b + 1 == bins ? hi : lo + w * static_cast<double>(b + 1)) << ','
          << ht.counts[u(b)] << ',' << hf.counts[u(b)] << '\n';
    }
  }
  write_text_file(dir / (samples.label + "_1d.csv"), one.str());

  std::ostringstream two;
  two << "dim_x,dim_y,bin_x,bin_y,lo_x,hi_x,lo_y,hi_y,test,flow\n";
  const Index pair_dims = std::min(samples.dim, options.max_pair_dims);
  for (Index a = 0; a < pair_dims; ++a) {
    for (Index b = a + 1; b < pair_dims; ++b) {
      const auto [lx, hx] = ranges[u(a)];
      const auto [ly, hy] = ranges[u(b)];
      const std::vector<double> tx = finite_column(samples.test, a), ty = finite_column(samples.test, b);
      const std::vector<double> fx = finite_column(samples.flow, a), fy = finite_column(samples.flow, b);
      const Histogram2d ht = histogram_2d(tx, ty, lx, hx, ly, hy, bins);
      const Histogram2d hf = histogram_2d(fx, fy, lx, hx, ly, hy, bins);
      const double wx = (hx - lx) / static_cast<double>(bins);
      const double wy = (hy - ly) / static_cast<double>(bins);
      for (Index i = 0; i < bins; ++i) {
        for (Index k = 0; k < bins; ++k) {
          two << a << ',' << b << ',' << i << ',' << k << ','
              << format_double(lx + wx * static_cast<double>(i)) << ','
              << format_double(i + 1 == bins ? hx : lx + wx * static_cast<double>(i + 1)) << ','
              << format_double(ly + wy * static_cast<double>(k)) << ','
              << format_double(k + 1 == bins ? hy : ly + wy * static_cast<double>(k + 1)) << ','
              << ht.at(i, k) << ',' << hf.at(i, k) << '\n';
        }
      }
    }
  }
  write_text_file(dir / (samples.label + "_2d.csv"), two.str());
}

void emit_report(const RunResults& results, const std::filesystem::path& dir,
                 const ReportOptions& options) {
  std::filesystem::create_directories(dir);
  const std::vector<ResultRow> rows = results_table(results);
  write_text_file(dir / "results.csv",
                  "# " + results.tool_version + ", master seed " +
                      std::to_string(results.config.master_seed) + "\n" + results_csv(rows));

  nlohmann::json summary{{"format", "flowkit-summary"},
                         {"tool_version", results.tool_version},
                         {"master_seed", results.config.master_seed},
                         {"config", to_json(results.config)}};
  nlohmann::json dims = nlohmann::json::array();
  const RunSeeds seeds{results.config.master_seed};
  for (const auto& d : results.dimensions) {
    nlohmann::json dj{{"dim", d.dim}};
    if (d.nulls) {
      nlohmann::json thresholds;
      for (Statistic s : kAllStatistics) {
        const auto& null = d.nulls->get(s);
        thresholds[to_string(s)] = {{"1sigma", threshold(null, 1)},
                                    {"2sigma", threshold(null, 2)},
                                    {"3sigma", threshold(null, 3)},
                                    {"n_pseudo", null.values.size()}};
      }
      dj["thresholds"] = thresholds;
    }
    nlohmann::json points = nlohmann::json::array();
    for (const auto& p : d.points) {
      const GridSummary g = summarize(p, d.nulls ? &*d.nulls : nullptr);
      nlohmann::json pj{{"label", grid_label(p.hp)},
                        {"replicas_ok", g.replicas_ok},
                        {"replicas_failed", g.replicas_failed}};
      for (Statistic s : kAllStatistics) pj[to_string(s)] = to_json(g.get(s));
      nlohmann::json reps = nlohmann::json::array();
      for (const auto& r : p.replicas) {
        nlohmann::json rj{{"replica", r.replica}, {"ok", r.ok()}, {"error", r.error},
                          {"epochs", r.training.epochs_run}};
        if (r.evaluation) {
          for (Statistic s : kAllStatistics) rj[to_string(s)] = to_json(r.evaluation->get(s));
          rj["non_finite_points"] = r.evaluation->non_finite_points;
        }
        reps.push_back(rj);
      }
      pj["replicas"] = reps;
      points.push_back(pj);
    }
    dj["points"] = points;
    const Selection sel = select_best(d.points);
    if (sel.found) {
      const auto& point = d.points[u(sel.average_best)];
      dj["average_best"] = grid_label(point.hp);
      dj["absolute_best_replica"] = point.replicas[u(sel.absolute_best)].replica;
    } else {
      dj["average_best"] = nullptr;
      dj["no_result_reason"] = sel.reason;
    }
    dj["failed_replicas"] = sel.failed_replicas;
    dj["no_result_points"] = nlohmann::json::array();
    for (Index i : sel.no_result_points) dj["no_result_points"].push_back(grid_label(d.points[u(i)].hp));
    dims.push_back(dj);

    if (sel.found && !results.config.output_dir.empty()) {
      const auto& point = d.points[u(sel.average_best)];
      const ReplicaResult& rep = point.replicas[u(sel.absolute_best)];
      if (!rep.model_file.empty() &&
          std::filesystem::exists(results.config.output_dir / rep.model_file)) {
        const FlowModel model = load_replica_model(results, rep);
        const std::uint64_t cs = derive_seed(seeds.evaluation(d.dim, grid_label(point.hp), rep.replica),
                                             {0xc0ffeeULL});
        CornerSamples cs_data{d.dim,
                              "D" + std::to_string(d.dim) + "_" + grid_label(point.hp) + "_replica_" +
                                  std::to_string(rep.replica),
                              sample_cmog(d.spec, results.config.n_test,
                                          derive_seed(cs, SeedPurpose::target_sample))
                                  .data,
                              model.sample(results.config.n_test,
                                           derive_seed(cs, SeedPurpose::flow_sample))
                                  .data};
        write_corner_data(cs_data, dir / "corner", options);
      }
    }
  }
  summary["dimensions"] = dims;
  const ResultRow ref = reference_row();
  summary["reference_full_scale"] = {{"dim", ref.dim},
                                     {"algorithm", ref.algorithm},
                                     {"hidden_layers", ref.hidden},
                                     {"n_bijectors", ref.n_bijectors},
                                     {"spline_knots", ref.spline_knots},
                                     {"ks", {ref.mean[0], ref.std[0]}},
                                     {"swd", {ref.mean[1], ref.std[1]}},
                                     {"fn", {ref.mean[2], ref.std[2]}},
                                     {"epochs", ref.epochs},
                                     {"note", "10^5 training points, 10 replicas; not a target for desk-scale runs"}};
  write_text_file(dir / "summary.json", summary.dump(2));
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << text;
  out.close();
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace flowkit

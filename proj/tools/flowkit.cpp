// SPDX-License-Identifier: Apache-2.0
//
// flowkit command-line driver.
#include "flowkit/harness.hpp"
#include "flowkit/random.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace flowkit;

namespace {

nlohmann::json load_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void save_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text_file(path, j.dump(2) + "\n");
}

void log(const std::string& message) { std::cerr << "flowkit: " << message << std::endl; }

std::vector<Index> parse_widths(const std::string& text) {
  std::vector<Index> widths;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    const auto x = item.find('x');
    if (x != std::string::npos) {  // "3x128"
      const Index count = std::stol(item.substr(0, x));
      const Index width = std::stol(item.substr(x + 1));
      for (Index i = 0; i < count; ++i) widths.push_back(width);
    } else {
      widths.push_back(std::stol(item));
    }
  }
  require(!widths.empty(), "empty hidden-layer list '" + text + "'");
  return widths;
}

struct HyperparameterFlags {
  std::string architecture = "MAF";
  Index bijectors = -1;
  std::string hidden = "3x128";
  Index knots = 8;
  double range = 16.0;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--arch", architecture, "RealNVP, MAF, C-RQS or A-RQS")->capture_default_str();
    cmd->add_option("--bijectors", bijectors, "number of bijectors (default 2 for A-RQS, else 5)");
    cmd->add_option("--hidden", hidden, "hidden widths, e.g. 3x128 or 64,128")->capture_default_str();
    cmd->add_option("--knots", knots, "spline bins K")->capture_default_str();
    cmd->add_option("--range", range, "spline half-range B")->capture_default_str();
  }

  FlowHyperparameters get() const {
    FlowHyperparameters hp;
    hp.architecture = architecture_from_string(architecture);
    hp.n_bijectors = bijectors > 0 ? bijectors : (hp.architecture == Architecture::a_rqs ? 2 : 5);
    hp.hidden = parse_widths(hidden);
    hp.spline_knots = knots;
    hp.spline_range = range;
    hp.validate();
    return hp;
  }
};

NullSet load_nulls(const std::vector<std::string>& files) {
  NullSet set;
  std::array<bool, 3> seen{};
  const auto add = [&](const nlohmann::json& j) {
    NullDistribution n = null_from_json(j);
    const auto i = static_cast<std::size_t>(n.statistic);
    set.get(n.statistic) = std::move(n);
    seen[i] = true;
  };
  for (const auto& f : files) {
    const nlohmann::json j = load_json(f);
    if (j.value("format", "") == "flowkit-null-set") {
      for (Statistic s : kAllStatistics) add(j.at(to_string(s)));
    } else {
      add(j);
    }
  }
  for (Statistic s : kAllStatistics) {
    require(seen[static_cast<std::size_t>(s)], "no null distribution given for " + to_string(s));
  }
  return set;
}

// ---------------------------------------------------------------------------

int cmd_gen_target(Index dim, Index components, std::uint64_t seed, const fs::path& out,
                   Index n_samples, const fs::path& samples_out) {
  const CMoGSpec spec = make_cmog(dim, components, seed);
  nlohmann::json j = to_json(spec);
  j["tool_version"] = kToolVersion;
  save_json(out, j);
  log("wrote " + out.string());
  if (n_samples > 0) {
    require(!samples_out.empty(), "--samples needs --samples-out");
    const SampleBatch batch =
        sample_cmog(spec, n_samples, derive_seed(seed, SeedPurpose::target_sample));
    std::ostringstream csv;
    csv << "# " << kToolVersion << ", seed " << seed << "\n";
    write_csv(csv, batch.data);
    write_text_file(samples_out, csv.str());
    log("wrote " + samples_out.string());
  }
  return 0;
}

int cmd_null(const fs::path& spec_file, const std::string& metric, Index size, Index n_pseudo,
             std::uint64_t seed, const fs::path& out) {
  const CMoGSpec spec = cmog_from_json(load_json(spec_file));
  if (metric == "all") {
    const NullSet set = build_nulls(spec, size, n_pseudo, seed);
    nlohmann::json j{{"format", "flowkit-null-set"}, {"tool_version", kToolVersion}, {"seed", seed}};
    for (Statistic s : kAllStatistics) j[to_string(s)] = to_json(set.get(s));
    save_json(out, j);
  } else {
    save_json(out, to_json(build_null(statistic_from_string(metric), spec, size, n_pseudo, seed)));
  }
  log("wrote " + out.string());
  return 0;
}

struct TrainFlags {
  fs::path spec_file;
  HyperparameterFlags hp;
  Index replicas = 1;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> replica_seeds;
  Index n_train = 10'000;
  Index n_validation = 3'000;
  Index max_epochs = -1;
  Index batch_size = -1;
  double learning_rate = -1;
  fs::path out_dir;
};

int cmd_train(const TrainFlags& f) {
  const CMoGSpec spec = cmog_from_json(load_json(f.spec_file));
  const FlowHyperparameters hp = f.hp.get();
  const std::string label = grid_label(hp);
  const RunSeeds seeds{f.seed};
  RunConfig rc;
  rc.master_seed = f.seed;
  if (f.max_epochs > 0) rc.max_epochs = f.max_epochs;
  if (f.batch_size > 0) rc.batch_size = f.batch_size;
  if (f.learning_rate > 0) rc.learning_rate = f.learning_rate;

  const Matrix train_data = sample_cmog(spec, f.n_train, seeds.train_data(spec.dim)).data;
  const Matrix validation_data =
      sample_cmog(spec, f.n_validation, seeds.validation_data(spec.dim)).data;
  const Index replicas =
      f.replica_seeds.empty() ? f.replicas : static_cast<Index>(f.replica_seeds.size());
  int status = 0;
  for (Index r = 0; r < replicas; ++r) {
    const std::uint64_t init_seed = f.replica_seeds.empty()
                                        ? seeds.replica_init(spec.dim, label, r)
                                        : f.replica_seeds[static_cast<std::size_t>(r)];
    FlowModel model(spec.dim, hp, init_seed);
    const TrainConfig tc =
        train_config_for(rc, hp.architecture, seeds.replica_shuffle(spec.dim, label, r));
    log(label + " replica " + std::to_string(r) + ": " + std::to_string(model.parameter_count()) +
        " parameters");
    const TrainReport report = train(model, train_data, validation_data, tc, [&](const EpochLog& e) {
      if (e.epoch % 25 == 0) {
        log("  epoch " + std::to_string(e.epoch) + " train " + std::to_string(e.train_loss) +
            " val " + std::to_string(e.validation_loss) + " lr " + std::to_string(e.learning_rate));
      }
    });
    nlohmann::json mj = model.to_json();
    mj["master_seed"] = f.seed;
    mj["training"] = to_json(report);
    const fs::path model_path = f.out_dir / label / ("replica_" + std::to_string(r) + ".json");
    save_json(model_path, mj);
    nlohmann::json rj = to_json(report);
    rj["tool_version"] = kToolVersion;
    rj["master_seed"] = f.seed;
    rj["init_seed"] = init_seed;
    rj["train_config"] = to_json(tc);
    save_json(f.out_dir / label / ("train_report_" + std::to_string(r) + ".json"), rj);
    log("  " + std::string(report.success ? "done" : "FAILED: " + report.failure_reason) + ", " +
        std::to_string(report.epochs_run) + " epochs, best validation loss " +
        std::to_string(report.best_validation_loss) + " -> " + model_path.string());
    if (!report.success) status = 1;
  }
  return status;
}

int cmd_evaluate(const fs::path& spec_file, const std::vector<std::string>& models,
                 const std::vector<std::string>& null_files, Index size, Index repeats,
                 std::uint64_t seed, const fs::path& out) {
  const CMoGSpec spec = cmog_from_json(load_json(spec_file));
  std::optional<NullSet> nulls;
  if (!null_files.empty()) nulls = load_nulls(null_files);
  nlohmann::json results = nlohmann::json::array();
  int status = 0;
  for (const auto& file : models) {
    nlohmann::json rj{{"model", file}};
    try {
      const FlowModel model = FlowModel::from_json(load_json(file));
      const Evaluation ev = evaluate_model(model, spec, size, repeats, seed, nulls ? &*nulls : nullptr);
      rj["evaluation"] = to_json(ev);
      std::ostringstream line;
      line << file << ": t_KS " << ev.ks.mean << " +- " << ev.ks.std;
      if (ev.ks.sigma_class) line << " (" << sigma_label(*ev.ks.sigma_class) << ")";
      log(line.str());
      if (ev.repeats_kept == 0) status = 1;
    } catch (const std::exception& e) {
      rj["error"] = e.what();
      log(file + ": " + e.what());
      status = 1;
    }
    results.push_back(rj);
  }
  save_json(out, {{"format", "flowkit-evaluation"},
                  {"tool_version", kToolVersion},
                  {"seed", seed},
                  {"sample_size", size},
                  {"repeats", repeats},
                  {"results", results}});
  log("wrote " + out.string());
  return status;
}

int cmd_report(const fs::path& run_dir, fs::path out, Index bins) {
  RunResults results = run_results_from_json(load_json(run_dir / "run.json"));
  results.config.output_dir = run_dir;
  if (out.empty()) out = run_dir / "report";
  ReportOptions options;
  options.histogram_bins = bins;
  options.master_seed = results.config.master_seed;
  emit_report(results, out, options);
  log("wrote report to " + out.string());
  return 0;
}

struct GridFlags {
  fs::path config_file;
  fs::path out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<Index> dims;
  std::vector<std::string> archs;
  std::optional<Index> replicas, repeats, n_pseudo, n_train, n_validation, n_test, max_epochs;
  bool full_scale = false;
};

int cmd_grid(const GridFlags& f) {
  RunConfig config = f.full_scale ? RunConfig::full_scale() : RunConfig{};
  if (!f.config_file.empty()) config = run_config_from_json(load_json(f.config_file));
  if (config.grid.empty()) config.grid = RunConfig::default_grid();
  if (f.seed) config.master_seed = *f.seed;
  if (!f.dims.empty()) config.dims = f.dims;
  if (!f.archs.empty()) {
    std::vector<FlowHyperparameters> grid;
    for (const auto& name : f.archs) {
      const Architecture a = architecture_from_string(name);
      for (const auto& hp : config.grid) {
        if (hp.architecture == a) grid.push_back(hp);
      }
    }
    config.grid = grid;
  }
  if (f.replicas) config.replicas = *f.replicas;
  if (f.repeats) config.repeats = *f.repeats;
  if (f.n_pseudo) config.n_pseudo = *f.n_pseudo;
  if (f.n_train) config.n_train = *f.n_train;
  if (f.n_validation) config.n_validation = *f.n_validation;
  if (f.n_test) config.n_test = *f.n_test;
  if (f.max_epochs) config.max_epochs = *f.max_epochs;
  config.output_dir = f.out_dir;
  config.validate();

  fs::create_directories(f.out_dir);
  nlohmann::json cj = to_json(config);
  cj["tool_version"] = kToolVersion;
  save_json(f.out_dir / "config.json", cj);

  const RunResults results = run_grid(config, log);
  save_json(f.out_dir / "run.json", to_json(results));
  ReportOptions options;
  options.master_seed = config.master_seed;
  emit_report(results, f.out_dir / "report", options);
  log("wrote " + (f.out_dir / "report").string());

  int status = 0;
  for (const auto& d : results.dimensions) {
    for (const auto& p : d.points) {
      for (const auto& r : p.replicas) {
        if (!r.error.empty()) {
          log("D=" + std::to_string(d.dim) + " " + grid_label(p.hp) + " replica " +
              std::to_string(r.replica) + " failed: " + r.error);
          status = 1;
        }
      }
    }
  }
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Normalizing-flow training and two-sample evaluation"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  // gen-target
  Index gt_dim = 4, gt_components = 3, gt_samples = 0;
  std::uint64_t gt_seed = 1;
  fs::path gt_out, gt_samples_out;
  auto* gen = app.add_subcommand("gen-target", "draw a random CMoG target and write its spec");
  gen->add_option("--dim,-d", gt_dim, "dimension D")->capture_default_str();
  gen->add_option("--components", gt_components, "mixture components")->capture_default_str();
  gen->add_option("--seed", gt_seed, "64-bit seed")->capture_default_str();
  gen->add_option("--out,-o", gt_out, "spec file")->required();
  gen->add_option("--samples", gt_samples, "also write this many samples");
  gen->add_option("--samples-out", gt_samples_out, "CSV file for --samples");

  // null
  fs::path nl_spec, nl_out;
  std::string nl_metric = "all";
  Index nl_size = 10'000, nl_pseudo = 1'000;
  std::uint64_t nl_seed = 1;
  auto* null = app.add_subcommand("null", "build null distributions from target-vs-target draws");
  null->add_option("--spec", nl_spec, "target spec file")->required()->check(CLI::ExistingFile);
  null->add_option("--metric", nl_metric, "KS, SWD, FN or all")->capture_default_str();
  null->add_option("--size,-n", nl_size, "sample size N")->capture_default_str();
  null->add_option("--n-pseudo", nl_pseudo, "pseudo-experiments")->capture_default_str();
  null->add_option("--seed", nl_seed, "64-bit seed")->capture_default_str();
  null->add_option("--out,-o", nl_out, "output file")->required();

  // train
  TrainFlags tf;
  auto* tr = app.add_subcommand("train", "train replicas of one architecture on a target");
  tr->add_option("--spec", tf.spec_file, "target spec file")->required()->check(CLI::ExistingFile);
  tf.hp.add_to(tr);
  tr->add_option("--replicas", tf.replicas, "replica count")->capture_default_str();
  tr->add_option("--seed", tf.seed, "master seed for data and replicas")->capture_default_str();
  tr->add_option("--replica-seed", tf.replica_seeds, "explicit initialization seeds, one per replica");
  tr->add_option("--train-size", tf.n_train)->capture_default_str();
  tr->add_option("--validation-size", tf.n_validation)->capture_default_str();
  tr->add_option("--max-epochs", tf.max_epochs, "default 1000");
  tr->add_option("--batch-size", tf.batch_size, "default 256 for RealNVP, 512 otherwise");
  tr->add_option("--learning-rate", tf.learning_rate, "default 1e-3");
  tr->add_option("--out-dir,-o", tf.out_dir, "output directory")->required();

  // evaluate
  fs::path ev_spec, ev_out;
  std::vector<std::string> ev_models, ev_nulls;
  Index ev_size = 10'000, ev_repeats = 5;
  std::uint64_t ev_seed = 1;
  auto* ev = app.add_subcommand("evaluate", "compare trained models with their target");
  ev->add_option("--spec", ev_spec, "target spec file")->required()->check(CLI::ExistingFile);
  ev->add_option("--model,-m", ev_models, "model files")->required()->check(CLI::ExistingFile);
  ev->add_option("--null", ev_nulls, "null distribution files (one set or one per statistic)")
      ->check(CLI::ExistingFile);
  ev->add_option("--size,-n", ev_size, "sample size N")->capture_default_str();
  ev->add_option("--repeats", ev_repeats, "evaluation repeats")->capture_default_str();
  ev->add_option("--seed", ev_seed, "64-bit seed")->capture_default_str();
  ev->add_option("--out,-o", ev_out, "output file")->required();

  // report
  fs::path rp_dir, rp_out;
  Index rp_bins = 40;
  auto* rp = app.add_subcommand("report", "write tables, summary and corner-plot data of a grid run");
  rp->add_option("--run-dir", rp_dir, "directory written by grid")->required()->check(CLI::ExistingDirectory);
  rp->add_option("--out,-o", rp_out, "output directory (default <run-dir>/report)");
  rp->add_option("--bins", rp_bins, "histogram bins")->capture_default_str();

  // grid
  GridFlags gf;
  auto* gr = app.add_subcommand("grid", "train and evaluate a hyperparameter grid end to end");
  gr->add_option("--config", gf.config_file, "run config file")->check(CLI::ExistingFile);
  gr->add_option("--out-dir,-o", gf.out_dir, "output directory")->required();
  gr->add_option("--seed", gf.seed, "master seed");
  gr->add_option("--dims", gf.dims, "dimensions");
  gr->add_option("--arch", gf.archs, "restrict to these architectures");
  gr->add_option("--replicas", gf.replicas);
  gr->add_option("--repeats", gf.repeats);
  gr->add_option("--n-pseudo", gf.n_pseudo);
  gr->add_option("--train-size", gf.n_train);
  gr->add_option("--validation-size", gf.n_validation);
  gr->add_option("--test-size", gf.n_test);
  gr->add_option("--max-epochs", gf.max_epochs);
  gr->add_flag("--full-scale", gf.full_scale, "full-scale sizes, counts and grid");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_target(gt_dim, gt_components, gt_seed, gt_out, gt_samples, gt_samples_out);
    if (*null) return cmd_null(nl_spec, nl_metric, nl_size, nl_pseudo, nl_seed, nl_out);
    if (*tr) return cmd_train(tf);
    if (*ev) return cmd_evaluate(ev_spec, ev_models, ev_nulls, ev_size, ev_repeats, ev_seed, ev_out);
    if (*rp) return cmd_report(rp_dir, rp_out, rp_bins);
    if (*gr) return cmd_grid(gf);
  } catch (const std::exception& e) {
    std::cerr << "flowkit: error: " << e.what() << std::endl;
    return 1;
  }
  return 1;
}

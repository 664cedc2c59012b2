// SPDX-License-Identifier: Apache-2.0
#include "flowkit/harness.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

using namespace flowkit;
using flowkit::testing::random_matrix;

namespace {

NullDistribution counting_null(Index n) {
  NullDistribution null;
  null.values.resize(static_cast<std::size_t>(n));
  std::iota(null.values.begin(), null.values.end(), 1.0);
  null.sample_size = 100;
  null.dim = 2;
  return null;
}

ReplicaResult replica(Index index, double ks, bool ok = true) {
  ReplicaResult r;
  r.replica = index;
  r.training.success = ok;
  r.training.epochs_run = 10;
  if (!ok) {
    r.error = "diverged";
    return r;
  }
  Evaluation ev;
  ev.repeats_requested = ev.repeats_kept = 2;
  ev.ks = make_outcome(Statistic::ks, {ks - 0.1, ks + 0.1});
  ev.swd = make_outcome(Statistic::swd, {2 * ks, 2 * ks});
  ev.fn = make_outcome(Statistic::fn, {0.5, 0.5});
  r.evaluation = ev;
  return r;
}

GridPointResult point(Architecture a, std::vector<ReplicaResult> replicas) {
  GridPointResult p;
  p.dim = 4;
  p.hp.architecture = a;
  p.replicas = std::move(replicas);
  return p;
}

RunConfig tiny_config() {
  RunConfig c;
  c.master_seed = 21;
  c.dims = {2};
  c.n_train = 300;
  c.n_validation = 100;
  c.n_test = 200;
  c.n_pseudo = 100;
  c.replicas = 2;
  c.repeats = 2;
  c.max_epochs = 2;
  for (Architecture a : {Architecture::maf, Architecture::a_rqs}) {
    FlowHyperparameters hp;
    hp.architecture = a;
    hp.n_bijectors = 2;
    hp.hidden = {8, 8};
    hp.spline_knots = 4;
    hp.spline_range = 8.0;
    c.grid.push_back(hp);
  }
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("flowkit_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Quantile, InterpolatesAtHalfPastTheRank) {
  std::vector<double> v(10000);
  std::iota(v.begin(), v.end(), 1.0);
  EXPECT_DOUBLE_EQ(quantile(v, 0.95), 9500.5);
  EXPECT_DOUBLE_EQ(quantile(v, 0.99), 9900.5);
  const std::vector<double> five{1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(quantile(five, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(quantile(five, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile(five, 1.0), 5.0);
  EXPECT_THROW(quantile(std::span<const double>{}, 0.5), ContractViolation);
}

TEST(Thresholds, ExceedanceIsTheNominalRate) {
  const NullDistribution null = counting_null(1000);
  for (int sigma = 1; sigma <= 3; ++sigma) {
    const double t = threshold(null, sigma);
    const auto above = std::count_if(null.values.begin(), null.values.end(),
                                     [&](double v) { return v > t; });
    const double expected = std::round((1.0 - kSigmaConfidence[static_cast<std::size_t>(sigma - 1)]) * 1000);
    EXPECT_EQ(static_cast<double>(above), expected) << sigma;
  }
  EXPECT_LT(threshold(null, 1), threshold(null, 2));
  EXPECT_LT(threshold(null, 2), threshold(null, 3));
  EXPECT_THROW(threshold(null, 4), ContractViolation);
}

TEST(PValue, EdgesAndMonotonicity) {
  const NullDistribution null = counting_null(100);
  EXPECT_DOUBLE_EQ(p_value(null, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(p_value(null, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(p_value(null, 100.0), 0.01);
  EXPECT_DOUBLE_EQ(p_value(null, 100.5), 0.0);
  EXPECT_DOUBLE_EQ(p_value(null, 50.5), 0.5);
  double previous = 1.0;
  for (double t = 0.0; t < 102.0; t += 0.25) {
    const double p = p_value(null, t);
    EXPECT_LE(p, previous);
    previous = p;
  }
}

TEST(SigmaClass, CountsExceededThresholds) {
  const NullDistribution null = counting_null(1000);
  EXPECT_EQ(sigma_class(null, 1.0), 0);
  EXPECT_EQ(sigma_class(null, threshold(null, 1) + 1e-9), 1);
  EXPECT_EQ(sigma_class(null, threshold(null, 2) + 1e-9), 2);
  EXPECT_EQ(sigma_class(null, 5000.0), 3);
  EXPECT_EQ(sigma_label(0), "<1sigma");
  EXPECT_EQ(sigma_label(3), ">3sigma");
}

TEST(NullDistribution, BuiltNullsAreSortedSeededAndSerializable) {
  const CMoGSpec spec = make_cmog(2, 3, 1);
  const NullSet a = build_nulls(spec, 200, 100, 7);
  const NullSet b = build_nulls(spec, 200, 100, 7);
  for (Statistic s : kAllStatistics) {
    const auto& v = a.get(s).values;
    EXPECT_EQ(v.size(), 100u);
    EXPECT_TRUE(std::is_sorted(v.begin(), v.end()));
    EXPECT_EQ(v, b.get(s).values);
    EXPECT_GT(v.front(), 0.0);
  }
  // The KS null is the KS entry of the joint pseudo-experiments.
  EXPECT_EQ(build_null(Statistic::ks, spec, 200, 100, 7).values, a.ks.values);
  EXPECT_DOUBLE_EQ(pseudo_experiment(spec, 200, derive_seed(7, {0})).ks.scaled,
                   *std::find(a.ks.values.begin(), a.ks.values.end(),
                              pseudo_experiment(spec, 200, derive_seed(7, {0})).ks.scaled));
  const NullDistribution back = null_from_json(nlohmann::json::parse(to_json(a.swd).dump()));
  EXPECT_EQ(back.values, a.swd.values);
  EXPECT_EQ(back.statistic, Statistic::swd);
  EXPECT_THROW(build_nulls(spec, 200, 10, 7), ContractViolation);
}

TEST(Outcome, MeanStdAndPValue) {
  const NullDistribution null = counting_null(100);
  const TestOutcome o = make_outcome(Statistic::ks, {2.0, 4.0, 6.0}, &null);
  EXPECT_DOUBLE_EQ(o.mean, 4.0);
  EXPECT_DOUBLE_EQ(o.std, 2.0);
  EXPECT_DOUBLE_EQ(*o.p_value, p_value(null, 4.0));
  EXPECT_EQ(*o.sigma_class, 0);
  EXPECT_EQ(make_outcome(Statistic::ks, {3.0}).std, 0.0);
  EXPECT_FALSE(make_outcome(Statistic::ks, {3.0}).p_value.has_value());
  const TestOutcome back = test_outcome_from_json(nlohmann::json::parse(to_json(o).dump()));
  EXPECT_EQ(back.values, o.values);
  EXPECT_EQ(back.p_value, o.p_value);
}

// ---------------------------------------------------------------------------

TEST(Evaluation, TargetAgainstItselfIsCompatibleAndCollapseIsRejected) {
  const CMoGSpec spec = make_cmog(2, 3, 4);
  const NullSet nulls = build_nulls(spec, 500, 200, 5);
  const Sampler target = [&](Index n, std::uint64_t s) { return sample_cmog(spec, n, s).data; };
  const Evaluation good = evaluate_sampler(target, spec, 500, 5, 6, &nulls);
  EXPECT_EQ(good.repeats_kept, 5);
  for (Statistic s : kAllStatistics) {
    EXPECT_GT(*good.get(s).p_value, 0.01) << to_string(s);
    EXPECT_LT(*good.get(s).sigma_class, 3) << to_string(s);
  }
  // Every point at the first mean plus a little noise.
  const Sampler collapsed = [&](Index n, std::uint64_t s) {
    Matrix x = random_matrix(n, 2, s, 0.01);
    return Matrix(x.rowwise() + spec.means.row(0));
  };
  const Evaluation bad = evaluate_sampler(collapsed, spec, 500, 3, 6, &nulls);
  for (Statistic s : kAllStatistics) EXPECT_EQ(*bad.get(s).sigma_class, 3) << to_string(s);
}

TEST(Evaluation, RepeatsAreSeededAndIndependent) {
  const CMoGSpec spec = make_cmog(3, 3, 4);
  const Sampler target = [&](Index n, std::uint64_t s) { return sample_cmog(spec, n, s).data; };
  const Evaluation a = evaluate_sampler(target, spec, 300, 3, 9);
  const Evaluation b = evaluate_sampler(target, spec, 300, 3, 9);
  EXPECT_EQ(a.ks.values, b.ks.values);
  EXPECT_EQ(a.fn.values, b.fn.values);
  EXPECT_NE(a.ks.values[0], a.ks.values[1]);
  EXPECT_NE(evaluate_sampler(target, spec, 300, 3, 10).ks.values, a.ks.values);
}

TEST(Evaluation, NonFinitePointsAreDroppedOrTheRepeatDiscarded) {
  const CMoGSpec spec = make_cmog(2, 3, 4);
  const auto with_nans = [&](Index count) {
    return [&spec, count](Index n, std::uint64_t s) {
      Matrix x = sample_cmog(spec, n, s).data;
      for (Index r = 0; r < count; ++r) x(r, 1) = std::numeric_limits<double>::quiet_NaN();
      return x;
    };
  };
  const Evaluation few = evaluate_sampler(with_nans(4), spec, 1000, 2, 1);  // 0.4%
  EXPECT_EQ(few.repeats_kept, 2);
  EXPECT_EQ(few.non_finite_points, 8);
  EXPECT_TRUE(std::isfinite(few.ks.mean));
  const Evaluation many = evaluate_sampler(with_nans(20), spec, 1000, 2, 1);  // 2%
  EXPECT_EQ(many.repeats_kept, 0);
  EXPECT_EQ(many.repeats_requested, 2);
  EXPECT_TRUE(many.ks.values.empty());
}

TEST(Evaluation, JsonRoundTrip) {
  const CMoGSpec spec = make_cmog(2, 2, 4);
  const FlowModel model(2, FlowHyperparameters{Architecture::maf, 2, {8}, 8, 16.0}, 3);
  const Evaluation ev = evaluate_model(model, spec, 100, 2, 5);
  const Evaluation back = evaluation_from_json(nlohmann::json::parse(to_json(ev).dump()));
  EXPECT_EQ(back.ks.values, ev.ks.values);
  EXPECT_EQ(back.swd.values, ev.swd.values);
  EXPECT_EQ(back.repeats_kept, ev.repeats_kept);
}

// ---------------------------------------------------------------------------

TEST(Selection, LowestMeanKsWins) {
  const std::vector<GridPointResult> points{
      point(Architecture::maf, {replica(0, 3.0), replica(1, 1.0), replica(2, 2.0)}),
      point(Architecture::a_rqs, {replica(0, 1.5), replica(1, 1.6), replica(2, 1.4)}),
  };
  const Selection s = select_best(points);
  ASSERT_TRUE(s.found);
  EXPECT_EQ(s.average_best, 1);
  EXPECT_EQ(s.absolute_best, 2);
}

TEST(Selection, TiesGoToTheEarlierEntry) {
  const std::vector<GridPointResult> points{
      point(Architecture::maf, {replica(0, 2.0), replica(1, 1.0), replica(2, 1.0)}),
      point(Architecture::a_rqs, {replica(0, 1.0), replica(1, 2.0), replica(2, 1.0)}),
  };
  const Selection s = select_best(points);
  EXPECT_EQ(s.average_best, 0);
  EXPECT_EQ(s.absolute_best, 1);
}

TEST(Selection, FailedReplicasAreSkippedAndCounted) {
  const std::vector<GridPointResult> points{
      point(Architecture::maf, {replica(0, 0.1, false), replica(1, 3.0)}),
      point(Architecture::real_nvp, {replica(0, 0.1, false), replica(1, 0.1, false)}),
      point(Architecture::a_rqs, {replica(0, 2.0), replica(1, 2.5, false)}),
  };
  const Selection s = select_best(points);
  ASSERT_TRUE(s.found);
  EXPECT_EQ(s.average_best, 2);
  EXPECT_EQ(s.absolute_best, 0);
  EXPECT_EQ(s.failed_replicas, 4);
  EXPECT_EQ(s.no_result_points, std::vector<Index>{1});
}

TEST(Selection, NothingToSelect) {
  const std::vector<GridPointResult> points{point(Architecture::maf, {replica(0, 1.0, false)})};
  const Selection s = select_best(points);
  EXPECT_FALSE(s.found);
  EXPECT_FALSE(s.reason.empty());
  EXPECT_FALSE(select_best(std::span<const GridPointResult>{}).found);
}

TEST(Selection, InvariantToGridOrder) {
  std::vector<GridPointResult> points;
  Rng rng(3);
  const Architecture archs[] = {Architecture::maf, Architecture::real_nvp, Architecture::c_rqs,
                                Architecture::a_rqs};
  for (int i = 0; i < 8; ++i) {
    GridPointResult p = point(archs[i % 4], {});
    p.hp.n_bijectors = i + 1;
    for (Index r = 0; r < 3; ++r) p.replicas.push_back(replica(r, 1.0 + rng.uniform()));
    points.push_back(p);
  }
  const Selection base = select_best(points);
  const Index winner = points[static_cast<std::size_t>(base.average_best)].hp.n_bijectors;
  for (int trial = 0; trial < 10; ++trial) {
    rng.shuffle(points.begin(), points.end());
    const Selection s = select_best(points);
    EXPECT_EQ(points[static_cast<std::size_t>(s.average_best)].hp.n_bijectors, winner);
    EXPECT_EQ(s.absolute_best, base.absolute_best);
  }
}

TEST(Summary, AggregatesReplicaMeans) {
  const GridPointResult p =
      point(Architecture::maf, {replica(0, 1.0), replica(1, 3.0), replica(2, 0.0, false)});
  const GridSummary s = summarize(p);
  EXPECT_EQ(s.replicas_ok, 2);
  EXPECT_EQ(s.replicas_failed, 1);
  EXPECT_DOUBLE_EQ(s.ks.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.ks.std, std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(s.swd.mean, 4.0);
}

// ---------------------------------------------------------------------------

TEST(Histogram, CountsAndClosedLastBin) {
  const std::vector<double> x{0.0, 0.1, 0.5, 0.99, 1.0, 1.5, -0.1};
  const Histogram1d h = histogram_1d(x, 0.0, 1.0, 4);
  EXPECT_EQ(h.counts, (std::vector<Index>{2, 0, 1, 2}));
}

TEST(Histogram, TwoDimensionalMarginalsMatchOneDimensional) {
  const Matrix s = random_matrix(5000, 2, 4);
  std::vector<double> x(5000), y(5000);
  for (Index i = 0; i < 5000; ++i) {
    x[static_cast<std::size_t>(i)] = s(i, 0);
    y[static_cast<std::size_t>(i)] = s(i, 1);
  }
  const Index bins = 12;
  const Histogram2d h2 = histogram_2d(x, y, -3, 3, -2.5, 2.5, bins);
  const Histogram1d hx = histogram_1d(x, -3, 3, bins);
  for (Index bx = 0; bx < bins; ++bx) {
    Index sum = 0;
    for (Index by = 0; by < bins; ++by) sum += h2.at(bx, by);
    // The 2-D histogram also drops points whose y is out of range.
    EXPECT_LE(sum, hx.counts[static_cast<std::size_t>(bx)]);
  }
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(y[i]) <= 2.5) {
      xs.push_back(x[i]);
      ys.push_back(y[i]);
    }
  }
  const Histogram1d hx_in = histogram_1d(xs, -3, 3, bins);
  for (Index bx = 0; bx < bins; ++bx) {
    Index sum = 0;
    for (Index by = 0; by < bins; ++by) sum += h2.at(bx, by);
    EXPECT_EQ(sum, hx_in.counts[static_cast<std::size_t>(bx)]);
  }
}

TEST(Histogram, RebinningFineCountsGivesCoarseCounts) {
  const Matrix s = random_matrix(3000, 1, 8);
  std::vector<double> x(s.data(), s.data() + s.size());
  const Histogram1d fine = histogram_1d(x, -4, 4, 40);
  const Histogram1d coarse = histogram_1d(x, -4, 4, 10);
  for (std::size_t c = 0; c < 10; ++c) {
    Index sum = 0;
    for (std::size_t f = 4 * c; f < 4 * c + 4; ++f) sum += fine.counts[f];
    EXPECT_EQ(sum, coarse.counts[c]);
  }
}

// ---------------------------------------------------------------------------

TEST(RunConfig, DefaultsLabelsAndJson) {
  const auto grid = RunConfig::default_grid();
  ASSERT_EQ(grid.size(), 4u);
  EXPECT_EQ(grid_label(grid[0]), "MAF_5x3x128");
  FlowHyperparameters hp;
  hp.architecture = Architecture::a_rqs;
  hp.n_bijectors = 2;
  EXPECT_EQ(grid_label(hp), "A-RQS_2x3x128_K8");
  hp.spline_range = 8.0;
  EXPECT_EQ(grid_label(hp), "A-RQS_2x3x128_K8_B8");
  const RunConfig c = tiny_config();
  const RunConfig back = run_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(back.dims, c.dims);
  EXPECT_EQ(back.grid.size(), c.grid.size());
  EXPECT_EQ(back.max_epochs, c.max_epochs);
  EXPECT_EQ(back.master_seed, c.master_seed);
  RunConfig bad = c;
  bad.replicas = 0;
  EXPECT_THROW(bad.validate(), ContractViolation);
}

TEST(RunSeeds, StreamsAreDistinctAndLabelKeyed) {
  const RunSeeds s{5};
  EXPECT_NE(s.train_data(4), s.validation_data(4));
  EXPECT_NE(s.train_data(4), s.train_data(8));
  EXPECT_NE(s.replica_init(4, "MAF_5x3x128", 0), s.replica_init(4, "MAF_5x3x128", 1));
  EXPECT_NE(s.replica_init(4, "MAF_5x3x128", 0), s.replica_init(4, "MAF_4x3x128", 0));
  EXPECT_NE(s.replica_init(4, "MAF_5x3x128", 0), s.replica_shuffle(4, "MAF_5x3x128", 0));
  EXPECT_EQ(RunSeeds{5}.evaluation(2, "x", 1), s.evaluation(2, "x", 1));
}

TEST(Csv, SchemaAndPlaceholders) {
  ResultRow affine;
  affine.dim = 4;
  affine.selection = "grid";
  affine.hidden = "3x128";
  affine.n_bijectors = 5;
  affine.algorithm = "MAF";
  affine.mean = {1.0, 2.0, 0.5};
  affine.p_value = {0.25, std::nullopt, 0.5};
  const std::vector<ResultRow> rows{affine, reference_row()};
  const std::string with = results_csv(rows);
  const std::string without = results_csv(rows, false);
  const std::string header = without.substr(0, without.find('\n'));
  EXPECT_EQ(header,
            "dim,selection,hidden_layers,n_bijectors,algorithm,spline_knots,replica,replicas_ok,"
            "replicas_failed,ks_mean,ks_std,ks_p_value,swd_mean,swd_std,swd_p_value,fn_mean,fn_std,"
            "fn_p_value,epochs");
  EXPECT_NE(with.find("prediction_seconds"), std::string::npos);
  const std::string first = without.substr(header.size() + 1, without.find('\n', header.size() + 1) - header.size() - 1);
  EXPECT_EQ(first.substr(0, 22), "4,grid,3x128,5,MAF,--,");
  EXPECT_EQ(std::count(first.begin(), first.end(), ','), std::count(header.begin(), header.end(), ','));
  EXPECT_EQ(reference_row().algorithm, "A-RQS");
  EXPECT_EQ(reference_row().dim, 4);
}

TEST(TextFiles, FailuresNameThePath) {
  try {
    read_text_file("/nonexistent/flowkit/file.json");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/flowkit/file.json"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------

TEST(RunGrid, TinyRunIsReproducibleAndReportable) {
  RunConfig c = tiny_config();
  c.output_dir = temp_dir("grid_a");
  const RunResults a = run_grid(c);
  c.output_dir = temp_dir("grid_b");
  const RunResults b = run_grid(c);
  const std::string csv_a = results_csv(results_table(a), false);
  EXPECT_EQ(csv_a, results_csv(results_table(b), false));

  ASSERT_EQ(a.dimensions.size(), 1u);
  const DimensionResult& d = a.dimensions[0];
  ASSERT_EQ(d.points.size(), 2u);
  ASSERT_TRUE(d.nulls.has_value());
  EXPECT_EQ(d.nulls->ks.values.size(), 100u);
  for (const auto& p : d.points) {
    ASSERT_EQ(p.replicas.size(), 2u);
    for (const auto& r : p.replicas) {
      EXPECT_TRUE(r.ok()) << r.error;
      EXPECT_TRUE(std::filesystem::exists(c.output_dir / r.model_file));
    }
  }
  // Stored models reproduce their evaluation exactly.
  const ReplicaResult& r0 = d.points[1].replicas[0];
  const FlowModel m = load_replica_model(b, r0);
  const RunSeeds seeds{c.master_seed};
  const Evaluation again = evaluate_model(m, d.spec, c.n_test, c.repeats,
                                          seeds.evaluation(2, grid_label(d.points[1].hp), 0),
                                          &*d.nulls);
  EXPECT_EQ(again.ks.values, r0.evaluation->ks.values);

  const RunResults back = run_results_from_json(nlohmann::json::parse(to_json(a).dump()));
  EXPECT_EQ(results_csv(results_table(back), false), csv_a);

  const auto report = temp_dir("report");
  ReportOptions options;
  options.histogram_bins = 10;
  emit_report(b, report, options);
  EXPECT_TRUE(std::filesystem::exists(report / "results.csv"));
  EXPECT_TRUE(std::filesystem::exists(report / "summary.json"));
  std::size_t corner_files = 0;
  for (const auto& e : std::filesystem::directory_iterator(report / "corner")) {
    corner_files += e.is_regular_file() ? 1 : 0;
  }
  EXPECT_EQ(corner_files, 4u);
  const std::string csv = read_text_file(report / "results.csv");
  EXPECT_EQ(csv.substr(0, 1), "#");
  // grid rows, average and absolute best, reference
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 1 + 2 + 2 + 1);
}

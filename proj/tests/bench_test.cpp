#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace sumgp;

namespace {

std::vector<std::string> read_lines(const std::filesystem::path &p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split(const std::string &s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string cell; std::getline(ss, cell, sep);) out.push_back(cell);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

// A short schedule so the end-to-end cases stay quick.
ExperimentConfig quick(ExperimentKind kind, ModelKind model, int reps) {
  ExperimentConfig c = default_config(kind, model);
  c.replicates = reps;
  c.train.iterations = c.aux_train.iterations = 40;
  c.train.scheduler_steps = c.aux_train.scheduler_steps = 20;
  c.threads = 1;
  return c;
}

std::filesystem::path fresh_dir(const std::string &name) {
  const auto d = std::filesystem::temp_directory_path() / ("sumgp_bench_" + name);
  std::filesystem::remove_all(d);
  return d;
}

}  // namespace

TEST(Config, ParsesKeysAndComments) {
  const ExperimentConfig c = parse_config(
      "# harmonic oscillator\n"
      "experiment = ho\n"
      "model = unconstrained\n"
      "sigma = 0.2   # noise\n"
      "fd = 0.25\n"
      "replicates = 7\n"
      "seed = 99\n"
      "iterations = 150\n"
      "guard_lengthscale = true\n");
  EXPECT_EQ(c.experiment, ExperimentKind::HO);
  EXPECT_EQ(c.model, ModelKind::Unconstrained);
  EXPECT_EQ(c.inference, InferenceMode::Exact);
  EXPECT_EQ(c.noise_sigma_n, 0.2);
  EXPECT_EQ(c.drop_prob, 0.25);
  EXPECT_EQ(c.replicates, 7);
  EXPECT_EQ(c.seed, 99u);
  EXPECT_EQ(c.train.iterations, 150);
  EXPECT_EQ(c.aux_train.iterations, 150);
  EXPECT_TRUE(c.train.guard_lengthscale);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("experiment = ho\ncolour = red\n"), InputError);
  EXPECT_THROW(parse_config("experiment = ho\nexperiment = ff\n"), InputError);
  EXPECT_THROW(parse_config("experiment ho\n"), InputError);
  EXPECT_THROW(parse_config("experiment = pendulum\n"), InputError);
  EXPECT_THROW(parse_config("sigma = abc\n"), InputError);
  EXPECT_THROW(parse_config("experiment = ho\nmodel = transformed-unconstrained\n"), InputError);
  EXPECT_NO_THROW(parse_config("experiment = triangle\nmodel = transformed-unconstrained\n"));
  EXPECT_THROW(parse_config("experiment = dp\n"), InputError);
  EXPECT_THROW(parse_config("fd = 1.0\n"), InputError);
  EXPECT_THROW(load_config("/nonexistent/sumgp.cfg"), InputError);
}

TEST(Config, ScheduleDefaults) {
  const ExperimentConfig tri = default_config(ExperimentKind::Triangle);
  EXPECT_EQ(tri.train.iterations, 2000);
  EXPECT_EQ(tri.train.scheduler_steps, 800);
  EXPECT_EQ(tri.train.scheduler_factor, 0.2);
  const ExperimentConfig ho = default_config(ExperimentKind::HO);
  EXPECT_EQ(ho.train.iterations, 200);
  EXPECT_EQ(ho.train.scheduler_steps, 100);
  EXPECT_EQ(ho.inference, InferenceMode::Laplace);
  EXPECT_TRUE(default_config(ExperimentKind::Logsin).train.guard_loss_std);
}

TEST(Config, HashTracksContent) {
  ExperimentConfig a = default_config(ExperimentKind::HO), b = a;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b.noise_sigma_n = 0.11;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_NE(derive_seed(1, 1), derive_seed(1, 2));
  EXPECT_EQ(derive_seed(5, 3), derive_seed(5, 3));
}

TEST(Metrics, IdenticalPredictionIsPerfect) {
  const Experiment e = gen_harmonic_oscillator({}, 1);
  const Metrics m = compute_metrics(e.test_truth, e.test_truth, e.test_inputs, e.constraint, e.transform);
  EXPECT_EQ(m.rmse, 0.0);
  EXPECT_LT(m.abs_dC, 1e-12);
}

TEST(Metrics, ConstantOffsetOnOneTask) {
  const Experiment e = gen_harmonic_oscillator({}, 1);
  Matrix pred = e.test_truth;
  pred.col(1).array() += 0.1;
  const Metrics m = compute_metrics(pred, e.test_truth, e.test_inputs, e.constraint, e.transform);
  EXPECT_NEAR(m.rmse, 0.1 / std::sqrt(2.0), 1e-12);
}

TEST(Metrics, ScaledOscillatorViolation) {
  // Scaling both states by √(1 + δ/E) gives energy E + δ everywhere.
  const Experiment e = gen_harmonic_oscillator({}, 1);
  const double delta = 0.03;
  const Matrix pred = e.test_truth * std::sqrt(1.0 + delta / 0.8);
  const Metrics m = compute_metrics(pred, e.test_truth, e.test_inputs, e.constraint, e.transform);
  EXPECT_NEAR(m.abs_dC, delta, 1e-12);
}

TEST(Metrics, GridMismatchThrows) {
  const Experiment e = gen_harmonic_oscillator({}, 1);
  EXPECT_THROW(compute_metrics(e.test_truth.topRows(10), e.test_truth, e.test_inputs, e.constraint, e.transform), InputError);
}

TEST(Metrics, NonPositiveLogPredictionIsFinite) {
  const Experiment e = gen_logsin({}, 1);
  Matrix pred = e.test_truth;
  pred(3, 0) = -0.5;
  const Metrics m = compute_metrics(pred, e.test_truth, e.test_inputs, e.constraint, e.transform);
  EXPECT_TRUE(std::isfinite(m.abs_dC));
  EXPECT_GT(m.abs_dC, 0.1);
}

TEST(Aggregate, SampleStandardDeviation) {
  const Aggregate a = aggregate({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(a.mean, 2.5);
  EXPECT_NEAR(a.std, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(a.n, 4);
  EXPECT_EQ(aggregate({}).n, 0);
}

TEST(Report, FailedReplicatesAreCountedNotAveraged) {
  Report rep;
  rep.replicates.resize(3);
  rep.replicates[0].ok = true;
  rep.replicates[0].metrics = {0.1, 0.01};
  rep.replicates[1].ok = false;
  rep.replicates[2].ok = true;
  rep.replicates[2].metrics = {0.3, 0.03};
  rep.recompute();
  EXPECT_EQ(rep.failed, 1);
  EXPECT_EQ(rep.rmse.n, 2);
  EXPECT_DOUBLE_EQ(rep.rmse.mean, 0.2);
}

TEST(RunExperiment, SingleReplicateIsDeterministic) {
  const ExperimentConfig c = quick(ExperimentKind::HO, ModelKind::Constrained, 1);
  const Report a = run_experiment(c), b = run_experiment(c);
  ASSERT_TRUE(a.replicates[0].ok) << a.replicates[0].error;
  EXPECT_EQ(a.replicates[0].metrics.rmse, b.replicates[0].metrics.rmse);
  EXPECT_EQ(a.replicates[0].metrics.abs_dC, b.replicates[0].metrics.abs_dC);
  EXPECT_EQ(a.hash, b.hash);
  EXPECT_EQ(a.replicates[0].curves.mean, b.replicates[0].curves.mean);
}

TEST(RunExperiment, ThreadCountDoesNotChangeResults) {
  ExperimentConfig c = quick(ExperimentKind::HO, ModelKind::Unconstrained, 3);
  const Report one = run_experiment(c);
  c.threads = 3;
  const Report three = run_experiment(c);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(one.replicates[k].metrics.rmse, three.replicates[k].metrics.rmse) << k;
}

TEST(RunExperiment, TransformedBaselineOnTriangleIsFinite) {
  ExperimentConfig c = quick(ExperimentKind::Triangle, ModelKind::TransformedUnconstrained, 1);
  const Report r = run_experiment(c);
  ASSERT_TRUE(r.replicates[0].ok) << r.replicates[0].error;
  EXPECT_TRUE(std::isfinite(r.rmse.mean));
  EXPECT_TRUE(std::isfinite(r.abs_dC.mean));
}

TEST(RunExperiment, ConstrainedPipelineRecordsVirtualPoints) {
  const Report r = run_experiment(quick(ExperimentKind::HO, ModelKind::Constrained, 1));
  ASSERT_TRUE(r.replicates[0].ok);
  const CurveSet &cs = r.replicates[0].curves;
  EXPECT_FALSE(cs.virtual_points.empty());
  EXPECT_EQ(cs.mean.rows(), 100);
  EXPECT_TRUE(((cs.lower.array() <= cs.mean.array() + 1e-12) && (cs.mean.array() <= cs.upper.array() + 1e-12)).all());
}

TEST(Outputs, EmptyReportWritesHeaderOnly) {
  Report rep;
  rep.config = default_config(ExperimentKind::HO);
  rep.config.replicates = 0;
  const auto dir = fresh_dir("empty");
  emit_outputs(rep, dir.string());
  const auto lines = read_lines(dir / "report.csv");
  ASSERT_EQ(lines.size(), 1u);
  EXPECT_EQ(lines[0], "replicate,seed,status,rmse,abs_dC,rmse_std,abs_dC_std,restarts,clamps,seconds");
  EXPECT_TRUE(std::filesystem::exists(dir / "table.md"));
  std::filesystem::remove_all(dir);
}

TEST(Outputs, TwoReplicatesGiveRowsAggregateAndFigures) {
  const Report rep = run_experiment(quick(ExperimentKind::HO, ModelKind::Constrained, 2));
  const auto dir = fresh_dir("two");
  emit_outputs(rep, dir.string());
  const auto lines = read_lines(dir / "report.csv");
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_TRUE(std::filesystem::exists(dir / "figure_0.svg"));
  EXPECT_TRUE(std::filesystem::exists(dir / "figure_1.svg"));
  EXPECT_FALSE(std::filesystem::exists(dir / "figure_2.svg"));

  // Recompute the aggregate from the data rows.
  std::vector<double> rmse, dc;
  for (int k = 1; k <= 2; ++k) {
    const auto cells = split(lines[k], ',');
    ASSERT_EQ(cells.size(), 10u) << lines[k];
    EXPECT_EQ(cells[2], "ok");
    rmse.push_back(std::stod(cells[3]));
    dc.push_back(std::stod(cells[4]));
  }
  const auto agg = split(lines[3], ',');
  ASSERT_EQ(agg[0], "aggregate");
  EXPECT_EQ(agg[2], "n=2;failed=0");
  const Aggregate ra = aggregate(rmse), da = aggregate(dc);
  EXPECT_NEAR(std::stod(agg[3]), ra.mean, 1e-9 * ra.mean);
  EXPECT_NEAR(std::stod(agg[4]), da.mean, 1e-9 * da.mean);
  EXPECT_NEAR(std::stod(agg[5]), ra.std, 1e-8 * ra.mean);
  EXPECT_NEAR(std::stod(agg[6]), da.std, 1e-8 * da.mean);

  std::ifstream svg(dir / "figure_0.svg");
  std::stringstream ss;
  ss << svg.rdbuf();
  const std::string body = ss.str();
  EXPECT_NE(body.find("<svg"), std::string::npos);
  EXPECT_NE(body.find("stroke-dasharray"), std::string::npos);
  EXPECT_NE(body.find("<rect"), std::string::npos);
  EXPECT_NE(body.find("<circle"), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(Outputs, UnwritableDirectoryNamesPath) {
  Report rep;
  rep.config = default_config(ExperimentKind::HO);
  try {
    emit_outputs(rep, "/proc/sumgp_nope");
    FAIL() << "expected an error";
  } catch (const std::exception &e) {
    EXPECT_NE(std::string(e.what()).find("/proc/sumgp_nope"), std::string::npos) << e.what();
  }
}

#ifdef SUMGP_CONFIG_DIR
TEST(Config, ShippedConfigsParse) {
  int count = 0;
  for (const auto &entry : std::filesystem::directory_iterator(SUMGP_CONFIG_DIR)) {
    if (entry.path().extension() != ".cfg") continue;
    EXPECT_NO_THROW(load_config(entry.path().string())) << entry.path();
    ++count;
  }
  EXPECT_GT(count, 0);
}
#endif

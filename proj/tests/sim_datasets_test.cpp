#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numbers>

using namespace sumgp;

namespace {

// Largest |F(x) h(y) - S(x)| over the rows of a noiseless state matrix.
double max_residual(const Experiment &e, const Matrix &inputs, const Matrix &states) {
  const Matrix fp = forward_transform(states, e.transform);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < inputs.rows(); ++i) {
    const Vector x = inputs.row(i).transpose();
    const Vector r = e.constraint.F(x) * fp.row(i).transpose() - e.constraint.S(x);
    worst = std::max(worst, r.cwiseAbs().maxCoeff());
  }
  return worst;
}

std::filesystem::path temp_file(const std::string &name) { return std::filesystem::temp_directory_path() / ("sumgp_sim_" + name); }

void write_text(const std::filesystem::path &p, const std::string &text) {
  std::ofstream out(p);
  out << text;
}

}  // namespace

TEST(HarmonicOscillator, StartsAtRestPositionWithFullSpeed) {
  const Experiment e = gen_harmonic_oscillator({}, 3);
  EXPECT_NEAR(e.train.ground_truth.value()(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(e.train.ground_truth.value()(0, 1), std::sqrt(1.6), 1e-15);
  EXPECT_EQ(e.train.num_points(), 20);
  EXPECT_EQ(e.test_inputs.rows(), 100);
  EXPECT_DOUBLE_EQ(e.test_inputs(0, 0), -0.1);
  EXPECT_DOUBLE_EQ(e.test_inputs(99, 0), 10.0);
}

TEST(Generators, NoiselessTruthSatisfiesConstraint) {
  const Experiment ho = gen_harmonic_oscillator({}, 1);
  EXPECT_LT(max_residual(ho, ho.train.inputs, ho.train.ground_truth.value()), 1e-12);
  EXPECT_LT(max_residual(ho, ho.test_inputs, ho.test_truth), 1e-12);

  const Experiment dho = gen_damped_oscillator({}, 1);
  EXPECT_LT(max_residual(dho, dho.train.inputs, dho.train.ground_truth.value()), 1e-12);
  EXPECT_LT(max_residual(dho, dho.test_inputs, dho.test_truth), 1e-12);

  const Experiment ff = gen_free_fall({}, 1);
  EXPECT_LT(max_residual(ff, ff.train.inputs, ff.train.ground_truth.value()), 1e-12);
  EXPECT_LT(max_residual(ff, ff.test_inputs, ff.test_truth), 1e-12);

  const Experiment ls = gen_logsin({}, 1);
  EXPECT_LT(max_residual(ls, ls.train.inputs, ls.train.ground_truth.value()), 1e-12);
  EXPECT_LT(max_residual(ls, ls.test_inputs, ls.test_truth), 1e-12);
}

TEST(DampedOscillator, ZeroDampingMatchesUndamped) {
  OscillatorParams p;
  p.damping = 0.0;
  const Experiment d = gen_damped_oscillator(p, 9);
  const Experiment u = gen_harmonic_oscillator(p, 9);
  EXPECT_LT((d.train.ground_truth.value() - u.train.ground_truth.value()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((d.test_truth - u.test_truth).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(DampedOscillator, EnergyDecays) {
  OscillatorParams p;
  p.damping = 0.1;
  // At t = 0 the position vanishes and v = z0 ω with ω² = ω0² - (b/2m)².
  EXPECT_NEAR(oscillator_energy(p, 0.0), 0.8 * (1.0 - 0.05 * 0.05), 1e-12);
  double prev = oscillator_energy(p, 0.0);
  for (double t = 0.05; t <= 10.0; t += 0.05) {
    const double e = oscillator_energy(p, t);
    EXPECT_LE(e, prev + 1e-14) << "t = " << t;
    prev = e;
  }
  EXPECT_LT(prev, 0.8 * std::exp(-0.1 * 10.0) * 1.3);
}

TEST(FreeFall, LaunchVelocityAndApex) {
  FreeFallParams p;
  const Matrix s = free_fall_states(p, Vector::Constant(1, 0.0));
  EXPECT_EQ(s(0, 0), 0.0);
  EXPECT_NEAR(s(0, 1), 20.0, 1e-12);
  const double apex = 20.0 / 9.81;
  EXPECT_NEAR(apex, 2.0387, 1e-4);
  EXPECT_NEAR(free_fall_states(p, Vector::Constant(1, apex))(0, 1), 0.0, 1e-12);
  const Experiment e = gen_free_fall(p, 1);
  EXPECT_NEAR(e.train.ground_truth.value()(0, 1), 1.0, 1e-12);  // divided by 20
}

TEST(Logsin, ValuesAtOriginAndSineBranchPoint) {
  EXPECT_NEAR(logsin_f1(0.0), 3.0 * std::exp(-5.0) + 0.2, 1e-15);
  EXPECT_EQ(logsin_f2(0.0), 0.0);
  EXPECT_NEAR(logsin_target(0.0), std::log(3.0 * std::exp(-5.0) + 0.2), 1e-15);
  const double xc = std::cbrt(std::numbers::pi);
  EXPECT_NEAR(logsin_f2(xc), -std::numbers::pi / 2.0, 1e-14);
}

TEST(Logsin, NonPositiveLogObservationsAreMissing) {
  LogsinParams p;
  p.noise_sigma_n = 2.0;
  const Experiment e = gen_logsin(p, 4);
  int missing = 0;
  for (Eigen::Index i = 0; i < e.train.num_points(); ++i) {
    if (e.train.is_missing(i, 0))
      ++missing;
    else
      EXPECT_GT(e.train.observations(i, 0), 0.0);
  }
  EXPECT_GT(missing, 0);
}

TEST(Triangle, ReferencePoseAndEdgeLengths) {
  const Matrix Z = triangle_pose(0.0);
  EXPECT_NEAR(Z(0, 0), 5.0, 1e-15);
  EXPECT_NEAR(Z(1, 0), 5.0, 1e-15);
  for (double a : {0.0, 0.7, 2.3, 4.9}) {
    const Matrix P = triangle_pose(a);
    EXPECT_NEAR((P.col(0) - P.col(1)).norm(), 4.0, 1e-12);
    EXPECT_NEAR((P.col(0) - P.col(2)).squaredNorm(), 23.36, 1e-11);
    EXPECT_NEAR((P.col(1) - P.col(2)).squaredNorm(), 0.4 * 0.4 + 4.0, 1e-11);
  }
  const Experiment e = gen_triangle({}, 2);
  EXPECT_EQ(e.train.num_tasks(), 6);
  EXPECT_LT((e.train.observations - e.train.ground_truth.value()).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Generators, SeedDeterminism) {
  OscillatorParams p;
  p.noise_sigma_n = 0.1;
  p.drop_prob = 0.3;
  const Experiment a = gen_harmonic_oscillator(p, 42);
  const Experiment b = gen_harmonic_oscillator(p, 42);
  const Experiment c = gen_harmonic_oscillator(p, 43);
  for (Eigen::Index i = 0; i < a.train.observations.size(); ++i) {
    const double x = a.train.observations.data()[i], y = b.train.observations.data()[i];
    EXPECT_TRUE((std::isnan(x) && std::isnan(y)) || x == y);
  }
  bool differs = false;
  for (Eigen::Index i = 0; i < a.train.observations.size(); ++i) {
    const double x = a.train.observations.data()[i], y = c.train.observations.data()[i];
    differs |= !((std::isnan(x) && std::isnan(y)) || x == y);
  }
  EXPECT_TRUE(differs);
}

TEST(NoiseAndDrop, EveryPointKeepsATask) {
  std::mt19937_64 rng(5);
  const Matrix truth = Matrix::Ones(400, 2);
  Matrix obs;
  const int redraws = add_noise_and_drop(truth, 0.0, 0.6, rng, obs);
  EXPECT_GT(redraws, 0);
  int dropped = 0;
  for (Eigen::Index i = 0; i < obs.rows(); ++i) {
    EXPECT_FALSE(std::isnan(obs(i, 0)) && std::isnan(obs(i, 1))) << "row " << i;
    dropped += std::isnan(obs(i, 0)) + std::isnan(obs(i, 1));
  }
  // Conditional drop rate given at least one kept: 0.6 / (1 - 0.36) per task.
  const double rate = dropped / 800.0;
  EXPECT_NEAR(rate, 0.6 * 0.4 / 0.64, 0.05);
  EXPECT_THROW(add_noise_and_drop(truth, -1.0, 0.0, rng, obs), InputError);
  EXPECT_THROW(add_noise_and_drop(truth, 0.1, 1.0, rng, obs), InputError);
}

TEST(FiniteDifference, CircularMotionIsSecondOrder) {
  auto max_err = [](double dt) {
    const int n = 50;
    Matrix pos(n, 2), vel(n, 2);
    for (int i = 0; i < n; ++i) {
      const double t = i * dt;
      pos.row(i) << std::cos(t), std::sin(t);
      vel.row(i) << -std::sin(t), std::cos(t);
    }
    const Matrix v = finite_difference(pos, dt);
    return (v - vel).middleRows(1, n - 2).cwiseAbs().maxCoeff();
  };
  const double e1 = max_err(0.02), e2 = max_err(0.01);
  EXPECT_LT(e1, 0.02 * 0.02);
  EXPECT_NEAR(e1 / e2, 4.0, 0.1);
  EXPECT_LT(finite_difference(Matrix::Constant(5, 3, 2.5), 0.1).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_THROW(finite_difference(Matrix::Zero(1, 2), 0.1), InputError);
}

TEST(DoublePendulum, LoadsSegmentWithScalingsAndFlip) {
  const auto path = temp_file("dp.csv");
  {
    std::ofstream out(path);
    out << "ax,ay,bx,by,gx,gy\n";
    for (int i = 0; i < 10; ++i) out << "1,2," << 1 + 0.001 * i << ",3," << 2 << "," << 2 + 0.002 * i << "\n";
  }
  PendulumParams p;
  const Experiment e = load_double_pendulum(path.string(), p, {2, 6});
  ASSERT_EQ(e.train.num_points(), 6);
  ASSERT_EQ(e.train.num_tasks(), 8);
  EXPECT_NEAR(e.train.ground_truth.value()(0, 0), 20.0 * 0.002, 1e-12);  // (1.002 - 1) scaled by 20
  EXPECT_NEAR(e.train.ground_truth.value()(0, 1), -20.0 * 1.0, 1e-12);   // image y flipped
  EXPECT_NEAR(e.train.ground_truth.value()(0, 3), -20.0 * 0.004, 1e-12);
  EXPECT_NEAR(e.train.ground_truth.value()(3, 4), std::sqrt(10.0) * 0.001 * 500.0, 1e-9);
  EXPECT_NEAR(e.train.ground_truth.value()(3, 7), -std::sqrt(10.0) * 0.002 * 500.0, 1e-9);
  EXPECT_NEAR(e.train.inputs(0, 0), 5.0 * 2.0 / 500.0, 1e-15);
  EXPECT_EQ(e.transform.num_transformed(), 12);
  EXPECT_THROW(load_double_pendulum(path.string(), p, {7, 6}), InputError);
  EXPECT_THROW(load_double_pendulum(path.string(), p, {-1, 3}), InputError);
  std::filesystem::remove(path);
}

TEST(DoublePendulum, MalformedRowNamesItsLine) {
  const auto path = temp_file("bad.csv");
  write_text(path, "ax,ay,bx,by,gx,gy\n0,0,1,1,2,2\n0,0,1,x,2,2\n");
  try {
    load_double_pendulum(path.string(), {}, {0, 2});
    FAIL() << "expected IngestError";
  } catch (const IngestError &err) {
    EXPECT_NE(std::string(err.what()).find("line 3"), std::string::npos) << err.what();
  }
  write_text(path, "0,0,1,1\n");
  EXPECT_THROW(load_double_pendulum(path.string(), {}, {0, 1}), IngestError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_double_pendulum(path.string(), {}, {0, 2}), IngestError);
}

TEST(DoublePendulum, CoefficientsMatchEnergyInRawUnits) {
  PendulumParams p;
  const Matrix F = pendulum_coefficients(p);
  // Scaled state from a raw one; F·h(scaled) must equal the raw energy.
  const double zb = -0.08, zg = -0.15, vbx = 0.3, vby = -0.2, vgx = 0.5, vgy = 0.1;
  Vector h = Vector::Zero(12);
  h << 0.0, p.scale_pos * zb, 0.0, p.scale_pos * zg, std::pow(p.scale_vel * vbx, 2), std::pow(p.scale_vel * vby, 2),
      std::pow(p.scale_vel * vgx, 2), std::pow(p.scale_vel * vgy, 2), 0, 0, 0, 0;
  const double raw = p.mass_blue() * p.g * zb + p.mass_green() * p.g * zg + 0.5 * p.mass_blue() * (vbx * vbx + vby * vby) +
                     0.5 * p.mass_green() * (vgx * vgx + vgy * vgy);
  EXPECT_NEAR((F * h)(0), raw, 1e-12);
}

TEST(EnergyEstimate, NoiselessOscillatorGivesExactEnergy) {
  OscillatorParams p;
  p.noise_sigma_n = 0.0;
  const Experiment e = gen_harmonic_oscillator(p, 1);
  EXPECT_NEAR(energy_estimate(e.train, e.constraint, e.transform), 0.8, 1e-13);
}

TEST(EnergyEstimate, SinglePointAndMissingTasks) {
  OscillatorParams p;
  p.noise_sigma_n = 0.0;
  Experiment e = gen_harmonic_oscillator(p, 1);
  for (Eigen::Index i = 1; i < e.train.num_points(); ++i) e.train.observations(i, 1) = std::numeric_limits<double>::quiet_NaN();
  e.train.observations(0, 0) = 0.1;
  EXPECT_NEAR(energy_estimate(e.train, e.constraint, e.transform), 0.5 * 0.01 + 0.8, 1e-13);
  e.train.observations(0, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(energy_estimate(e.train, e.constraint, e.transform), InputError);
}

// Squared noisy observations are biased upward by σ² (k = m = 1).
TEST(EnergyEstimate, MonteCarloBiasMatchesNoiseVariance) {
  OscillatorParams p;
  p.noise_sigma_n = 0.1;
  std::vector<double> est;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Experiment e = gen_harmonic_oscillator(p, 1000 + s);
    est.push_back(energy_estimate(e.train, e.constraint, e.transform));
  }
  double mean = 0.0;
  for (double v : est) mean += v;
  mean /= est.size();
  double var = 0.0;
  for (double v : est) var += (v - mean) * (v - mean);
  const double se = std::sqrt(var / (est.size() - 1) / est.size());
  EXPECT_NEAR(mean, 0.8 + 0.01, 3.0 * se);
}

TEST(DatasetCsv, WritesHeaderAndBlanksForMissing) {
  OscillatorParams p;
  p.n_train = 3;
  p.noise_sigma_n = 0.0;
  Experiment e = gen_harmonic_oscillator(p, 1);
  e.train.observations(1, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto path = temp_file("ds.csv");
  write_dataset_csv(path.string(), e.train);
  std::ifstream in(path);
  std::string l1, l2, l3, l4;
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  std::getline(in, l4);
  EXPECT_EQ(l1, "# tasks=z,v units=m,m/s");
  EXPECT_EQ(l2, "x,y1,y2");
  EXPECT_EQ(l3.substr(0, 4), "0,0,");
  EXPECT_EQ(l4.substr(0, 3), "5,,");
  std::filesystem::remove(path);
}

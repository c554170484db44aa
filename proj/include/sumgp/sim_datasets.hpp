#pragma once

#include "sumgp/constraint_engine.hpp"
#include "sumgp/transform_pipeline.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>

namespace sumgp {

/// A generated or loaded experiment: noisy training data in original task
/// space, the noiseless truth on the test grid, and the constraint and
/// transform that turn it into a constrained GP problem.
struct Experiment {
  std::string name;
  TaskedDataset train;
  Matrix test_inputs;
  Matrix test_truth;
  ConstraintSpec constraint;  // over transformed tasks
  TransformSpec transform;
  int mask_redraws = 0;
};

inline Vector linspace(double lo, double hi, int n) {
  if (n < 1) throw InputError("linspace: need at least one point");
  return n == 1 ? Vector::Constant(1, lo) : Vector(Vector::LinSpaced(n, lo, hi));
}

/// Adds N(0, σ²) noise entry-wise (row-major draws) and drops entries with
/// probability f_d.  A point that loses every task gets its mask redrawn;
/// the number of redraws is returned.
inline int add_noise_and_drop(const Matrix &truth, double sigma, double drop_prob, std::mt19937_64 &rng, Matrix &observations) {
  if (!(sigma >= 0.0)) throw InputError("noise sigma must be nonnegative");
  if (!(drop_prob >= 0.0 && drop_prob < 1.0)) throw InputError("drop probability must lie in [0, 1)");
  std::normal_distribution<double> nd(0.0, 1.0);
  observations = truth;
  for (Eigen::Index i = 0; i < truth.rows(); ++i)
    for (Eigen::Index a = 0; a < truth.cols(); ++a) observations(i, a) += sigma * nd(rng);
  int redraws = 0;
  if (drop_prob > 0.0) {
    std::bernoulli_distribution drop(drop_prob);
    for (Eigen::Index i = 0; i < truth.rows(); ++i) {
      std::vector<bool> mask(static_cast<std::size_t>(truth.cols()));
      for (;;) {
        bool any = false;
        for (Eigen::Index a = 0; a < truth.cols(); ++a) any |= !(mask[a] = drop(rng));
        if (any) break;
        ++redraws;
      }
      for (Eigen::Index a = 0; a < truth.cols(); ++a)
        if (mask[a]) observations(i, a) = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return redraws;
}

inline TaskedDataset make_dataset(const Vector &x, const Matrix &truth, const Matrix &obs, std::vector<std::string> names,
                                  std::vector<std::string> units) {
  TaskedDataset d;
  d.inputs = x;
  d.observations = obs;
  d.virtual_point.assign(static_cast<std::size_t>(x.size()), false);
  d.scale_factors = Vector::Ones(truth.cols());
  d.ground_truth = truth;
  d.task_names = std::move(names);
  d.units = std::move(units);
  return d;
}

// ---------------------------------------------------------------------------
// Oscillators

struct OscillatorParams {
  double energy = 0.8;
  double mass = 1.0;
  double omega0 = 1.0;
  double damping = 0.0;
  double noise_sigma_n = 0.1;
  double drop_prob = 0.0;
  double t_min = 0.0, t_max = 10.0;
  int n_train = 20;
  double test_min = -0.1, test_max = 10.0;
  int n_test = 100;

  double spring() const { return mass * omega0 * omega0; }
  double amplitude() const { return std::sqrt(2.0 * energy / spring()); }

  void validate() const {
    if (!(energy > 0.0 && mass > 0.0 && omega0 > 0.0)) throw InputError("oscillator: E, m and omega0 must be positive");
    if (!(damping >= 0.0 && damping < 2.0 * mass * omega0)) throw InputError("oscillator: damping must be underdamped");
    if (n_train < 1 || n_test < 1) throw InputError("oscillator: grids need points");
  }
};

/// Closed-form (z, v) of the (possibly damped) oscillator, one row per time.
inline Matrix oscillator_states(const OscillatorParams &p, const Vector &t) {
  const double gamma = p.damping / (2.0 * p.mass);
  const double omega = std::sqrt(p.omega0 * p.omega0 - gamma * gamma);
  Matrix out(t.size(), 2);
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const double amp = p.amplitude() * std::exp(-gamma * t(i));
    out(i, 0) = amp * std::sin(omega * t(i));
    out(i, 1) = amp * omega * std::cos(omega * t(i)) - amp * gamma * std::sin(omega * t(i));
  }
  return out;
}

inline double oscillator_energy(const OscillatorParams &p, double t) {
  const Matrix s = oscillator_states(p, Vector::Constant(1, t));
  return 0.5 * p.spring() * s(0, 0) * s(0, 0) + 0.5 * p.mass * s(0, 1) * s(0, 1);
}

namespace detail {

inline Experiment oscillator_experiment(const OscillatorParams &p, std::uint64_t seed, bool damped) {
  p.validate();
  std::mt19937_64 rng(seed);
  Experiment e;
  e.name = damped ? "dho" : "ho";
  const Vector t = linspace(p.t_min, p.t_max, p.n_train);
  const Matrix truth = oscillator_states(p, t);
  Matrix obs;
  e.mask_redraws = add_noise_and_drop(truth, p.noise_sigma_n, p.drop_prob, rng, obs);
  e.train = make_dataset(t, truth, obs, {"z", "v"}, {"m", "m/s"});
  e.test_inputs = linspace(p.test_min, p.test_max, p.n_test);
  e.test_truth = oscillator_states(p, e.test_inputs.col(0));
  e.transform = TransformSpec::with_aux({Nonlinearity::Square, Nonlinearity::Square}, VirtualPolicy::AtZeroCrossings);
  Matrix F(1, 4);
  F << 0.5 * p.spring(), 0.5 * p.mass, 0.0, 0.0;
  if (!damped) {
    e.constraint = ConstraintSpec::constant(F, Vector::Constant(1, p.energy));
  } else {
    e.constraint = ConstraintSpec::input_dependent(
        4, 1, [F](const Vector &) { return F; },
        [p](const Vector &x) { return Vector(Vector::Constant(1, oscillator_energy(p, x(0)))); });
  }
  return e;
}

}  // namespace detail

inline Experiment gen_harmonic_oscillator(OscillatorParams p, std::uint64_t seed) {
  p.damping = 0.0;
  return detail::oscillator_experiment(p, seed, false);
}

inline Experiment gen_damped_oscillator(OscillatorParams p, std::uint64_t seed) { return detail::oscillator_experiment(p, seed, true); }

// ---------------------------------------------------------------------------
// Free fall

struct FreeFallParams {
  double energy = 200.0;
  double mass = 1.0;
  double g = 9.81;
  double scale = 20.0;  // data are divided by this factor
  double noise_sigma_n = 0.05;  // in scaled units
  double drop_prob = 0.0;
  double t_min = 0.0, t_max = 6.0;
  int n_train = 20;
  double test_min = -0.1, test_max = 6.0;
  int n_test = 100;

  double v0() const { return std::sqrt(2.0 * energy / mass); }
};

/// Unscaled (z, v) in metres and metres per second.
inline Matrix free_fall_states(const FreeFallParams &p, const Vector &t) {
  Matrix out(t.size(), 2);
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    out(i, 0) = p.v0() * t(i) - 0.5 * p.g * t(i) * t(i);
    out(i, 1) = p.v0() - p.g * t(i);
  }
  return out;
}

/// The constraint m g z + (m/2) v² = E expressed on data divided by a:
/// m g z' + (m a / 2) v'² = E / a.
inline Experiment gen_free_fall(const FreeFallParams &p, std::uint64_t seed) {
  if (!(p.energy > 0.0 && p.mass > 0.0 && p.g > 0.0 && p.scale > 0.0)) throw InputError("free fall: parameters must be positive");
  std::mt19937_64 rng(seed);
  Experiment e;
  e.name = "ff";
  const Vector t = linspace(p.t_min, p.t_max, p.n_train);
  const Matrix truth = free_fall_states(p, t) / p.scale;
  Matrix obs;
  e.mask_redraws = add_noise_and_drop(truth, p.noise_sigma_n, p.drop_prob, rng, obs);
  e.train = make_dataset(t, truth, obs, {"z", "v"}, {"m", "m/s"});
  e.train.scale_factors.setConstant(1.0 / p.scale);
  e.test_inputs = linspace(p.test_min, p.test_max, p.n_test);
  e.test_truth = free_fall_states(p, e.test_inputs.col(0)) / p.scale;
  e.transform = TransformSpec::with_aux({Nonlinearity::Identity, Nonlinearity::Square}, VirtualPolicy::AtZeroCrossings);
  Matrix F(1, 3);
  F << p.mass * p.g, 0.5 * p.mass * p.scale, 0.0;
  e.constraint = ConstraintSpec::constant(F, Vector::Constant(1, p.energy / p.scale));
  return e;
}

// ---------------------------------------------------------------------------
// Logarithm plus sine

struct LogsinParams {
  double noise_sigma_n = 0.1;
  double drop_prob = 0.0;
  double x_min = -1.2, x_max = 2.0;
  int n_train = 20;
  int n_test = 100;
};

inline double logsin_f1(double x) { return 2.0 * std::exp(-5.0 * (x - 1.0) * (x - 1.0)) + std::exp(-5.0 * (x + 1.0) * (x + 1.0)) + 0.2; }
inline double logsin_f2(double x) { return -0.5 * x * x * x; }
inline double logsin_target(double x) { return std::log(logsin_f1(x)) + std::sin(logsin_f2(x)); }

inline Matrix logsin_states(const Vector &x) {
  Matrix out(x.size(), 2);
  for (Eigen::Index i = 0; i < x.size(); ++i) out.row(i) << logsin_f1(x(i)), logsin_f2(x(i));
  return out;
}

/// Noisy f₁ observations at or below zero lie outside the log's domain and
/// are marked missing before the transform.
inline Experiment gen_logsin(const LogsinParams &p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Experiment e;
  e.name = "logsin";
  const Vector x = linspace(p.x_min, p.x_max, p.n_train);
  const Matrix truth = logsin_states(x);
  Matrix obs;
  e.mask_redraws = add_noise_and_drop(truth, p.noise_sigma_n, p.drop_prob, rng, obs);
  for (Eigen::Index i = 0; i < obs.rows(); ++i)
    if (obs(i, 0) <= 0.0) obs(i, 0) = std::numeric_limits<double>::quiet_NaN();
  e.train = make_dataset(x, truth, obs, {"f1", "f2"}, {"1", "1"});
  e.test_inputs = linspace(p.x_min, p.x_max, p.n_test);
  e.test_truth = logsin_states(e.test_inputs.col(0));
  e.transform = TransformSpec::with_aux({Nonlinearity::Log, Nonlinearity::Sine}, VirtualPolicy::AtBranchCrossings);
  Matrix F(1, 3);
  F << 1.0, 1.0, 0.0;
  e.constraint = ConstraintSpec::input_dependent(
      3, 1, [F](const Vector &) { return F; }, [](const Vector &xx) { return Vector(Vector::Constant(1, logsin_target(xx(0)))); });
  return e;
}

// ---------------------------------------------------------------------------
// Triangle in the plane

struct TriangleParams {
  double noise_sigma_n = 1e-4;
  double alpha_min = 0.0, alpha_max = 5.0;
  int n_train = 20;
  int n_test = 100;
};

inline Matrix triangle_reference() {
  Matrix Z0(2, 3);
  Z0 << 4.0, 8.0, 8.4, 4.0, 4.0, 6.0;
  return Z0;
}

/// Corner coordinates at pose α as a 2×3 matrix.
inline Matrix triangle_pose(double alpha) {
  const double d = 0.5 * std::cos(2.0 * alpha);
  Matrix R(2, 2);
  R << std::cos(alpha), -std::sin(alpha), std::sin(alpha), std::cos(alpha);
  return (R * (triangle_reference().array() + d).matrix()).array() + d;
}

/// Rows [z1x, z1y, z2x, z2y, z3x, z3y] per α.
inline Matrix triangle_states(const Vector &alpha) {
  Matrix out(alpha.size(), 6);
  for (Eigen::Index i = 0; i < alpha.size(); ++i) out.row(i) = triangle_pose(alpha(i)).reshaped().transpose();
  return out;
}

/// Training data in coordinate space.  The Gram lift, its constraint and the
/// anchor are attached downstream, so `transform` is the identity over the
/// six coordinates and `constraint` is left empty.
inline Experiment gen_triangle(const TriangleParams &p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Experiment e;
  e.name = "triangle";
  const Vector a = linspace(p.alpha_min, p.alpha_max, p.n_train);
  const Matrix truth = triangle_states(a);
  Matrix obs;
  add_noise_and_drop(truth, p.noise_sigma_n, 0.0, rng, obs);
  e.train = make_dataset(a, truth, obs, {"z1x", "z1y", "z2x", "z2y", "z3x", "z3y"}, {"1", "1", "1", "1", "1", "1"});
  e.test_inputs = linspace(p.alpha_min, p.alpha_max, p.n_test);
  e.test_truth = triangle_states(e.test_inputs.col(0));
  e.transform = TransformSpec::identity(6);
  return e;
}

// ---------------------------------------------------------------------------
// Double pendulum

struct PendulumParams {
  double length_blue = 0.091;
  double length_green = 0.070;
  double mass_ratio = 6.5;  // m_b / m_g with m_g = 1
  double frame_rate = 500.0;
  double g = 9.81;
  double scale_pos = 20.0;
  double scale_vel = std::sqrt(10.0);
  double scale_time = 5.0;
  double position_unit = 1.0;  // metres per raw CSV unit
  bool flip_y = true;          // image rows grow downwards
  // Raw CSV columns of the anchor and of the blue and green markers.
  int col_anchor_x = 0, col_anchor_y = 1, col_blue_x = 2, col_blue_y = 3, col_green_x = 4, col_green_y = 5;

  double mass_blue() const { return mass_ratio; }
  double mass_green() const { return 1.0; }

  void validate() const {
    if (!(length_blue > 0 && length_green > 0 && mass_ratio > 0 && frame_rate > 0 && g > 0 && scale_pos > 0 && scale_vel > 0 &&
          scale_time > 0 && position_unit > 0))
      throw InputError("PendulumParams: all parameters must be positive");
  }
};

/// Parses a numeric CSV (optional non-numeric header, '#' comments).  Rows
/// that fail to parse raise IngestError naming the 1-based line.
inline Matrix read_numeric_csv(const std::string &path, int min_columns) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  bool header_allowed = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> vals;
    bool ok = true;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      const std::size_t end = std::min(line.find(',', pos), line.size());
      std::string cell = line.substr(pos, end - pos);
      const auto b = cell.find_first_not_of(" \t"), e = cell.find_last_not_of(" \t");
      cell = b == std::string::npos ? "" : cell.substr(b, e - b + 1);
      double v = 0.0;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
        ok = false;
        break;
      }
      vals.push_back(v);
      pos = end + 1;
    }
    if (!ok) {
      if (header_allowed) {
        header_allowed = false;
        continue;
      }
      throw IngestError(path + ": malformed row at line " + std::to_string(lineno));
    }
    header_allowed = false;
    if (static_cast<int>(vals.size()) < min_columns)
      throw IngestError(path + ": row at line " + std::to_string(lineno) + " has " + std::to_string(vals.size()) + " columns, need " +
                        std::to_string(min_columns));
    if (!rows.empty() && vals.size() != rows.front().size())
      throw IngestError(path + ": row at line " + std::to_string(lineno) + " has inconsistent column count");
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw IngestError(path + ": no data rows");
  Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return out;
}

/// Central differences with one-sided differences at both ends.
inline Matrix finite_difference(const Matrix &pos, double dt) {
  const Eigen::Index n = pos.rows();
  if (n < 2) throw InputError("finite_difference: need at least two samples");
  Matrix v(n, pos.cols());
  v.row(0) = (pos.row(1) - pos.row(0)) / dt;
  v.row(n - 1) = (pos.row(n - 1) - pos.row(n - 2)) / dt;
  for (Eigen::Index i = 1; i + 1 < n; ++i) v.row(i) = (pos.row(i + 1) - pos.row(i - 1)) / (2.0 * dt);
  return v;
}

/// Transform for the eight pendulum tasks [z_bx, z_by, z_gx, z_gy, v_bx, v_by,
/// v_gx, v_gy]: positions identity, velocities squared with aux copies.
inline TransformSpec pendulum_transform() {
  using N = Nonlinearity;
  return TransformSpec::with_aux({N::Identity, N::Identity, N::Identity, N::Identity, N::Square, N::Square, N::Square, N::Square},
                                 VirtualPolicy::AtZeroCrossings);
}

/// Energy coefficients over the twelve transformed tasks in scaled units:
/// potential terms divide by the position scale, kinetic terms by the
/// squared velocity scale.
inline Matrix pendulum_coefficients(const PendulumParams &p) {
  Matrix F = Matrix::Zero(1, 12);
  const double kv = 0.5 / (p.scale_vel * p.scale_vel);
  F(0, 1) = p.mass_blue() * p.g / p.scale_pos;
  F(0, 3) = p.mass_green() * p.g / p.scale_pos;
  F(0, 4) = F(0, 5) = p.mass_blue() * kv;
  F(0, 6) = F(0, 7) = p.mass_green() * kv;
  return F;
}

inline double energy_estimate(const TaskedDataset &data, const ConstraintSpec &spec, const TransformSpec &transform);

/// Loads `segment = (start, length)` rows of one trajectory, differentiates
/// positions for velocities and applies the scalings.  The constraint target
/// is the energy estimate over the whole segment; callers re-estimate it on
/// their training subset.
inline Experiment load_double_pendulum(const std::string &csv_path, const PendulumParams &p, std::pair<long, long> segment) {
  p.validate();
  const int need = 1 + std::max({p.col_anchor_x, p.col_anchor_y, p.col_blue_x, p.col_blue_y, p.col_green_x, p.col_green_y});
  const Matrix raw = read_numeric_csv(csv_path, need);
  const auto [start, len] = segment;
  if (start < 0 || len < 2 || start + len > raw.rows())
    throw InputError("load_double_pendulum: segment [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") outside the " + std::to_string(raw.rows()) + "-row file");
  Matrix pos(len, 4);
  const double sy = p.flip_y ? -1.0 : 1.0;
  for (long i = 0; i < len; ++i) {
    const auto r = raw.row(start + i);
    pos.row(i) << r(p.col_blue_x) - r(p.col_anchor_x), sy * (r(p.col_blue_y) - r(p.col_anchor_y)), r(p.col_green_x) - r(p.col_anchor_x),
        sy * (r(p.col_green_y) - r(p.col_anchor_y));
  }
  pos *= p.position_unit;
  const Matrix vel = finite_difference(pos, 1.0 / p.frame_rate);
  Matrix values(len, 8);
  values << p.scale_pos * pos, p.scale_vel * vel;
  Vector t(len);
  for (long i = 0; i < len; ++i) t(i) = p.scale_time * static_cast<double>(start + i) / p.frame_rate;
  Experiment e;
  e.name = "dp";
  e.train = make_dataset(t, values, values, {"z_bx", "z_by", "z_gx", "z_gy", "v_bx", "v_by", "v_gx", "v_gy"},
                         {"m", "m", "m", "m", "m/s", "m/s", "m/s", "m/s"});
  e.train.scale_factors << p.scale_pos, p.scale_pos, p.scale_pos, p.scale_pos, p.scale_vel, p.scale_vel, p.scale_vel, p.scale_vel;
  e.test_inputs = t;
  e.test_truth = values;
  e.transform = pendulum_transform();
  e.constraint = ConstraintSpec::constant(pendulum_coefficients(p), Vector::Zero(1));
  e.constraint = ConstraintSpec::constant(e.constraint.F(t.head(1)), Vector::Constant(1, energy_estimate(e.train, e.constraint, e.transform)));
  return e;
}

/// Mean over points of F(x)·h(y): the constraint value implied by the
/// observations.  Points missing any task with a nonzero coefficient are
/// skipped.
inline double energy_estimate(const TaskedDataset &data, const ConstraintSpec &spec, const TransformSpec &transform) {
  if (spec.num_constraints != 1) throw InputError("energy_estimate: needs a single-row constraint");
  const Matrix fp = forward_transform(data.observations, transform);
  double sum = 0.0;
  int count = 0;
  for (Eigen::Index i = 0; i < data.num_points(); ++i) {
    if (data.is_virtual(i)) continue;
    const Matrix F = spec.F(data.inputs.row(i).transpose());
    bool complete = true;
    double e = 0.0;
    for (Eigen::Index a = 0; a < F.cols(); ++a) {
      if (F(0, a) == 0.0) continue;
      if (std::isnan(fp(i, a))) {
        complete = false;
        break;
      }
      e += F(0, a) * fp(i, a);
    }
    if (complete) {
      sum += e;
      ++count;
    }
  }
  if (count == 0) throw InputError("energy_estimate: no point has every constrained task observed");
  return sum / count;
}

/// Lists pendulum trajectory files: a single CSV or every *.csv in a
/// directory, sorted by name.
inline std::vector<std::string> pendulum_files(const std::string &path) {
  namespace fs = std::filesystem;
  std::vector<std::string> out;
  if (fs::is_directory(path)) {
    for (const auto &entry : fs::directory_iterator(path))
      if (entry.is_regular_file() && entry.path().extension() == ".csv") out.push_back(entry.path().string());
    std::sort(out.begin(), out.end());
  } else if (fs::exists(path)) {
    out.push_back(path);
  }
  if (out.empty()) throw InputError("no pendulum CSV found at " + path);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset CSV

inline void write_dataset_csv(const std::string &path, const TaskedDataset &d) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset file " + path);
  auto join = [](const std::vector<std::string> &v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s;
  };
  out << "# tasks=" << join(d.task_names) << " units=" << join(d.units) << '\n';
  out << 'x';
  for (int a = 0; a < d.num_tasks(); ++a) out << ",y" << a + 1;
  out << '\n';
  out.precision(17);
  for (Eigen::Index i = 0; i < d.num_points(); ++i) {
    for (Eigen::Index c = 0; c < d.inputs.cols(); ++c) out << (c ? ";" : "") << d.inputs(i, c);
    for (int a = 0; a < d.num_tasks(); ++a) {
      out << ',';
      if (!d.is_missing(i, a)) out << d.observations(i, a);
    }
    out << '\n';
  }
}

}  // namespace sumgp

#pragma once

#include "sumgp/hyper_training.hpp"
#include "sumgp/pose_gram.hpp"
#include "sumgp/sim_datasets.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

namespace sumgp {

enum class ExperimentKind { HO, DHO, FF, Logsin, Triangle, DP };
enum class ModelKind { Constrained, Unconstrained, TransformedUnconstrained };

inline std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::HO: return "ho";
    case ExperimentKind::DHO: return "dho";
    case ExperimentKind::FF: return "ff";
    case ExperimentKind::Logsin: return "logsin";
    case ExperimentKind::Triangle: return "triangle";
    case ExperimentKind::DP: return "dp";
  }
  return "ho";
}

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::Constrained: return "constrained";
    case ModelKind::Unconstrained: return "unconstrained";
    case ModelKind::TransformedUnconstrained: return "transformed-unconstrained";
  }
  return "constrained";
}

inline ExperimentKind parse_experiment(const std::string &s) {
  for (auto k : {ExperimentKind::HO, ExperimentKind::DHO, ExperimentKind::FF, ExperimentKind::Logsin, ExperimentKind::Triangle,
                 ExperimentKind::DP})
    if (to_string(k) == s) return k;
  throw InputError("unknown experiment '" + s + "' (expected ho, dho, ff, logsin, triangle or dp)");
}

inline ModelKind parse_model(const std::string &s) {
  for (auto k : {ModelKind::Constrained, ModelKind::Unconstrained, ModelKind::TransformedUnconstrained})
    if (to_string(k) == s) return k;
  throw InputError("unknown model '" + s + "' (expected constrained, unconstrained or transformed-unconstrained)");
}

inline InferenceMode parse_inference(const std::string &s) {
  for (auto k : {InferenceMode::Exact, InferenceMode::Laplace, InferenceMode::Variational})
    if (to_string(k) == s) return k;
  throw InputError("unknown inference '" + s + "' (expected exact, laplace or vi)");
}

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::HO;
  ModelKind model = ModelKind::Constrained;
  InferenceMode inference = InferenceMode::Laplace;
  double noise_sigma_n = 0.1;
  double drop_prob = 0.0;
  int replicates = 50;
  std::uint64_t seed = 1;
  TrainConfig train;
  TrainConfig aux_train;  // auxiliary GP and unconstrained schedule
  InitRanges init;
  int rank = 0;  // 0: one per task
  int threads = 0;
  int n_train = 0, n_test = 0;  // 0: experiment default
  double laplace_gamma = 1.0;
  std::string out_dir = "out";
  std::string dp_csv;
  int dp_segment_length = 200;
  int dp_train_points = 15;
  PendulumParams pendulum;
  bool figures = true;
  bool trace = false;

  void validate() const {
    if (model == ModelKind::TransformedUnconstrained && experiment != ExperimentKind::Triangle)
      throw InputError("config: transformed-unconstrained is only defined for the triangle experiment");
    if (replicates < 0) throw InputError("config: replicates must be nonnegative");
    if (!(noise_sigma_n >= 0.0)) throw InputError("config: noise_sigma_n must be nonnegative");
    if (!(drop_prob >= 0.0 && drop_prob < 1.0)) throw InputError("config: drop_prob must lie in [0, 1)");
    if (experiment == ExperimentKind::DP && dp_csv.empty()) throw InputError("config: the dp experiment needs dp_csv");
    if (dp_train_points < 2 || dp_train_points >= dp_segment_length)
      throw InputError("config: dp_train_points must be at least 2 and below dp_segment_length");
    train.validate();
    aux_train.validate();
  }
};

/// Training schedules, default noise levels and inference per experiment.
inline ExperimentConfig default_config(ExperimentKind kind, ModelKind model = ModelKind::Constrained) {
  ExperimentConfig c;
  c.experiment = kind;
  c.model = model;
  c.train = {0.1, 200, 100, 0.5};
  switch (kind) {
    case ExperimentKind::HO:
    case ExperimentKind::DHO: c.noise_sigma_n = 0.1; break;
    case ExperimentKind::FF: c.noise_sigma_n = 0.05; break;
    case ExperimentKind::Logsin:
      c.noise_sigma_n = 0.1;
      c.train.guard_lengthscale = c.train.guard_loss_std = true;
      break;
    case ExperimentKind::Triangle:
      c.noise_sigma_n = 1e-4;
      c.inference = InferenceMode::Exact;
      c.train = {0.1, 2000, 800, 0.2};
      break;
    case ExperimentKind::DP:
      c.noise_sigma_n = 0.0;
      c.inference = InferenceMode::Exact;
      c.train = model == ModelKind::Constrained ? TrainConfig{0.1, 2000, 800, 0.2} : TrainConfig{0.1, 2000, 500, 0.5};
      break;
  }
  c.aux_train = c.train;
  if (kind == ExperimentKind::DP) c.aux_train = {0.1, 2000, 500, 0.5};
  if (model != ModelKind::Constrained && kind != ExperimentKind::Triangle) c.inference = InferenceMode::Exact;
  return c;
}

namespace detail {

inline std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline double to_double(const std::string &key, const std::string &v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) throw InputError("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

inline long to_long(const std::string &key, const std::string &v) {
  long out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) throw InputError("config: " + key + " expects an integer, got '" + v + "'");
  return out;
}

inline bool to_bool(const std::string &key, const std::string &v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw InputError("config: " + key + " expects a boolean, got '" + v + "'");
}

}  // namespace detail

/// Applies `key = value` settings.  `experiment` and `model` select the
/// defaults, so they are applied first whatever their position.
inline ExperimentConfig config_from_map(const std::map<std::string, std::string> &kv) {
  const auto get = [&](const char *k) { return kv.count(k) ? std::optional<std::string>(kv.at(k)) : std::nullopt; };
  ExperimentConfig c = default_config(get("experiment") ? parse_experiment(*get("experiment")) : ExperimentKind::HO,
                                      get("model") ? parse_model(*get("model")) : ModelKind::Constrained);
  using namespace detail;
  for (const auto &[k, v] : kv) {
    if (k == "experiment" || k == "model") continue;
    if (k == "inference") c.inference = parse_inference(v);
    else if (k == "noise_sigma_n" || k == "sigma") c.noise_sigma_n = to_double(k, v);
    else if (k == "drop_prob_fd" || k == "drop_prob" || k == "fd") c.drop_prob = to_double(k, v);
    else if (k == "replicates") c.replicates = static_cast<int>(to_long(k, v));
    else if (k == "seed") c.seed = static_cast<std::uint64_t>(to_long(k, v));
    else if (k == "learning_rate") c.train.learning_rate = c.aux_train.learning_rate = to_double(k, v);
    else if (k == "iterations") c.train.iterations = c.aux_train.iterations = static_cast<int>(to_long(k, v));
    else if (k == "scheduler_steps") c.train.scheduler_steps = static_cast<int>(to_long(k, v));
    else if (k == "scheduler_factor") c.train.scheduler_factor = to_double(k, v);
    else if (k == "aux_scheduler_steps") c.aux_train.scheduler_steps = static_cast<int>(to_long(k, v));
    else if (k == "aux_scheduler_factor") c.aux_train.scheduler_factor = to_double(k, v);
    else if (k == "max_restarts") c.train.max_restarts = c.aux_train.max_restarts = static_cast<int>(to_long(k, v));
    else if (k == "guard_lengthscale") c.train.guard_lengthscale = c.aux_train.guard_lengthscale = to_bool(k, v);
    else if (k == "guard_loss_std") c.train.guard_loss_std = c.aux_train.guard_loss_std = to_bool(k, v);
    else if (k == "init_lengthscale_lo") c.init.lengthscale_lo = to_double(k, v);
    else if (k == "init_lengthscale_hi") c.init.lengthscale_hi = to_double(k, v);
    else if (k == "rank") c.rank = static_cast<int>(to_long(k, v));
    else if (k == "threads") c.threads = static_cast<int>(to_long(k, v));
    else if (k == "n_train") c.n_train = static_cast<int>(to_long(k, v));
    else if (k == "n_test") c.n_test = static_cast<int>(to_long(k, v));
    else if (k == "laplace_gamma") c.laplace_gamma = to_double(k, v);
    else if (k == "out_dir") c.out_dir = v;
    else if (k == "dp_csv") c.dp_csv = v;
    else if (k == "dp_segment_length") c.dp_segment_length = static_cast<int>(to_long(k, v));
    else if (k == "dp_train_points") c.dp_train_points = static_cast<int>(to_long(k, v));
    else if (k == "frame_rate") c.pendulum.frame_rate = to_double(k, v);
    else if (k == "mass_ratio") c.pendulum.mass_ratio = to_double(k, v);
    else if (k == "position_unit") c.pendulum.position_unit = to_double(k, v);
    else if (k == "flip_y") c.pendulum.flip_y = to_bool(k, v);
    else if (k == "figures") c.figures = to_bool(k, v);
    else if (k == "trace") c.trace = to_bool(k, v);
    else throw InputError("config: unknown key '" + k + "'");
  }
  c.validate();
  return c;
}

/// Flat `key = value` text; '#' starts a comment.
inline ExperimentConfig parse_config(const std::string &text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    if (kv.count(key)) throw InputError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv[key] = detail::trim(line.substr(eq + 1));
  }
  return config_from_map(kv);
}

inline ExperimentConfig load_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string canonical_string(const ExperimentConfig &c) {
  std::ostringstream s;
  s.precision(17);
  s << "experiment=" << to_string(c.experiment) << ";model=" << to_string(c.model) << ";inference=" << to_string(c.inference)
    << ";sigma=" << c.noise_sigma_n << ";fd=" << c.drop_prob << ";replicates=" << c.replicates << ";seed=" << c.seed
    << ";lr=" << c.train.learning_rate << ";iter=" << c.train.iterations << ";steps=" << c.train.scheduler_steps
    << ";factor=" << c.train.scheduler_factor << ";aux_steps=" << c.aux_train.scheduler_steps
    << ";aux_factor=" << c.aux_train.scheduler_factor << ";restarts=" << c.train.max_restarts
    << ";guards=" << c.train.guard_lengthscale << c.train.guard_loss_std << ";rank=" << c.rank << ";n_train=" << c.n_train
    << ";n_test=" << c.n_test << ";gamma=" << c.laplace_gamma << ";init=" << c.init.lengthscale_lo << ',' << c.init.lengthscale_hi
    << ";dp=" << c.dp_csv << ',' << c.dp_segment_length << ',' << c.dp_train_points << ',' << c.pendulum.frame_rate << ','
    << c.pendulum.mass_ratio;
  return s.str();
}

/// FNV-1a, printed as 16 hex digits.
inline std::string config_hash(const ExperimentConfig &c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : canonical_string(c)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// SplitMix64 step, used to derive independent seeds per replicate and stage.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double rmse = 0.0;
  double abs_dC = 0.0;
};

/// Constraint residual |F(x)·h(f(x)) - S(x)| averaged over points and rows.
/// Log tasks see their argument floored at 1e-12 so a nonpositive
/// unconstrained prediction yields a large but finite violation.
inline double mean_constraint_violation(const Matrix &pred, const Matrix &X, const ConstraintSpec &spec, const TransformSpec &transform) {
  Matrix safe = pred;
  for (int a = 0; a < transform.num_original(); ++a)
    if (transform.tasks[a].kind == Nonlinearity::Log) safe.col(a) = safe.col(a).cwiseMax(1e-12);
  const Matrix fp = forward_transform(safe, transform);
  double total = 0.0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const Vector x = X.row(i).transpose();
    total += (spec.F(x) * fp.row(i).transpose() - spec.S(x)).cwiseAbs().sum();
  }
  return total / static_cast<double>(X.rows() * spec.num_constraints);
}

inline Metrics compute_metrics(const Matrix &pred, const Matrix &truth, const Matrix &X, const ConstraintSpec &spec,
                               const TransformSpec &transform) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols() || pred.rows() != X.rows())
    throw InputError("compute_metrics: prediction grid differs from the truth grid");
  return {std::sqrt((pred - truth).squaredNorm() / static_cast<double>(pred.size())),
          mean_constraint_violation(pred, X, spec, transform)};
}

// ---------------------------------------------------------------------------
// Replicate pipeline

/// Curves needed for one figure, all in original task space.
struct CurveSet {
  std::vector<std::string> names;
  Vector x_test;
  Matrix mean, lower, upper, truth;
  Vector x_train;
  Matrix y_train;
  std::vector<std::pair<double, int>> virtual_points;  // (x, original task)
};

struct ReplicateResult {
  int index = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  Metrics metrics;
  int restarts = 0;
  long clamps = 0;
  double seconds = 0.0;
  CurveSet curves;
};

struct FitOutcome {
  ModelSpec spec;
  TrainResult result;
};

inline FitOutcome fit_model(const ModelSpec &spec, const TaskedDataset &data, TrainConfig tc, const InitRanges &ranges,
                            std::uint64_t seed, const std::string &trace_path = "") {
  tc.seed = seed;
  ModelObjective objective(spec, data, Hyperparameters::defaults(spec.num_tasks, spec.rank));
  FitOutcome out{spec, train(objective, tc, [&](std::mt19937_64 &rng) { return random_hyperparameters(data, spec.rank, rng, ranges); })};
  if (!trace_path.empty()) write_trace_csv(trace_path, out.result.trace);
  return out;
}

inline ModelSpec plain_spec(int tasks, int rank) { return ModelSpec::gaussian(tasks, rank > 0 ? rank : tasks); }

namespace detail {

inline Vector dense_grid(const Vector &a, const Vector &b, int n) {
  return linspace(std::min(a.minCoeff(), b.minCoeff()), std::max(a.maxCoeff(), b.maxCoeff()), n);
}

inline std::string trace_path(const ExperimentConfig &cfg, int rep, const char *stage) {
  if (!cfg.trace) return "";
  std::filesystem::create_directories(cfg.out_dir);
  return (std::filesystem::path(cfg.out_dir) / ("trace_" + std::to_string(rep) + "_" + stage + ".csv")).string();
}

inline CurveSet base_curves(const Experiment &e) {
  CurveSet c;
  c.names = e.train.task_names;
  c.x_test = e.test_inputs.col(0);
  c.truth = e.test_truth;
  c.x_train = e.train.inputs.col(0);
  c.y_train = e.train.observations;
  return c;
}

}  // namespace detail

/// Unconstrained GP on the original tasks, or the three-step constrained
/// procedure: (1) an exact GP on the original tasks supplies auxiliary
/// curves, crossings and virtual measurements; (2) the constrained GP is
/// trained on the transformed tasks; (3) predictions are transformed back
/// with the auxiliary signs and branches.
inline ReplicateResult run_transformed_pipeline(const Experiment &e, const ConstraintSpec &eval_constraint, const ExperimentConfig &cfg,
                                                int rep, std::uint64_t seed) {
  ReplicateResult r;
  const TransformSpec &spec = e.transform;
  const int T = spec.num_original();
  const Vector xt = e.test_inputs.col(0);
  r.curves = detail::base_curves(e);

  const FitOutcome step1 =
      fit_model(plain_spec(T, cfg.rank), e.train, cfg.aux_train, cfg.init, derive_seed(seed, 1), detail::trace_path(cfg, rep, "aux"));
  r.restarts += step1.result.restarts;
  const Vector dense = detail::dense_grid(e.train.inputs.col(0), xt, 10 * static_cast<int>(xt.size()));
  const Prediction p1 = predict(step1.spec, step1.result.hp, e.train, stack_inputs(e.test_inputs, Matrix(dense)));
  const Eigen::Index nt = xt.size();
  const Matrix aux_test = p1.mean.topRows(nt), var_test = p1.var.topRows(nt);
  const Matrix aux_dense = p1.mean.bottomRows(dense.size());

  if (cfg.model != ModelKind::Constrained) {
    r.curves.mean = aux_test;
    r.curves.lower = aux_test - 2.0 * var_test.cwiseSqrt();
    r.curves.upper = aux_test + 2.0 * var_test.cwiseSqrt();
    r.metrics = compute_metrics(aux_test, e.test_truth, e.test_inputs, eval_constraint, spec);
    r.ok = true;
    return r;
  }

  std::vector<Crossing> crossings;
  for (int a = 0; a < T; ++a) {
    if (!spec.tasks[a].needs_aux()) continue;
    const Vector curve = aux_dense.col(a);
    for (auto c : find_branch_crossings(dense, curve, spec.crossing_levels(a, curve.minCoeff(), curve.maxCoeff()))) {
      c.task = a;
      crossings.push_back(c);
    }
  }
  const auto records = make_virtual_measurements(crossings, spec);
  for (const auto &v : records) r.curves.virtual_points.emplace_back(v.x, v.task);
  const TaskedDataset data2 = append_virtual(apply_transform(e.train, spec), records);

  const int T2 = spec.num_transformed();
  ModelSpec ms;
  ms.num_tasks = T2;
  ms.rank = cfg.rank > 0 ? cfg.rank : T2;
  ms.inference = cfg.inference;
  ms.likelihoods = cfg.inference == InferenceMode::Exact ? LikelihoodKinds(static_cast<std::size_t>(T2)) : spec.likelihood_kinds();
  ms.constraint = e.constraint;
  ms.laplace_gamma = cfg.laplace_gamma;
  const FitOutcome step2 = fit_model(ms, data2, cfg.train, cfg.init, derive_seed(seed, 2), detail::trace_path(cfg, rep, "model"));
  r.restarts += step2.result.restarts;
  const Prediction p2 = predict(ms, step2.result.hp, data2, e.test_inputs, step2.result.variational);

  const BacktransformContext ctx = make_backtransform_context(spec, xt, aux_test, dense, aux_dense);
  BacktransformDiagnostics diag;
  const Matrix fp = p2.mean.leftCols(T);
  const Matrix sd = p2.var.leftCols(T).cwiseSqrt();
  r.curves.mean = backtransform(fp, ctx, spec, &diag);
  std::tie(r.curves.lower, r.curves.upper) = backtransform_intervals(fp - 2.0 * sd, fp + 2.0 * sd, ctx, spec);
  r.clamps = diag.square_clamps + diag.sine_clamps;
  r.metrics = compute_metrics(r.curves.mean, e.test_truth, e.test_inputs, eval_constraint, spec);
  r.ok = true;
  return r;
}

/// Triangle: coordinates, Gram lift with or without the length constraint,
/// and recovery of coordinates with reflection resolved by continuity.
inline ReplicateResult run_triangle(const Experiment &e, const ExperimentConfig &cfg, int rep, std::uint64_t seed) {
  ReplicateResult r;
  r.curves = detail::base_curves(e);
  const AnchorPoint anchor;
  const ConstraintSpec lengths = triangle_constraints_for(triangle_reference(), anchor);
  const Vector xt = e.test_inputs.col(0);
  Matrix coords;
  if (cfg.model == ModelKind::Unconstrained) {
    const FitOutcome fit = fit_model(plain_spec(6, cfg.rank), e.train, cfg.train, cfg.init, derive_seed(seed, 2),
                                     detail::trace_path(cfg, rep, "model"));
    r.restarts = fit.result.restarts;
    const Prediction p = predict(fit.spec, fit.result.hp, e.train, e.test_inputs);
    coords = p.mean;
    r.curves.lower = p.mean - 2.0 * p.var.cwiseSqrt();
    r.curves.upper = p.mean + 2.0 * p.var.cwiseSqrt();
  } else {
    TaskedDataset lifted = e.train;
    lifted.observations = lift_rows(e.train.observations, anchor);
    lifted.ground_truth = lift_rows(*e.train.ground_truth, anchor);
    lifted.task_names = {"Q11", "Q12", "Q13", "Q14", "Q22", "Q23", "Q24", "Q33", "Q34", "Q44"};
    lifted.units.assign(kGramSize, "1");
    lifted.scale_factors = Vector::Ones(kGramSize);
    ModelSpec ms = plain_spec(kGramSize, cfg.rank);
    if (cfg.model == ModelKind::Constrained) ms.constraint = lengths;
    const FitOutcome fit = fit_model(ms, lifted, cfg.train, cfg.init, derive_seed(seed, 2), detail::trace_path(cfg, rep, "model"));
    r.restarts = fit.result.restarts;
    const Prediction p = predict(ms, fit.result.hp, lifted, e.test_inputs);
    coords.resize(xt.size(), 6);
    RecoveryDiagnostics diag;
    Matrix prev;
    for (Eigen::Index i = 0; i < xt.size(); ++i) {
      if (i == 0) {
        Eigen::Index nearest = 0;
        (e.train.inputs.col(0).array() - xt(0)).abs().minCoeff(&nearest);
        prev = pose_from_row(e.train.observations.row(nearest).transpose(), anchor);
      }
      prev = recover_coordinates(p.mean.row(i).transpose(), anchor, &prev, &diag);
      coords.row(i) = row_from_pose(prev).transpose();
    }
    r.clamps = diag.negative_eigenvalue_clamps;
    r.curves.lower = r.curves.upper = coords;
  }
  r.curves.mean = coords;
  r.metrics.rmse = std::sqrt((coords - e.test_truth).squaredNorm() / static_cast<double>(coords.size()));
  const Matrix q = lift_rows(coords, anchor);
  r.metrics.abs_dC = mean_constraint_violation(q, e.test_inputs, lengths, TransformSpec::identity(kGramSize));
  r.ok = true;
  return r;
}

/// Random segment of one recorded trajectory: trajectory uniform, start
/// uniform over the second half, training points uniform without
/// replacement.  The constraint target is the training-point energy
/// estimate; violations are measured against the whole-segment estimate.
inline ReplicateResult run_pendulum(const ExperimentConfig &cfg, int rep, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0));
  const auto files = pendulum_files(cfg.dp_csv);
  const std::string &file = files[std::uniform_int_distribution<std::size_t>(0, files.size() - 1)(rng)];
  const Eigen::Index rows = read_numeric_csv(file, 1).rows();
  const long len = cfg.dp_segment_length;
  const long lo = rows / 2, hi = static_cast<long>(rows) - len;
  if (hi < lo) throw InputError("pendulum file " + file + " is too short for a " + std::to_string(len) + "-point segment");
  const long start = std::uniform_int_distribution<long>(lo, hi)(rng);
  const Experiment seg = load_double_pendulum(file, cfg.pendulum, {start, len});

  std::vector<Eigen::Index> idx(static_cast<std::size_t>(len));
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<Eigen::Index> tr(idx.begin(), idx.begin() + cfg.dp_train_points), te(idx.begin() + cfg.dp_train_points, idx.end());
  std::sort(tr.begin(), tr.end());
  std::sort(te.begin(), te.end());

  Experiment e = seg;
  const std::vector<Eigen::Index> all_cols = [&] {
    std::vector<Eigen::Index> c(8);
    std::iota(c.begin(), c.end(), 0);
    return c;
  }();
  e.train = make_dataset(seg.train.inputs(tr, Eigen::all), seg.test_truth(tr, all_cols), seg.train.observations(tr, all_cols),
                         seg.train.task_names, seg.train.units);
  e.train.scale_factors = seg.train.scale_factors;
  e.test_inputs = seg.test_inputs(te, Eigen::all);
  e.test_truth = seg.test_truth(te, all_cols);
  const Matrix F = pendulum_coefficients(cfg.pendulum);
  const ConstraintSpec shape = ConstraintSpec::constant(F, Vector::Zero(1));
  e.constraint = ConstraintSpec::constant(F, Vector::Constant(1, energy_estimate(e.train, shape, e.transform)));
  const ConstraintSpec eval = ConstraintSpec::constant(F, Vector::Constant(1, energy_estimate(seg.train, shape, e.transform)));
  return run_transformed_pipeline(e, eval, cfg, rep, seed);
}

inline Experiment generate_experiment(const ExperimentConfig &cfg, std::uint64_t seed) {
  switch (cfg.experiment) {
    case ExperimentKind::HO:
    case ExperimentKind::DHO: {
      OscillatorParams p;
      p.noise_sigma_n = cfg.noise_sigma_n;
      p.drop_prob = cfg.drop_prob;
      if (cfg.experiment == ExperimentKind::DHO) p.damping = 0.1;
      if (cfg.n_train) p.n_train = cfg.n_train;
      if (cfg.n_test) p.n_test = cfg.n_test;
      return cfg.experiment == ExperimentKind::HO ? gen_harmonic_oscillator(p, seed) : gen_damped_oscillator(p, seed);
    }
    case ExperimentKind::FF: {
      FreeFallParams p;
      p.noise_sigma_n = cfg.noise_sigma_n;
      p.drop_prob = cfg.drop_prob;
      if (cfg.n_train) p.n_train = cfg.n_train;
      if (cfg.n_test) p.n_test = cfg.n_test;
      return gen_free_fall(p, seed);
    }
    case ExperimentKind::Logsin: {
      LogsinParams p;
      p.noise_sigma_n = cfg.noise_sigma_n;
      p.drop_prob = cfg.drop_prob;
      if (cfg.n_train) p.n_train = cfg.n_train;
      if (cfg.n_test) p.n_test = cfg.n_test;
      return gen_logsin(p, seed);
    }
    case ExperimentKind::Triangle: {
      TriangleParams p;
      p.noise_sigma_n = cfg.noise_sigma_n;
      if (cfg.n_train) p.n_train = cfg.n_train;
      if (cfg.n_test) p.n_test = cfg.n_test;
      return gen_triangle(p, seed);
    }
    case ExperimentKind::DP: break;
  }
  throw InputError("generate_experiment: the dp experiment is loaded, not generated");
}

inline std::uint64_t replicate_seed(const ExperimentConfig &cfg, int rep) { return cfg.seed + static_cast<std::uint64_t>(rep); }

/// One replicate; training failures mark the replicate failed instead of
/// aborting the run.
inline ReplicateResult run_replicate(const ExperimentConfig &cfg, int rep) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t seed = replicate_seed(cfg, rep);
  ReplicateResult r;
  try {
    if (cfg.experiment == ExperimentKind::DP) {
      r = run_pendulum(cfg, rep, seed);
    } else {
      const Experiment e = generate_experiment(cfg, seed);
      r = cfg.experiment == ExperimentKind::Triangle ? run_triangle(e, cfg, rep, seed)
                                                     : run_transformed_pipeline(e, e.constraint, cfg, rep, seed);
    }
  } catch (const TrainingError &e) {
    r = {};
    r.error = e.what();
  } catch (const NumericError &e) {
    r = {};
    r.error = e.what();
  }
  r.index = rep;
  r.seed = seed;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Report

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation
  int n = 0;
};

inline Aggregate aggregate(const std::vector<double> &v) {
  Aggregate a;
  a.n = static_cast<int>(v.size());
  if (v.empty()) return a;
  for (double x : v) a.mean += x;
  a.mean /= a.n;
  if (a.n > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - a.mean) * (x - a.mean);
    a.std = std::sqrt(ss / (a.n - 1));
  }
  return a;
}

struct Report {
  ExperimentConfig config;
  std::vector<ReplicateResult> replicates;
  Aggregate rmse, abs_dC;
  int failed = 0;
  double runtime_seconds = 0.0;
  std::string hash;

  void recompute() {
    std::vector<double> a, b;
    failed = 0;
    for (const auto &r : replicates) {
      if (!r.ok) {
        ++failed;
        continue;
      }
      a.push_back(r.metrics.rmse);
      b.push_back(r.metrics.abs_dC);
    }
    rmse = aggregate(a);
    abs_dC = aggregate(b);
  }
};

using ProgressCallback = std::function<void(const ReplicateResult &)>;

/// Runs every replicate on a worker pool.  Results land in replicate order,
/// so the report does not depend on scheduling.
inline Report run_experiment(const ExperimentConfig &cfg, const ProgressCallback &progress = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Report rep;
  rep.config = cfg;
  rep.hash = config_hash(cfg);
  rep.replicates.resize(static_cast<std::size_t>(cfg.replicates));
  const int workers = std::max(1, std::min(cfg.replicates, cfg.threads > 0 ? cfg.threads : static_cast<int>(std::thread::hardware_concurrency())));
  std::atomic<int> next{0};
  std::mutex sink;
  std::exception_ptr first_error;
  auto work = [&] {
    for (int k; (k = next.fetch_add(1)) < cfg.replicates;) {
      try {
        ReplicateResult r = run_replicate(cfg, k);
        std::lock_guard<std::mutex> lock(sink);
        if (progress) progress(r);
        rep.replicates[static_cast<std::size_t>(k)] = std::move(r);
      } catch (...) {
        std::lock_guard<std::mutex> lock(sink);
        if (!first_error) first_error = std::current_exception();
        next = cfg.replicates;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto &t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  rep.recompute();
  rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// ---------------------------------------------------------------------------
// Output files

inline void write_report_csv(const std::string &path, const Report &rep) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.precision(10);
  out << "replicate,seed,status,rmse,abs_dC,rmse_std,abs_dC_std,restarts,clamps,seconds\n";
  if (rep.replicates.empty()) return;
  int restarts = 0;
  long clamps = 0;
  for (const auto &r : rep.replicates) {
    restarts += r.restarts;
    clamps += r.clamps;
    out << r.index << ',' << r.seed << ',' << (r.ok ? "ok" : "failed") << ',';
    if (r.ok) out << r.metrics.rmse << ',' << r.metrics.abs_dC;
    else out << ',';
    out << ",,," << r.restarts << ',' << r.clamps << ',' << r.seconds << '\n';
  }
  out << "aggregate,," << "n=" << rep.rmse.n << ";failed=" << rep.failed << ',' << rep.rmse.mean << ',' << rep.abs_dC.mean << ','
      << rep.rmse.std << ',' << rep.abs_dC.std << ',' << restarts << ',' << clamps << ',' << rep.runtime_seconds << '\n';
}

inline std::string format_pm(const Aggregate &a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g ± %.2g", a.mean, a.std);
  return buf;
}

inline void write_table_md(const std::string &path, const Report &rep) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  const auto &c = rep.config;
  out << "| experiment | model | inference | sigma_n | f_d | RMSE | abs dC | n | failed |\n";
  out << "|---|---|---|---|---|---|---|---|---|\n";
  out << "| " << to_string(c.experiment) << " | " << to_string(c.model) << " | " << to_string(c.inference) << " | " << c.noise_sigma_n
      << " | " << c.drop_prob << " | " << format_pm(rep.rmse) << " | " << format_pm(rep.abs_dC) << " | " << rep.rmse.n << " | "
      << rep.failed << " |\n\n";
  out << "config hash " << rep.hash << ", seeds " << c.seed << ".." << c.seed + static_cast<std::uint64_t>(std::max(0, c.replicates - 1))
      << ", runtime " << rep.runtime_seconds << " s\n";
}

/// Stacked panels, one per task: 2σ band, posterior mean, dashed truth,
/// training data as dots and virtual measurements as squares.
inline void write_figure_svg(const std::string &path, const CurveSet &c, const std::string &title) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  const int W = 640, H = 180, pad = 40;
  const int T = static_cast<int>(c.mean.cols());
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << W
      << "\" height=\"" << H * T + 30 << "\">\n<text x=\"10\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  const double x0 = std::min(c.x_test.minCoeff(), c.x_train.size() ? c.x_train.minCoeff() : c.x_test.minCoeff());
  const double x1 = std::max(c.x_test.maxCoeff(), c.x_train.size() ? c.x_train.maxCoeff() : c.x_test.maxCoeff());
  for (int a = 0; a < T; ++a) {
    double y0 = std::min({c.lower.col(a).minCoeff(), c.truth.col(a).minCoeff(), c.mean.col(a).minCoeff()});
    double y1 = std::max({c.upper.col(a).maxCoeff(), c.truth.col(a).maxCoeff(), c.mean.col(a).maxCoeff()});
    if (!(y1 > y0)) y1 = y0 + 1.0;
    const int top = 30 + a * H;
    auto px = [&](double x) { return pad + (W - 2 * pad) * (x - x0) / (x1 - x0); };
    auto py = [&](double y) { return top + H - 20 - (H - 40) * (y - y0) / (y1 - y0); };
    auto polyline = [&](const Vector &y, const char *style) {
      out << "<polyline fill=\"none\" " << style << " points=\"";
      for (Eigen::Index i = 0; i < y.size(); ++i) out << px(c.x_test(i)) << ',' << py(y(i)) << ' ';
      out << "\"/>\n";
    };
    out << "<text x=\"5\" y=\"" << top + 15 << "\" font-size=\"12\">" << (a < static_cast<int>(c.names.size()) ? c.names[a] : "") << "</text>\n";
    out << "<polygon fill=\"#9ecae1\" fill-opacity=\"0.5\" stroke=\"none\" points=\"";
    for (Eigen::Index i = 0; i < c.x_test.size(); ++i) out << px(c.x_test(i)) << ',' << py(c.upper(i, a)) << ' ';
    for (Eigen::Index i = c.x_test.size() - 1; i >= 0; --i) out << px(c.x_test(i)) << ',' << py(c.lower(i, a)) << ' ';
    out << "\"/>\n";
    polyline(c.truth.col(a), "stroke=\"black\" stroke-dasharray=\"4,3\"");
    polyline(c.mean.col(a), "stroke=\"#08519c\" stroke-width=\"1.5\"");
    for (Eigen::Index i = 0; i < c.x_train.size(); ++i)
      if (!std::isnan(c.y_train(i, a)))
        out << "<circle cx=\"" << px(c.x_train(i)) << "\" cy=\"" << py(c.y_train(i, a)) << "\" r=\"3\" fill=\"#d94801\"/>\n";
    for (const auto &[x, task] : c.virtual_points)
      if (task == a) out << "<rect x=\"" << px(x) - 4 << "\" y=\"" << py(0.0) - 4 << "\" width=\"8\" height=\"8\" fill=\"#54278f\"/>\n";
  }
  out << "</svg>\n";
}

inline void emit_outputs(const Report &rep, const std::string &out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + out_dir + ": " + ec.message());
  const std::filesystem::path dir(out_dir);
  write_report_csv((dir / "report.csv").string(), rep);
  write_table_md((dir / "table.md").string(), rep);
  if (!rep.config.figures) return;
  for (const auto &r : rep.replicates)
    if (r.ok && r.curves.mean.size())
      write_figure_svg((dir / ("figure_" + std::to_string(r.index) + ".svg")).string(), r.curves,
                       to_string(rep.config.experiment) + " " + to_string(rep.config.model) + " replicate " + std::to_string(r.index));
}

}  // namespace sumgp

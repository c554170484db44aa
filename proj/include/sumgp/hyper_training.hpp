#pragma once

#include "sumgp/model.hpp"

#include <fstream>
#include <functional>

namespace sumgp {

struct TrainConfig {
  double learning_rate = 0.1;
  int iterations = 200;
  int scheduler_steps = 100;
  double scheduler_factor = 0.5;
  int max_restarts = 10;
  std::uint64_t seed = 0;
  // Guards beyond the numeric-error restart; off unless an experiment opts in.
  bool guard_lengthscale = false;
  double min_lengthscale = 0.1;
  bool guard_loss_std = false;
  int loss_window = 40;
  double max_loss_std = 0.1;

  void validate() const {
    if (!(learning_rate > 0.0)) throw InputError("TrainConfig: learning_rate must be positive");
    if (iterations <= 0) throw InputError("TrainConfig: iterations must be positive");
    if (scheduler_steps <= 0 || scheduler_steps > iterations)
      throw InputError("TrainConfig: scheduler_steps must lie in [1, iterations]");
    if (!(scheduler_factor > 0.0 && scheduler_factor <= 1.0)) throw InputError("TrainConfig: scheduler_factor must lie in (0, 1]");
    if (max_restarts < 0) throw InputError("TrainConfig: max_restarts must be nonnegative");
  }

  /// Step schedule: lr · factor^⌊t / steps⌋.
  double learning_rate_at(int t) const { return learning_rate * std::pow(scheduler_factor, t / scheduler_steps); }
};

/// Adam ascent with the usual bias-corrected moments.
class Adam {
 public:
  explicit Adam(Eigen::Index n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(Vector::Zero(n)), v_(Vector::Zero(n)), b1_(beta1), b2_(beta2), eps_(eps) {}

  void ascend(Vector &theta, const Vector &grad, double lr) {
    ++t_;
    m_ = b1_ * m_ + (1.0 - b1_) * grad;
    v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    theta.array() += lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

 private:
  Vector m_, v_;
  double b1_, b2_, eps_;
  int t_ = 0;
};

struct TrainTrace {
  std::vector<int> iter;
  std::vector<double> lml, lr, lengthscale;

  void clear() { *this = {}; }
  std::size_t size() const { return iter.size(); }
};

inline void write_trace_csv(const std::string &path, const TrainTrace &trace) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write trace file " + path);
  out << "iter,lml,lr,lengthscale\n";
  out.precision(17);
  for (std::size_t k = 0; k < trace.size(); ++k)
    out << trace.iter[k] << ',' << trace.lml[k] << ',' << trace.lr[k] << ',' << trace.lengthscale[k] << '\n';
}

struct TrainDiagnostics {
  bool numeric_error = false;
  std::string error_message;
  double lengthscale = 1.0;
  std::vector<double> losses;  // per-iteration loss, -objective / #observations
};

enum class GuardVerdict { Accept, Restart };

inline double trailing_std(const std::vector<double> &x, int window) {
  if (x.empty()) return 0.0;
  const auto n = std::min<std::size_t>(x.size(), static_cast<std::size_t>(window));
  double mean = 0.0;
  for (auto it = x.end() - static_cast<std::ptrdiff_t>(n); it != x.end(); ++it) mean += *it;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (auto it = x.end() - static_cast<std::ptrdiff_t>(n); it != x.end(); ++it) ss += (*it - mean) * (*it - mean);
  return n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
}

inline GuardVerdict restart_guard(const TrainDiagnostics &d, const TrainConfig &cfg) {
  if (d.numeric_error) return GuardVerdict::Restart;
  if (cfg.guard_lengthscale && d.lengthscale < cfg.min_lengthscale) return GuardVerdict::Restart;
  if (cfg.guard_loss_std && trailing_std(d.losses, cfg.loss_window) > cfg.max_loss_std) return GuardVerdict::Restart;
  return GuardVerdict::Accept;
}

/// Sampling ranges for fresh initializations; lengthscale bounds are
/// multiples of the input range.
struct InitRanges {
  double lengthscale_lo = 0.03, lengthscale_hi = 0.3;
  double sigma_lo = 0.1, sigma_hi = 1.0;
  double factor_sd = 0.5;
};

inline Hyperparameters random_hyperparameters(const TaskedDataset &data, int rank, std::mt19937_64 &rng,
                                              const InitRanges &r = {}) {
  const int T = data.num_tasks();
  Hyperparameters hp = Hyperparameters::defaults(T, rank);
  double range = (data.inputs.colwise().maxCoeff() - data.inputs.colwise().minCoeff()).norm();
  if (!(range > 0.0)) range = 1.0;
  auto log_uniform = [&](double lo, double hi) {
    return std::exp(std::uniform_real_distribution<double>(std::log(lo), std::log(hi))(rng));
  };
  hp.lengthscale = range * log_uniform(r.lengthscale_lo, r.lengthscale_hi);
  hp.sigma_f = log_uniform(r.sigma_lo, r.sigma_hi);
  hp.noise_sigma_n = log_uniform(r.sigma_lo, r.sigma_hi);
  std::normal_distribution<double> nd(0.0, r.factor_sd);
  for (Eigen::Index i = 0; i < hp.task_factor_B.size(); ++i) hp.task_factor_B.data()[i] = nd(rng);
  hp.task_diag_v.setOnes();
  for (int a = 0; a < T; ++a) {
    double s = 0.0;
    int n = 0;
    for (Eigen::Index i = 0; i < data.num_points(); ++i)
      if (!data.is_missing(i, a)) {
        s += data.observations(i, a);
        ++n;
      }
    hp.task_means(a) = n ? s / n : 0.0;
  }
  return hp;
}

struct TrainResult {
  Hyperparameters hp;
  Vector theta;
  std::optional<WhitenedVariational> variational;
  TrainTrace trace;
  int restarts = 0;
  double final_objective = 0.0;
};

using Initializer = std::function<Hyperparameters(std::mt19937_64 &)>;

/// Maximizes the model objective with Adam from a random start, restarting
/// from a fresh draw whenever the guard rejects a run.
inline TrainResult train(ModelObjective &objective, const TrainConfig &cfg, const Initializer &init) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const double n_obs = static_cast<double>(objective.num_observed());
  TrainDiagnostics last;
  for (int attempt = 0; attempt <= cfg.max_restarts; ++attempt) {
    TrainResult res;
    res.restarts = attempt;
    TrainDiagnostics diag;
    objective.reset_warm_start();
    Vector theta = objective.initial_parameters(init(rng));
    Adam adam(theta.size());
    try {
      for (int t = 0; t <= cfg.iterations; ++t) {
        const ObjectiveValue ov = objective.evaluate(theta);
        if (!std::isfinite(ov.value) || !ov.gradient.allFinite())
          throw NumericError("training: non-finite objective or gradient at iteration " + std::to_string(t));
        const double lr = cfg.learning_rate_at(t);
        res.trace.iter.push_back(t);
        res.trace.lml.push_back(ov.value);
        res.trace.lr.push_back(lr);
        res.trace.lengthscale.push_back(objective.hyperparameters(theta).lengthscale);
        diag.losses.push_back(-ov.value / n_obs);
        res.final_objective = ov.value;
        if (t == cfg.iterations) break;
        adam.ascend(theta, ov.gradient, lr);
      }
    } catch (const NumericError &e) {
      diag.numeric_error = true;
      diag.error_message = e.what();
    }
    diag.lengthscale = objective.hyperparameters(theta).lengthscale;
    last = diag;
    if (restart_guard(diag, cfg) == GuardVerdict::Accept) {
      res.theta = theta;
      res.hp = objective.hyperparameters(theta);
      res.variational = objective.variational(theta);
      return res;
    }
  }
  std::string why = last.numeric_error ? "numeric error: " + last.error_message
                                       : "guard rejected run (lengthscale " + std::to_string(last.lengthscale) +
                                             ", trailing loss std " + std::to_string(trailing_std(last.losses, cfg.loss_window)) + ")";
  throw TrainingError("training failed after " + std::to_string(cfg.max_restarts + 1) + " attempts; last " + why);
}

}  // namespace sumgp

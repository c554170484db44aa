#pragma once

#include "sumgp/approx_inference.hpp"
#include "sumgp/constraint_engine.hpp"

#include <optional>

namespace sumgp {

enum class InferenceMode { Exact, Laplace, Variational };

inline std::string to_string(InferenceMode m) {
  switch (m) {
    case InferenceMode::Exact: return "exact";
    case InferenceMode::Laplace: return "laplace";
    case InferenceMode::Variational: return "vi";
  }
  return "exact";
}

/// Everything that defines a GP model apart from its hyperparameters: task
/// count, per-task likelihoods, optional sum constraint over the tasks and
/// the inference scheme.
struct ModelSpec {
  int num_tasks = 1;
  int rank = 1;
  LikelihoodKinds likelihoods;
  std::optional<ConstraintSpec> constraint;
  InferenceMode inference = InferenceMode::Exact;
  bool allow_fast_path = true;
  double laplace_gamma = 1.0;

  void validate() const {
    if (num_tasks <= 0 || rank <= 0) throw InputError("ModelSpec: task count and rank must be positive");
    if (static_cast<int>(likelihoods.size()) != num_tasks) throw InputError("ModelSpec: one likelihood per task required");
    if (constraint) {
      constraint->validate();
      if (constraint->num_tasks != num_tasks) throw InputError("ModelSpec: constraint task count differs from the model");
    }
    if (inference == InferenceMode::Exact)
      for (const auto &t : likelihoods)
        if (t.kind != Nonlinearity::Identity) throw InputError("ModelSpec: exact inference needs identity likelihoods");
  }

  bool fast_path() const { return constraint && constraint->is_constant && allow_fast_path; }

  static ModelSpec gaussian(int num_tasks, int rank) {
    return {num_tasks, rank, LikelihoodKinds(static_cast<std::size_t>(num_tasks)), std::nullopt, InferenceMode::Exact};
  }
};

/// Prior over the flattened grid together with the factors needed to pull an
/// adjoint back to the hyperparameters.
struct ModelPrior {
  GaussianDist dist;
  Matrix inputs;
  enum class Kind { Plain, Kronecker, General } kind = Kind::Plain;
  Matrix Kd;                  // Kronecker path
  ConditioningMap task_map;   // Kronecker path: task-space conditioning
  ConditioningMap full_map;   // general path
};

inline ModelPrior build_model_prior(const ModelSpec &spec, const Hyperparameters &hp, const Matrix &X) {
  const int T = spec.num_tasks;
  ModelPrior p;
  p.inputs = X;
  if (spec.fast_path()) {
    const Vector x0 = X.row(0).transpose();
    p.kind = ModelPrior::Kind::Kronecker;
    p.Kd = rbf_gram(X, X, hp);
    p.task_map = condition_gaussian_detailed({hp.task_means, index_task_kernel(hp)}, spec.constraint->F(x0), spec.constraint->S(x0));
    p.dist = {kron(Vector(Vector::Ones(X.rows())), p.task_map.result.mean), kron(p.Kd, p.task_map.result.cov)};
    return p;
  }
  p.dist = build_multitask_prior({X, T}, {Matrix(0, X.cols()), T}, hp);
  if (spec.constraint) {
    p.kind = ModelPrior::Kind::General;
    const auto [F, S] = build_total_constraint(*spec.constraint, X);
    p.full_map = condition_gaussian_detailed(p.dist, F, S);
    p.dist = p.full_map.result;
  }
  return p;
}

/// Packed-hyperparameter gradient from adjoints M (on the prior covariance)
/// and v (on the prior mean).
inline Vector model_prior_gradient(const ModelPrior &p, const Hyperparameters &hp, const Matrix &M, const Vector &v) {
  switch (p.kind) {
    case ModelPrior::Kind::Plain: return multitask_prior_gradient(hp, p.inputs, M, v);
    case ModelPrior::Kind::General: {
      Matrix Mp;
      Vector vp;
      condition_adjoint(p.full_map, M, v, Mp, vp);
      return multitask_prior_gradient(hp, p.inputs, Mp, vp);
    }
    case ModelPrior::Kind::Kronecker: {
      const Eigen::Index T = hp.num_tasks();
      const Matrix G_data = contract_data_adjoint(M, p.task_map.result.cov);
      Matrix G_task;
      Vector g_mean;
      condition_adjoint(p.task_map, contract_task_adjoint(M, p.Kd), contract_mean_adjoint(v, T), G_task, g_mean);
      return kernel_gradient(hp, p.inputs, G_data, G_task, g_mean);
    }
  }
  return {};
}

/// Flat observation layout of a dataset under a model.
struct ObservationLayout {
  std::vector<bool> missing;
  std::vector<Eigen::Index> keep;
  Vector y;
  LikelihoodKinds lik;
};

inline ObservationLayout layout_observations(const TaskedDataset &data, const ModelSpec &spec) {
  if (data.num_tasks() != spec.num_tasks) throw InputError("model: dataset task count differs from the model");
  ObservationLayout L;
  L.missing = data.missing_mask();
  L.keep = retained_indices(static_cast<Eigen::Index>(L.missing.size()), L.missing);
  if (L.keep.empty()) throw InputError("model: dataset has no observations");
  L.y = data.observed_values();
  for (auto k : L.keep) L.lik.push_back(spec.likelihoods[static_cast<std::size_t>(k % spec.num_tasks)]);
  return L;
}

struct ObjectiveValue {
  double value = 0.0;
  Vector gradient;
};

/// Training objective over θ = [packed hyperparameters, variational
/// parameters (VI only)].  Laplace fits are warm-started from the previous
/// evaluation, so a sequence of calls is deterministic but stateful.
class ModelObjective {
 public:
  ModelObjective(ModelSpec spec, TaskedDataset data, Hyperparameters shape)
      : spec_(std::move(spec)), data_(std::move(data)), shape_(std::move(shape)) {
    spec_.validate();
    data_.validate();
    layout_ = layout_observations(data_, spec_);
  }

  const ModelSpec &spec() const { return spec_; }
  const TaskedDataset &data() const { return data_; }
  Eigen::Index num_observed() const { return layout_.y.size(); }
  Eigen::Index num_hyper() const { return shape_.packed_size(); }

  Eigen::Index num_params() const {
    return num_hyper() + (spec_.inference == InferenceMode::Variational ? WhitenedVariational::packed_size(num_observed()) : 0);
  }

  /// Variational runs start q at the Laplace approximation for `hp`
  /// (whitened: μ_u = Lᵀa, Σ_u = (I + LᵀWL)⁻¹ with W clamped at zero), or at
  /// the prior if the Newton iteration fails.
  Vector initial_parameters(const Hyperparameters &hp) const {
    Vector theta(num_params());
    theta.head(num_hyper()) = hp.pack();
    if (spec_.inference == InferenceMode::Variational) theta.tail(num_params() - num_hyper()) = laplace_start(hp).pack();
    return theta;
  }

  Hyperparameters hyperparameters(const Vector &theta) const {
    Hyperparameters hp = shape_;
    hp.unpack(theta.head(num_hyper()));
    return hp;
  }

  std::optional<WhitenedVariational> variational(const Vector &theta) const {
    if (spec_.inference != InferenceMode::Variational) return std::nullopt;
    return WhitenedVariational::unpack(theta.tail(num_params() - num_hyper()), num_observed());
  }

  ObjectiveValue evaluate(const Vector &theta) {
    const Hyperparameters hp = hyperparameters(theta);
    const ModelPrior prior = build_model_prior(spec_, hp, data_.inputs);
    const GaussianDist obs = filter_missing(prior.dist, layout_.missing);
    ObjectiveAdjoint adj;
    Vector dvar;
    switch (spec_.inference) {
      case InferenceMode::Exact: adj = exact_lml_adjoint(obs, layout_.y, hp.noise_sigma_n); break;
      case InferenceMode::Laplace: {
        const auto st = laplace_mode(obs, layout_.y, layout_.lik, hp.noise_sigma_n, spec_.laplace_gamma,
                                     warm_.size() == obs.size() ? &warm_ : nullptr);
        warm_ = st.a;
        adj = laplace_lml_adjoint(st, obs, layout_.y, layout_.lik, hp.noise_sigma_n);
        break;
      }
      case InferenceMode::Variational: {
        auto res = whitened_elbo(*variational(theta), obs, layout_.y, layout_.lik, hp.noise_sigma_n);
        adj = std::move(res.prior_adjoint);
        dvar = std::move(res.dvariational);
        break;
      }
    }
    Matrix M;
    Vector v;
    scatter_adjoint(layout_.keep, adj.dK, adj.dmean, prior.dist.size(), M, v);
    ObjectiveValue out;
    out.value = adj.value;
    out.gradient.resize(num_params());
    out.gradient.head(num_hyper()) = model_prior_gradient(prior, hp, M, v);
    out.gradient(hp.noise_index()) = adj.dlog_noise;
    if (dvar.size()) out.gradient.tail(dvar.size()) = dvar;
    return out;
  }

  void reset_warm_start() { warm_.resize(0); }

  WhitenedVariational laplace_start(const Hyperparameters &hp) const {
    const Eigen::Index n = num_observed();
    try {
      const GaussianDist obs = filter_missing(build_model_prior(spec_, hp, data_.inputs).dist, layout_.missing);
      const auto st = laplace_mode(obs, layout_.y, layout_.lik, hp.noise_sigma_n, spec_.laplace_gamma);
      const Matrix L = JitteredCholesky(obs.cov, "variational start").matrixL();
      Matrix P = L.transpose() * st.W.cwiseMax(0.0).asDiagonal() * L;
      P.diagonal().array() += 1.0;
      const Eigen::LLT<Matrix> llt(P);
      const Matrix Pinv = llt.solve(Matrix::Identity(n, n));
      WhitenedVariational q{L.transpose() * st.a, Eigen::LLT<Matrix>(0.5 * (Pinv + Pinv.transpose())).matrixL()};
      if (q.mu_u.allFinite() && q.L_u.allFinite() && (q.L_u.diagonal().array() > 0.0).all()) return q;
    } catch (const NumericError &) {
    }
    return WhitenedVariational::prior(n);
  }

 private:
  ModelSpec spec_;
  TaskedDataset data_;
  Hyperparameters shape_;
  ObservationLayout layout_;
  Vector warm_;
};

/// Posterior over the latent (transformed) outputs at test inputs, laid out
/// points × tasks.
struct Prediction {
  Matrix mean;
  Matrix var;
  GaussianDist joint;
  LaplaceState laplace;
};

inline Prediction predict(const ModelSpec &spec, const Hyperparameters &hp, const TaskedDataset &train, const Matrix &X_test,
                          const std::optional<WhitenedVariational> &q = std::nullopt) {
  spec.validate();
  const int T = spec.num_tasks;
  const auto layout = layout_observations(train, spec);
  const Eigen::Index n_train = train.num_points() * T;
  const Eigen::Index n_test = X_test.rows() * T;
  const ModelPrior prior = build_model_prior(spec, hp, stack_inputs(train.inputs, X_test));
  std::vector<Eigen::Index> test_idx(static_cast<std::size_t>(n_test));
  for (Eigen::Index i = 0; i < n_test; ++i) test_idx[static_cast<std::size_t>(i)] = n_train + i;
  const GaussianDist obs{prior.dist.mean(layout.keep), prior.dist.cov(layout.keep, layout.keep)};
  const Matrix Ks = prior.dist.cov(layout.keep, test_idx);
  const Matrix Kss = prior.dist.cov(test_idx, test_idx);
  const Vector ms = prior.dist.mean(test_idx);
  Prediction out;
  switch (spec.inference) {
    case InferenceMode::Exact: {
      GaussianDist joint = filter_missing(prior.dist, layout.missing);
      out.joint = gp_predict(joint, layout.y, hp.noise_sigma_n);
      break;
    }
    case InferenceMode::Laplace:
      out.laplace = laplace_mode(obs, layout.y, layout.lik, hp.noise_sigma_n, spec.laplace_gamma);
      out.joint = laplace_predict(out.laplace, obs.cov, Ks, Kss, ms);
      break;
    case InferenceMode::Variational: {
      if (!q || q->mu_u.size() != obs.size()) throw InputError("predict: variational parameters missing or mis-sized");
      const JitteredCholesky chol(obs.cov, "predict");
      out.joint = variational_predict(q->to_state(chol.matrixL(), obs.mean), obs, Ks, Kss, ms);
      break;
    }
  }
  out.mean = out.joint.mean.reshaped(T, X_test.rows()).transpose();
  out.var = out.joint.cov.diagonal().cwiseMax(0.0).reshaped(T, X_test.rows()).transpose();
  return out;
}

}  // namespace sumgp

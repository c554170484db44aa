#pragma once

#include "sumgp/gaussian_core.hpp"

#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace sumgp {

enum class Nonlinearity { Identity, Square, Log, Sine, Custom };

/// Strictly increasing user transform.  `inverse_d1` is the derivative of the
/// inverse; higher derivatives are taken numerically when needed.
struct CustomMonotone {
  std::string name = "custom";
  std::function<double(double)> forward;
  std::function<double(double)> inverse;
  std::function<double(double)> inverse_d1;
};

struct TaskTransform {
  Nonlinearity kind = Nonlinearity::Identity;
  int source = 0;
  std::shared_ptr<const CustomMonotone> custom;

  double forward(double f) const {
    switch (kind) {
      case Nonlinearity::Identity: return f;
      case Nonlinearity::Square: return f * f;
      case Nonlinearity::Log: return std::log(f);
      case Nonlinearity::Sine: return std::sin(f);
      case Nonlinearity::Custom: return custom->forward(f);
    }
    return f;
  }

  bool in_domain(double y) const { return kind != Nonlinearity::Log || y > 0.0; }
  bool needs_aux() const { return kind == Nonlinearity::Square || kind == Nonlinearity::Sine; }

  std::string label(const std::string &base) const {
    switch (kind) {
      case Nonlinearity::Identity: return base;
      case Nonlinearity::Square: return base + "^2";
      case Nonlinearity::Log: return "log(" + base + ")";
      case Nonlinearity::Sine: return "sin(" + base + ")";
      case Nonlinearity::Custom: return custom->name + "(" + base + ")";
    }
    return base;
  }
};

enum class VirtualPolicy { Off, AtZeroCrossings, AtBranchCrossings };

/// Output transformation: one transformed task per original task, followed by
/// untransformed auxiliary copies of the tasks listed in `aux_sources`.
struct TransformSpec {
  std::vector<TaskTransform> tasks;
  std::vector<int> aux_sources;
  VirtualPolicy virtual_policy = VirtualPolicy::Off;
  std::vector<double> branch_levels;  // overrides the default (k + 1/2)π levels for sine tasks
  bool relearn_aux_jointly = false;

  int num_original() const { return static_cast<int>(tasks.size()); }
  int num_transformed() const { return static_cast<int>(tasks.size() + aux_sources.size()); }

  int aux_task_of(int original) const {
    for (std::size_t j = 0; j < aux_sources.size(); ++j)
      if (aux_sources[j] == original) return num_original() + static_cast<int>(j);
    return -1;
  }

  bool has_aux() const { return !aux_sources.empty(); }

  /// Likelihood kind per transformed task; auxiliary copies are plain Gaussian.
  std::vector<TaskTransform> likelihood_kinds() const {
    std::vector<TaskTransform> out = tasks;
    for (int src : aux_sources) out.push_back({Nonlinearity::Identity, src, nullptr});
    return out;
  }

  /// Levels in [lo, hi] at which the auxiliary output of `original` switches
  /// branch.
  std::vector<double> crossing_levels(int original, double lo, double hi) const {
    const auto &t = tasks.at(static_cast<std::size_t>(original));
    if (t.kind == Nonlinearity::Square) return {0.0};
    if (t.kind != Nonlinearity::Sine) return {};
    if (!branch_levels.empty()) return branch_levels;
    std::vector<double> levels;
    const double pi = std::numbers::pi;
    for (long k = static_cast<long>(std::floor(lo / pi - 0.5)) - 1; k <= static_cast<long>(std::ceil(hi / pi)) + 1; ++k) {
      const double L = (static_cast<double>(k) + 0.5) * pi;
      if (L >= lo && L <= hi) levels.push_back(L);
    }
    return levels;
  }

  void validate() const {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const auto &t = tasks[i];
      if (t.source != static_cast<int>(i)) throw InputError("TransformSpec: task sources must follow task order");
      if (t.kind == Nonlinearity::Custom && (!t.custom || !t.custom->forward || !t.custom->inverse || !t.custom->inverse_d1))
        throw InputError("TransformSpec: custom transform lacks forward/inverse functions");
      const bool wired = aux_task_of(static_cast<int>(i)) >= 0;
      if (t.needs_aux() && !wired) throw InputError("TransformSpec: non-monotone task " + std::to_string(i) + " lacks an auxiliary output");
      if (t.kind == Nonlinearity::Identity && wired) throw InputError("TransformSpec: identity task " + std::to_string(i) + " has aux wiring");
    }
    for (int src : aux_sources)
      if (src < 0 || src >= num_original()) throw InputError("TransformSpec: aux source out of range");
  }

  static TransformSpec identity(int num_tasks) {
    TransformSpec spec;
    for (int i = 0; i < num_tasks; ++i) spec.tasks.push_back({Nonlinearity::Identity, i, nullptr});
    return spec;
  }

  /// Convenience constructor: `kinds[i]` for original task i; every
  /// non-monotone task gets an aux copy in task order.
  static TransformSpec with_aux(const std::vector<Nonlinearity> &kinds, VirtualPolicy policy) {
    TransformSpec spec;
    for (std::size_t i = 0; i < kinds.size(); ++i) {
      spec.tasks.push_back({kinds[i], static_cast<int>(i), nullptr});
      if (spec.tasks.back().needs_aux()) spec.aux_sources.push_back(static_cast<int>(i));
    }
    spec.virtual_policy = policy;
    spec.validate();
    return spec;
  }
};

/// Maps original-space values (one row per point) to transformed tasks.
inline Matrix forward_transform(const Matrix &values, const TransformSpec &spec) {
  if (values.cols() != spec.num_original()) throw InputError("forward_transform: task count mismatch");
  Matrix out(values.rows(), spec.num_transformed());
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    for (int a = 0; a < spec.num_original(); ++a) out(i, a) = spec.tasks[a].forward(values(i, a));
    for (std::size_t j = 0; j < spec.aux_sources.size(); ++j)
      out(i, spec.num_original() + static_cast<Eigen::Index>(j)) = values(i, spec.aux_sources[j]);
  }
  return out;
}

inline TaskedDataset apply_transform(const TaskedDataset &data, const TransformSpec &spec) {
  spec.validate();
  if (data.num_tasks() != spec.num_original()) throw InputError("apply_transform: dataset task count differs from the transform");
  for (Eigen::Index i = 0; i < data.num_points(); ++i)
    for (int a = 0; a < spec.num_original(); ++a)
      if (!data.is_missing(i, a) && !spec.tasks[a].in_domain(data.observations(i, a)))
        throw InputError("apply_transform: value outside the domain of task " + std::to_string(a) + " at point " +
                         std::to_string(i));
  TaskedDataset out = data;
  out.observations = forward_transform(data.observations, spec);  // NaN propagates through every h
  if (data.ground_truth) out.ground_truth = forward_transform(*data.ground_truth, spec);
  out.task_names.clear();
  out.units.clear();
  for (int a = 0; a < spec.num_transformed(); ++a) {
    const int src = a < spec.num_original() ? a : spec.aux_sources[a - spec.num_original()];
    const std::string base = src < static_cast<int>(data.task_names.size()) ? data.task_names[src] : "y" + std::to_string(src + 1);
    out.task_names.push_back(a < spec.num_original() ? spec.tasks[a].label(base) : base);
    const std::string unit = src < static_cast<int>(data.units.size()) ? data.units[src] : "1";
    out.units.push_back(a < spec.num_original() && spec.tasks[a].kind == Nonlinearity::Square ? "(" + unit + ")^2"
                        : a < spec.num_original() && spec.tasks[a].kind != Nonlinearity::Identity ? "1"
                                                                                                   : unit);
  }
  if (data.scale_factors.size() == data.num_tasks()) {
    out.scale_factors.resize(spec.num_transformed());
    for (int a = 0; a < spec.num_transformed(); ++a)
      out.scale_factors(a) = data.scale_factors(a < spec.num_original() ? a : spec.aux_sources[a - spec.num_original()]);
  }
  return out;
}

struct Crossing {
  double x = 0.0;
  double level = 0.0;
  int direction = 0;  // +1 upward, -1 downward, 0 touching
  int task = -1;      // original task whose auxiliary curve crossed
};

/// Linear-interpolated locations where `curve` (sampled on sorted `grid`)
/// crosses each level, sorted by location.
inline std::vector<Crossing> find_branch_crossings(const Vector &grid, const Vector &curve, const std::vector<double> &levels) {
  if (grid.size() != curve.size()) throw InputError("find_branch_crossings: grid and curve lengths differ");
  std::vector<Crossing> out;
  if (grid.size() < 2) return out;
  // Offsets within rounding of the level count as touching it.
  const double snap = 1e-12 * std::max(1.0, curve.cwiseAbs().maxCoeff());
  for (double L : levels) {
    auto offset = [&](Eigen::Index i) {
      const double d = curve(i) - L;
      return std::abs(d) <= snap ? 0.0 : d;
    };
    for (Eigen::Index i = 0; i + 1 < grid.size(); ++i) {
      const double d0 = offset(i);
      const double d1 = offset(i + 1);
      if (d0 == 0.0) {
        const double before = i > 0 ? offset(i - 1) : 0.0;
        const int dir = d1 > 0.0 && before < 0.0 ? 1 : d1 < 0.0 && before > 0.0 ? -1 : 0;
        out.push_back({grid(i), L, dir, -1});
      } else if (d0 * d1 < 0.0) {
        const double x = grid(i) + (grid(i + 1) - grid(i)) * d0 / (d0 - d1);
        out.push_back({x, L, d1 > d0 ? 1 : -1, -1});
      }
    }
    const Eigen::Index last = grid.size() - 1;
    if (offset(last) == 0.0) out.push_back({grid(last), L, 0, -1});
  }
  std::sort(out.begin(), out.end(), [](const Crossing &a, const Crossing &b) { return a.x < b.x; });
  return out;
}

struct VirtualRecord {
  double x = 0.0;
  int task = 0;  // transformed task index
  double value = 0.0;
};

inline std::vector<VirtualRecord> make_virtual_measurements(const std::vector<Crossing> &crossings, const TransformSpec &spec) {
  std::vector<VirtualRecord> out;
  if (spec.virtual_policy == VirtualPolicy::Off) return out;
  for (const auto &c : crossings) {
    if (c.task < 0 || c.task >= spec.num_original()) throw InputError("make_virtual_measurements: crossing without a task");
    const auto &t = spec.tasks[c.task];
    if (spec.virtual_policy == VirtualPolicy::AtZeroCrossings && t.kind != Nonlinearity::Square) continue;
    if (!t.needs_aux()) continue;
    out.push_back({c.x, c.task, t.forward(c.level)});
  }
  return out;
}

/// Appends each virtual record as its own point with only one observed task.
inline TaskedDataset append_virtual(const TaskedDataset &data, const std::vector<VirtualRecord> &records) {
  if (records.empty()) return data;
  if (data.inputs.cols() != 1) throw InputError("append_virtual: virtual measurements need scalar inputs");
  TaskedDataset out = data;
  const Eigen::Index n0 = data.num_points();
  const auto k = static_cast<Eigen::Index>(records.size());
  out.inputs.conservativeResize(n0 + k, 1);
  out.observations.conservativeResize(n0 + k, data.num_tasks());
  out.observations.bottomRows(k).setConstant(std::numeric_limits<double>::quiet_NaN());
  out.virtual_point.resize(static_cast<std::size_t>(n0), false);
  if (out.ground_truth) out.ground_truth->conservativeResize(n0 + k, data.num_tasks());
  for (Eigen::Index r = 0; r < k; ++r) {
    out.inputs(n0 + r, 0) = records[r].x;
    out.observations(n0 + r, records[r].task) = records[r].value;
    out.virtual_point.push_back(true);
    if (out.ground_truth) out.ground_truth->row(n0 + r).setConstant(std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

inline double sine_branch_inverse(double fp, int branch) {
  const double s = (branch % 2 == 0) ? 1.0 : -1.0;
  return static_cast<double>(branch) * std::numbers::pi + s * std::asin(fp);
}

/// Auxiliary means at the prediction points plus per-task branch indices.
struct BacktransformContext {
  Vector inputs;
  Matrix aux_means;                     // points × original tasks, NaN where a task has no aux
  std::vector<std::vector<int>> branch;  // per original task, per point
};

/// `aux_means` holds the auxiliary posterior mean of every original task at
/// the prediction points (unused columns may hold anything).  Branches of sine
/// tasks are counted from crossings on the dense curve, starting in
/// `initial_branch` at the leftmost dense point.
inline BacktransformContext make_backtransform_context(const TransformSpec &spec, const Vector &inputs, const Matrix &aux_means,
                                                       const Vector &dense_grid, const Matrix &dense_aux, int initial_branch = 0) {
  if (aux_means.rows() != inputs.size() || aux_means.cols() != spec.num_original())
    throw InputError("backtransform context: aux mean matrix has wrong shape");
  BacktransformContext ctx;
  ctx.inputs = inputs;
  ctx.aux_means = aux_means;
  ctx.branch.assign(static_cast<std::size_t>(spec.num_original()), std::vector<int>(static_cast<std::size_t>(inputs.size()), 0));
  for (int a = 0; a < spec.num_original(); ++a) {
    if (spec.tasks[a].kind != Nonlinearity::Sine) continue;
    if (dense_aux.rows() != dense_grid.size() || dense_aux.cols() != spec.num_original())
      throw InputError("backtransform context: dense aux curve has wrong shape");
    if (dense_grid.size() > 0 && (inputs.minCoeff() < dense_grid(0) - 1e-12 || inputs.maxCoeff() > dense_grid(dense_grid.size() - 1) + 1e-12))
      throw InputError("backtransform context: dense grid does not cover the prediction points");
    const Vector curve = dense_aux.col(a);
    const double lo = curve.minCoeff(), hi = curve.maxCoeff();
    const auto crossings = find_branch_crossings(dense_grid, curve, spec.crossing_levels(a, lo, hi));
    for (Eigen::Index i = 0; i < inputs.size(); ++i) {
      int k = initial_branch;
      for (const auto &c : crossings)
        if (c.x <= inputs(i)) k += c.direction;
      ctx.branch[a][i] = k;
    }
  }
  return ctx;
}

struct BacktransformDiagnostics {
  long square_clamps = 0;
  long sine_clamps = 0;
};

inline double backtransform_value(double fp, const TaskTransform &t, double aux, int branch, BacktransformDiagnostics *diag) {
  switch (t.kind) {
    case Nonlinearity::Identity: return fp;
    case Nonlinearity::Square: {
      if (fp < 0.0) {
        if (diag) ++diag->square_clamps;
        fp = 0.0;
      }
      return (aux < 0.0 ? -1.0 : 1.0) * std::sqrt(fp);
    }
    case Nonlinearity::Log: return std::exp(fp);
    case Nonlinearity::Sine: {
      if (fp < -1.0 || fp > 1.0) {
        if (diag) ++diag->sine_clamps;
        fp = std::clamp(fp, -1.0, 1.0);
      }
      return sine_branch_inverse(fp, branch);
    }
    case Nonlinearity::Custom: return t.custom->inverse(fp);
  }
  return fp;
}

/// Maps transformed predictions (points × transformed tasks) back to the
/// original tasks.
inline Matrix backtransform(const Matrix &f_prime, const BacktransformContext &ctx, const TransformSpec &spec,
                           BacktransformDiagnostics *diag = nullptr) {
  if (f_prime.cols() != spec.num_transformed() && f_prime.cols() != spec.num_original())
    throw InputError("backtransform: task count mismatch");
  if (f_prime.rows() != ctx.aux_means.rows()) throw InputError("backtransform: context does not cover the prediction grid");
  Matrix out(f_prime.rows(), spec.num_original());
  for (Eigen::Index i = 0; i < f_prime.rows(); ++i)
    for (int a = 0; a < spec.num_original(); ++a)
      out(i, a) = backtransform_value(f_prime(i, a), spec.tasks[a], ctx.aux_means(i, a), ctx.branch[a][i], diag);
  return out;
}

/// Both bounds go through the same auxiliary means as the mean curve; the
/// results are re-sorted because a sign or branch flip can swap them.
inline std::pair<Matrix, Matrix> backtransform_intervals(const Matrix &lower, const Matrix &upper, const BacktransformContext &ctx,
                                                         const TransformSpec &spec) {
  Matrix lo = backtransform(lower, ctx, spec);
  Matrix hi = backtransform(upper, ctx, spec);
  for (Eigen::Index i = 0; i < lo.rows(); ++i)
    for (Eigen::Index a = 0; a < lo.cols(); ++a)
      if (lo(i, a) > hi(i, a)) std::swap(lo(i, a), hi(i, a));
  return {lo, hi};
}

}  // namespace sumgp

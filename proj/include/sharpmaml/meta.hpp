#pragma once

// MAML core: inner adaptation, exact multi-step meta-gradients through the
// inner trajectory, first-order MAML and the multi-task ERM baseline.

#include "sharpmaml/core.hpp"
#include "sharpmaml/diffcore.hpp"
#include "sharpmaml/tasks.hpp"

#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

namespace sharpmaml {

struct InnerConfig {
  double beta_low = 0.01;
  int steps = 1;
  bool first_order = false;
  /// Parameters [0, frozen_prefix) are not adapted in the inner loop (ANIL body).
  std::size_t frozen_prefix = 0;
  /// Per-step support subsample size; 0 means full batch.
  std::size_t subsample = 0;

  void validate() const {
    require(beta_low >= 0.0, "beta_low must be non-negative");
    require(steps >= 1, "inner steps must be at least 1");
  }
};

struct MetaConfig {
  double beta_up = 0.001;
  std::size_t M = 4;
  std::size_t T = 1000;

  void validate() const {
    require(beta_up > 0.0, "beta_up must be positive");
    require(M >= 1, "M must be at least 1");
    require(T >= 1, "T must be at least 1");
  }
};

/// Offsets for the biased inner step BGD(theta, eps, eps_m):
/// theta_0 = theta + start_offset, and the first gradient is taken at
/// theta_0 + grad_offset. Both are constants for differentiation.
struct InnerPlan {
  std::optional<ParamVector> start_offset;
  std::optional<ParamVector> grad_offset;
  /// Support rows used by step 0 (sharpness-sensitive data selection).
  std::optional<std::vector<std::size_t>> first_step_rows;
};

struct Trajectory {
  std::vector<ParamVector> points;           // theta_0 .. theta_K
  std::vector<std::optional<Dataset>> data;  // per step; nullopt = full support
};

namespace detail {

inline std::vector<std::size_t> subsample_rows(std::uint64_t key, int step, std::size_t n, std::size_t k) {
  Rng rng(key, static_cast<std::uint64_t>(step), StreamTag::subsample);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  return idx;
}

inline void check_finite(double v, const char* what, long step) {
  if (!std::isfinite(v)) throw DivergenceError(std::string("non-finite ") + what, step);
}

inline void check_finite(const ParamVector& v, const char* what, long step) {
  if (!v.allFinite()) throw DivergenceError(std::string("non-finite ") + what, step);
}

}  // namespace detail

namespace detail {

/// parallel_for over tasks; a divergence is re-raised tagged with its task index.
template <class Fn>
void for_each_task(std::size_t n, Fn&& fn) {
  parallel_for(n, [&](std::size_t m) {
    try {
      fn(m);
    } catch (const DivergenceError& e) {
      throw e.with_task(static_cast<long>(m));
    }
  });
}

}  // namespace detail

/// Runs K inner steps; returns theta_0..theta_K and the data each step used.
inline Trajectory inner_adapt(const ModelSpec& model, const ParamVector& theta, const Task& task,
                              const InnerConfig& cfg, const InnerPlan& plan = {}) {
  cfg.validate();
  if (plan.start_offset) require(plan.start_offset->size() == theta.size(), "start offset dimension mismatch");
  if (plan.grad_offset) require(plan.grad_offset->size() == theta.size(), "gradient offset dimension mismatch");

  Trajectory traj;
  traj.points.reserve(static_cast<std::size_t>(cfg.steps) + 1);
  traj.points.push_back(plan.start_offset ? ParamVector(theta + *plan.start_offset) : theta);

  const std::size_t n = task.support.size();
  for (int j = 0; j < cfg.steps; ++j) {
    std::optional<Dataset> data;
    if (j == 0 && plan.first_step_rows && plan.first_step_rows->size() < n)
      data = task.support.rows(*plan.first_step_rows);
    else if (cfg.subsample > 0 && cfg.subsample < n)
      data = task.support.rows(detail::subsample_rows(task.key, j, n, cfg.subsample));

    const ParamVector& cur = traj.points.back();
    ParamVector g = (j == 0 && plan.grad_offset) ? grad(model, ParamVector(cur + *plan.grad_offset), data ? *data : task.support)
                                                 : grad(model, cur, data ? *data : task.support);
    detail::check_finite(g, "inner gradient", j);
    if (cfg.frozen_prefix > 0) g = zero_prefix(std::move(g), cfg.frozen_prefix);
    ParamVector next = cur - cfg.beta_low * g;
    detail::check_finite(next, "inner iterate", j);
    traj.data.push_back(std::move(data));
    traj.points.push_back(std::move(next));
  }
  return traj;
}

struct MetaGradient {
  ParamVector g;
  double query_loss = 0.0;
};

/// Gradient of theta -> L(theta_K(theta); query) by a reverse sweep of
/// Hessian-vector products over the stored trajectory. Offsets are constants.
/// With first_order the sweep is skipped.
inline MetaGradient meta_gradient(const ModelSpec& model, const ParamVector& theta, const Task& task,
                                  const InnerConfig& cfg, const InnerPlan& plan = {}) {
  const Trajectory traj = inner_adapt(model, theta, task, cfg, plan);
  auto [qloss, v] = value_and_grad(model, traj.points.back(), task.query);
  detail::check_finite(qloss, "query loss", cfg.steps);
  detail::check_finite(v, "query gradient", cfg.steps);
  if (!cfg.first_order) {
    for (int j = cfg.steps - 1; j >= 0; --j) {
      const auto ju = static_cast<std::size_t>(j);
      const Dataset& data = traj.data[ju] ? *traj.data[ju] : task.support;
      const ParamVector u = cfg.frozen_prefix > 0 ? zero_prefix(v, cfg.frozen_prefix) : v;
      const ParamVector hv = (j == 0 && plan.grad_offset)
                                 ? hvp(model, ParamVector(traj.points[ju] + *plan.grad_offset), data, u)
                                 : hvp(model, traj.points[ju], data, u);
      v -= cfg.beta_low * hv;
      detail::check_finite(v, "meta-gradient", j);
    }
  }
  return {std::move(v), qloss};
}

/// theta^t, iteration counter and the convergence trace. The task stream is
/// counter-based, so t is also the RNG cursor.
struct ConvergenceTrace {
  std::vector<std::uint64_t> iters;
  std::vector<double> grad_norm_sq;
  std::vector<double> running_avg;
  /// Prefix sum and count; survive a checkpoint even when the series does not.
  double sum = 0.0;
  std::uint64_t count = 0;

  double push(std::uint64_t iter, double value) {
    sum += value;
    ++count;
    const double avg = sum / static_cast<double>(count);
    iters.push_back(iter);
    grad_norm_sq.push_back(value);
    running_avg.push_back(avg);
    return avg;
  }

  std::size_t size() const { return grad_norm_sq.size(); }
};

struct TrainState {
  ParamVector theta;
  std::uint64_t t = 0;
  ConvergenceTrace trace;
};

/// One row of the training trace.
struct StepReport {
  std::uint64_t iter = 0;
  double meta_loss = 0.0;
  double grad_norm_sq = 0.0;
  double running_avg_grad_norm_sq = 0.0;
  double eps_norm = 0.0;
  double mean_eps_m_norm = 0.0;
  int degenerate_flags = 0;
};

struct StepResult {
  TrainState state;
  StepReport report;
};

/// ||grad F(theta)||^2 of the unperturbed MAML objective, exact second order.
/// Averages over `diag_tasks` when given, otherwise over `batch`.
inline double diagnostic_grad_norm_sq(const ModelSpec& model, const ParamVector& theta,
                                      const std::vector<Task>& batch, const InnerConfig& inner,
                                      const std::vector<Task>& diag_tasks = {}) {
  const auto& tasks = diag_tasks.empty() ? batch : diag_tasks;
  InnerConfig exact = inner;
  exact.first_order = false;
  std::vector<ParamVector> grads(tasks.size());
  detail::for_each_task(tasks.size(), [&](std::size_t m) { grads[m] = meta_gradient(model, theta, tasks[m], exact).g; });
  ParamVector sum = ParamVector::Zero(theta.size());
  for (const auto& g : grads) sum += g;
  return (sum / static_cast<double>(tasks.size())).squaredNorm();
}

/// theta <- theta - beta_up * sum_m g_m (ascending task order), t <- t + 1,
/// and one trace entry.
inline StepResult apply_meta_update(TrainState state, const std::vector<ParamVector>& grads,
                                    const std::vector<double>& losses, const MetaConfig& meta, double grad_norm_sq) {
  ParamVector sum = ParamVector::Zero(state.theta.size());
  for (const auto& g : grads) sum += g;
  double loss_sum = 0.0;
  for (double l : losses) loss_sum += l;

  const ParamVector step = meta.beta_up * sum;
  StepResult out{std::move(state), {}};
  out.state.theta -= step;
  detail::check_finite(out.state.theta, "meta iterate", static_cast<long>(out.state.t));
  out.report.iter = out.state.t;
  out.report.meta_loss = loss_sum / static_cast<double>(losses.size());
  out.report.grad_norm_sq = grad_norm_sq;
  out.report.running_avg_grad_norm_sq = out.state.trace.push(out.state.t, grad_norm_sq);
  ++out.state.t;
  return out;
}

/// Plain MAML / FOMAML meta step on one task batch.
inline StepResult maml_meta_step(const ModelSpec& model, TrainState state, const std::vector<Task>& tasks,
                                 const InnerConfig& inner, const MetaConfig& meta,
                                 const std::vector<Task>& diag_tasks = {}) {
  require(tasks.size() == meta.M, "task batch size does not match M");
  std::vector<ParamVector> grads(tasks.size());
  std::vector<double> losses(tasks.size());
  detail::for_each_task(tasks.size(), [&](std::size_t m) {
    auto r = meta_gradient(model, state.theta, tasks[m], inner);
    grads[m] = std::move(r.g);
    losses[m] = r.query_loss;
  });

  double norm_sq = 0.0;
  if (!diag_tasks.empty() || inner.first_order) {
    norm_sq = diagnostic_grad_norm_sq(model, state.theta, tasks, inner, diag_tasks);
  } else {
    ParamVector sum = ParamVector::Zero(state.theta.size());
    for (const auto& g : grads) sum += g;
    norm_sq = (sum / static_cast<double>(tasks.size())).squaredNorm();
  }
  return apply_meta_update(std::move(state), grads, losses, meta, norm_sq);
}

/// Gradient descent on the task-averaged support loss.
inline StepResult erm_step(const ModelSpec& model, TrainState state, const std::vector<Task>& tasks,
                           const MetaConfig& meta) {
  require(!tasks.empty(), "empty task batch");
  std::vector<ParamVector> grads(tasks.size());
  std::vector<double> losses(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t m) {
    auto [l, g] = value_and_grad(model, state.theta, tasks[m].support);
    detail::check_finite(l, "support loss", 0);
    losses[m] = l;
    grads[m] = std::move(g);
  });
  ParamVector mean = ParamVector::Zero(state.theta.size());
  for (const auto& g : grads) mean += g;
  mean /= static_cast<double>(tasks.size());

  MetaConfig scaled = meta;
  // apply_meta_update sums; fold the 1/M into the step
  scaled.beta_up = meta.beta_up / static_cast<double>(tasks.size());
  return apply_meta_update(std::move(state), grads, losses, scaled, mean.squaredNorm());
}

}  // namespace sharpmaml

#pragma once

// Measurement instruments: 2-D loss sections along filter-normalized random
// directions, the sharpness max_{||e||<=alpha} L(theta+e) - L(theta), and the
// train/test gap of post-adaptation metrics.

#include "sharpmaml/core.hpp"
#include "sharpmaml/diffcore.hpp"
#include "sharpmaml/meta.hpp"
#include "sharpmaml/tasks.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace sharpmaml {

enum class ObjectiveTag { erm_task_loss, maml_task_loss };

inline std::string to_string(ObjectiveTag t) { return t == ObjectiveTag::erm_task_loss ? "erm" : "maml"; }

struct Directions {
  ParamVector d1;
  ParamVector d2;
  /// Parameter groups whose norm in theta was zero (direction zeroed there).
  std::size_t zero_groups = 0;
};

/// Two Gaussian directions, each rescaled group-by-group to the matching
/// group norm of theta, then d2 orthogonalized against d1.
inline Directions random_directions(const ModelSpec& model, const ParamVector& theta, std::uint64_t seed) {
  require(static_cast<std::size_t>(theta.size()) == model.dim(), "parameter dimension mismatch");
  Directions out;
  const auto groups = model.groups();
  auto draw = [&](std::uint64_t which) {
    Rng rng(seed, which, StreamTag::directions);
    ParamVector d = rng.normal_vector(theta.size());
    for (const auto& grp : groups) {
      auto seg = d.segment(static_cast<Eigen::Index>(grp.offset), static_cast<Eigen::Index>(grp.size));
      const double target = theta.segment(static_cast<Eigen::Index>(grp.offset), static_cast<Eigen::Index>(grp.size)).norm();
      const double have = seg.norm();
      if (target == 0.0 || have == 0.0) {
        seg.setZero();
        if (which == 0) ++out.zero_groups;
      } else {
        seg *= target / have;
      }
    }
    return d;
  };
  out.d1 = draw(0);
  out.d2 = draw(1);
  const double n1 = out.d1.squaredNorm();
  if (n1 > 0.0) out.d2 -= (out.d1.dot(out.d2) / n1) * out.d1;
  return out;
}

struct LandscapeGrid {
  ParamVector d1;
  ParamVector d2;
  std::vector<double> xs;
  std::vector<double> ys;
  Matrix values;  // |ys| x |xs|; values(i, j) at theta + xs[j] d1 + ys[i] d2
  std::vector<std::vector<char>> diverged;
  ObjectiveTag objective = ObjectiveTag::erm_task_loss;
};

/// extent * (2j - (r-1)) / (r-1); the middle point is exactly zero.
inline std::vector<double> grid_coordinates(double extent, int resolution) {
  require(resolution >= 2, "resolution must be at least 2");
  std::vector<double> out(static_cast<std::size_t>(resolution));
  const double denom = resolution - 1;
  for (int j = 0; j < resolution; ++j) out[static_cast<std::size_t>(j)] = extent * (2.0 * j - denom) / denom;
  return out;
}

/// Loss of one task at a point. The maml objective adapts one step on the
/// support set first: L(theta - beta grad L(theta; D); D).
inline double task_objective(const ModelSpec& model, const ParamVector& point, const Task& task, ObjectiveTag tag,
                             double beta_low) {
  if (tag == ObjectiveTag::erm_task_loss) return loss(model, point, task.support);
  const ParamVector adapted = point - beta_low * grad(model, point, task.support);
  return loss(model, adapted, task.support);
}

inline LandscapeGrid loss_grid(const ModelSpec& model, const ParamVector& theta, const Task& task,
                               const Directions& dirs, double extent, int resolution, ObjectiveTag tag,
                               double beta_low = 0.0) {
  require(extent > 0.0, "extent must be positive");
  LandscapeGrid grid;
  grid.d1 = dirs.d1;
  grid.d2 = dirs.d2;
  grid.xs = grid_coordinates(extent, resolution);
  grid.ys = grid.xs;
  grid.objective = tag;
  grid.values.resize(resolution, resolution);
  grid.diverged.assign(static_cast<std::size_t>(resolution), std::vector<char>(static_cast<std::size_t>(resolution), 0));

  const auto cells = static_cast<std::size_t>(resolution) * static_cast<std::size_t>(resolution);
  parallel_for(cells, [&](std::size_t cell) {
    const std::size_t i = cell / static_cast<std::size_t>(resolution);
    const std::size_t j = cell % static_cast<std::size_t>(resolution);
    const ParamVector point = theta + grid.xs[j] * dirs.d1 + grid.ys[i] * dirs.d2;
    double v = task_objective(model, point, task, tag, beta_low);
    if (!std::isfinite(v)) {
      v = std::numeric_limits<double>::max();
      grid.diverged[i][j] = 1;
    }
    grid.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
  });
  return grid;
}

struct SharpnessResult {
  double alpha = 0.0;
  double sharpness = 0.0;
  double argmax_norm = 0.0;
  int restarts = 0;
  ParamVector argmax;
};

inline constexpr int sharpness_ascent_steps = 20;

/// Lower bound on max_{||e|| <= alpha} f(theta + e) - f(theta) by multi-start
/// projected ascent from the center of the ball: `budget` restarts of 20
/// normalized steps of length alpha / 10. Restart 0 takes its first step
/// along the gradient, the others along a random direction. `warm_start`,
/// when feasible, is evaluated as an extra candidate.
template <class ValueFn, class GradFn>
SharpnessResult sharpness_of(ValueFn&& value, GradFn&& gradient, const ParamVector& theta, double alpha, int budget,
                             Rng& rng, const ParamVector* warm_start = nullptr) {
  require(alpha > 0.0, "alpha must be positive");
  require(budget >= 1, "budget must be at least 1");
  const double base = value(theta);
  SharpnessResult res;
  res.alpha = alpha;
  res.restarts = budget;
  res.argmax = ParamVector::Zero(theta.size());
  double best = 0.0;

  auto consider = [&](const ParamVector& e) {
    const double v = value(ParamVector(theta + e));
    if (std::isfinite(v) && v - base > best) {
      best = v - base;
      res.argmax = e;
    }
  };
  auto project = [&](ParamVector& e) {
    const double n = e.norm();
    if (n > alpha) e *= alpha / n;
  };

  if (warm_start && warm_start->size() == theta.size() && warm_start->norm() <= alpha * (1.0 + 1e-12)) {
    ParamVector e = *warm_start;
    project(e);
    consider(e);
  }

  const double step = alpha / 10.0;
  const ParamVector g0 = gradient(theta);
  for (int r = 0; r < budget; ++r) {
    ParamVector dir = r == 0 ? g0 : rng.normal_vector(theta.size());
    if (!(dir.norm() > 0.0) || !std::isfinite(dir.norm())) dir = rng.normal_vector(theta.size());
    ParamVector e = (step / dir.norm()) * dir;
    consider(e);
    for (int s = 1; s < sharpness_ascent_steps; ++s) {
      const ParamVector g = gradient(ParamVector(theta + e));
      const double gn = g.norm();
      if (!(gn > 0.0) || !std::isfinite(gn)) break;
      e += (step / gn) * g;
      project(e);
      consider(e);
    }
  }
  res.sharpness = best;
  res.argmax_norm = res.argmax.norm();
  return res;
}

inline SharpnessResult sharpness(const ModelSpec& model, const ParamVector& theta, const Dataset& data, double alpha,
                                 int budget, Rng& rng) {
  return sharpness_of([&](const ParamVector& p) { return loss(model, p, data); },
                      [&](const ParamVector& p) { return grad(model, p, data); }, theta, alpha, budget, rng);
}

/// Sharpness over an ascending alpha list. Each radius reuses the same
/// restart stream and is warm-started from the previous maximizer, so the
/// profile is non-decreasing.
template <class ValueFn, class GradFn>
std::vector<SharpnessResult> sharpness_profile(ValueFn&& value, GradFn&& gradient, const ParamVector& theta,
                                               const std::vector<double>& alphas, int budget, std::uint64_t seed) {
  std::vector<SharpnessResult> out;
  ParamVector warm;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    require(i == 0 || alphas[i] >= alphas[i - 1], "alphas must be ascending");
    Rng rng(seed, 0, StreamTag::sharpness);
    out.push_back(sharpness_of(value, gradient, theta, alphas[i], budget, rng, i ? &warm : nullptr));
    warm = out.back().argmax;
  }
  return out;
}

inline std::vector<SharpnessResult> sharpness_profile(const ModelSpec& model, const ParamVector& theta,
                                                      const Dataset& data, const std::vector<double>& alphas,
                                                      int budget, std::uint64_t seed) {
  return sharpness_profile([&](const ParamVector& p) { return loss(model, p, data); },
                           [&](const ParamVector& p) { return grad(model, p, data); }, theta, alphas, budget, seed);
}

// ---------------------------------------------------------------------------
// Post-adaptation metrics.

/// MSE for regression, error rate for classification, the loss for quadratics.
inline double task_metric(const ModelSpec& model, const ParamVector& theta, const Dataset& data) {
  if (data.loss_kind != LossKind::cross_entropy) return loss(model, theta, data);
  const Matrix out = predict(model, theta, data.inputs);
  std::size_t wrong = 0;
  for (Eigen::Index s = 0; s < out.rows(); ++s) {
    Eigen::Index best = 0;
    out.row(s).maxCoeff(&best);
    if (best != data.labels[static_cast<std::size_t>(s)]) ++wrong;
  }
  const auto n = out.rows();
  return static_cast<double>(wrong) / static_cast<double>(n);
}

struct AdaptationMetrics {
  double pre_adapt = 0.0;
  double post_adapt = 0.0;
};

inline AdaptationMetrics evaluate_tasks(const ModelSpec& model, const ParamVector& theta,
                                        const std::vector<Task>& tasks, const InnerConfig& inner) {
  require(!tasks.empty(), "no tasks to evaluate");
  std::vector<AdaptationMetrics> per(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t m) {
    per[m].pre_adapt = task_metric(model, theta, tasks[m].query);
    const Trajectory traj = inner_adapt(model, theta, tasks[m], inner);
    per[m].post_adapt = task_metric(model, traj.points.back(), tasks[m].query);
  });
  AdaptationMetrics out;
  for (const auto& p : per) {
    out.pre_adapt += p.pre_adapt;
    out.post_adapt += p.post_adapt;
  }
  out.pre_adapt /= static_cast<double>(tasks.size());
  out.post_adapt /= static_cast<double>(tasks.size());
  return out;
}

struct GapResult {
  double train_metric = 0.0;
  double test_metric = 0.0;
  double gap = 0.0;
};

/// Where the "test" tasks come from. `heldout` draws fresh tasks from a
/// reserved id range; `training_stream` reuses the training ids (gap = 0).
enum class TestStream { heldout, training_stream };

/// Post-adaptation query metric on the first n_train tasks of the training
/// stream versus n_test held-out tasks; gap = test - train.
inline GapResult generalization_gap(const ModelSpec& model, const ParamVector& theta, const TaskFamily& family,
                                    const InnerConfig& inner, std::size_t n_train_tasks, std::size_t n_test_tasks,
                                    std::uint64_t master_seed, TestStream stream = TestStream::heldout) {
  require(n_train_tasks >= 1 && n_test_tasks >= 1, "task counts must be at least 1");
  std::vector<Task> train, test;
  for (std::size_t i = 0; i < n_train_tasks; ++i)
    train.push_back(sample_task(family, master_seed, training_task_id(family, i)));
  for (std::size_t i = 0; i < n_test_tasks; ++i)
    test.push_back(sample_task(family, master_seed,
                               stream == TestStream::heldout ? heldout_id_base + i : training_task_id(family, i)));
  GapResult r;
  r.train_metric = evaluate_tasks(model, theta, train, inner).post_adapt;
  r.test_metric = evaluate_tasks(model, theta, test, inner).post_adapt;
  r.gap = r.test_metric - r.train_metric;
  return r;
}

}  // namespace sharpmaml

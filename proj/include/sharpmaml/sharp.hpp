#pragma once

// Sharpness-aware perturbations on the lower level (per-task eps_m), the
// upper level (eps), or both, plus ESAM's weight masking / data selection
// and the ANIL head restriction.

#include "sharpmaml/core.hpp"
#include "sharpmaml/diffcore.hpp"
#include "sharpmaml/meta.hpp"
#include "sharpmaml/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace sharpmaml {

enum class Variant { maml, fomaml, sharp_low, sharp_up, sharp_both };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::maml: return "maml";
    case Variant::fomaml: return "fomaml";
    case Variant::sharp_low: return "sharp_low";
    case Variant::sharp_up: return "sharp_up";
    case Variant::sharp_both: return "sharp_both";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "maml") return Variant::maml;
  if (s == "fomaml") return Variant::fomaml;
  if (s == "sharp_low") return Variant::sharp_low;
  if (s == "sharp_up") return Variant::sharp_up;
  if (s == "sharp_both") return Variant::sharp_both;
  throw ConfigError("unknown variant '" + s + "'");
}

struct SharpConfig {
  Variant variant = Variant::maml;
  double alpha_low = 0.0;
  double alpha_up = 0.0;
  bool esam_enabled = false;
  double xi = 1.0;  // SWP keep rate
  double mu = 1.0;  // SDS selection ratio
  bool anil_enabled = false;

  void validate() const {
    require(alpha_low >= 0.0 && alpha_up >= 0.0, "perturbation radii must be non-negative");
    require(xi >= 0.0 && xi <= 1.0, "xi must lie in [0, 1]");
    require(mu > 0.0 && mu <= 1.0, "mu must lie in (0, 1]");
    switch (variant) {
      case Variant::maml:
      case Variant::fomaml:
        require(alpha_low == 0.0 && alpha_up == 0.0, to_string(variant) + " requires alpha_low = alpha_up = 0");
        break;
      case Variant::sharp_low: require(alpha_up == 0.0, "sharp_low requires alpha_up = 0"); break;
      case Variant::sharp_up: require(alpha_low == 0.0, "sharp_up requires alpha_low = 0"); break;
      case Variant::sharp_both: break;
    }
  }
};

/// A perturbation is either exactly zero or has norm exactly alpha (up to
/// rounding). `degenerate` marks a zero caused by a vanishing gradient.
struct Perturbation {
  ParamVector eps;
  bool degenerate = false;

  bool is_zero() const { return eps.size() == 0 || eps.isZero(0.0); }
};

/// Gradients with norm below this are treated as exactly stationary.
inline constexpr double degenerate_grad_norm = 1e-12;

/// alpha * g / ||g||, or zero when alpha = 0 or g vanishes.
inline Perturbation sam_perturbation(const ParamVector& g, double alpha) {
  if (alpha == 0.0) return {ParamVector::Zero(g.size()), false};
  const double n = g.norm();
  if (!(n >= degenerate_grad_norm)) return {ParamVector::Zero(g.size()), true};
  return {(alpha / n) * g, false};
}

inline ParamVector anil_project(const ParamVector& g, const ModelSpec& model) {
  require(model.head_split <= static_cast<std::size_t>(g.size()), "head_split out of range");
  if (model.head_split == 0) return g;
  return zero_prefix(g, model.head_split);
}

/// eps_m = alpha_low * g / ||g|| with g the support gradient at theta
/// (restricted to the head when `frozen_prefix` > 0).
inline Perturbation lower_perturbation(const ModelSpec& model, const ParamVector& theta, const Task& task,
                                       double alpha_low, std::size_t frozen_prefix = 0) {
  require(alpha_low >= 0.0, "alpha_low must be non-negative");
  if (alpha_low == 0.0) return {ParamVector::Zero(theta.size()), false};
  ParamVector g = grad(model, theta, task.support);
  if (frozen_prefix > 0) g = zero_prefix(std::move(g), frozen_prefix);
  return sam_perturbation(g, alpha_low);
}

/// eps = alpha_up * grad_h / ||grad_h|| where grad_h sums the exact
/// meta-gradients of the lower-perturbed inner steps over the batch.
inline Perturbation upper_perturbation(const ModelSpec& model, const ParamVector& theta,
                                       const std::vector<Task>& tasks, const InnerConfig& inner, double alpha_up,
                                       const std::vector<InnerPlan>& lower_plans = {}) {
  require(alpha_up >= 0.0, "alpha_up must be non-negative");
  if (alpha_up == 0.0) return {ParamVector::Zero(theta.size()), false};
  require(lower_plans.empty() || lower_plans.size() == tasks.size(), "one inner plan per task expected");
  InnerConfig exact = inner;
  exact.first_order = false;
  std::vector<ParamVector> grads(tasks.size());
  detail::for_each_task(tasks.size(), [&](std::size_t m) {
    grads[m] = meta_gradient(model, theta, tasks[m], exact, lower_plans.empty() ? InnerPlan{} : lower_plans[m]).g;
  });
  ParamVector h = ParamVector::Zero(theta.size());
  for (const auto& g : grads) h += g;
  return sam_perturbation(h, alpha_up);
}

/// i.i.d. Bernoulli(xi) 0/1 mask.
inline ParamVector swp_mask(std::size_t dim, double xi, Rng& rng) {
  require(xi >= 0.0 && xi <= 1.0, "xi must lie in [0, 1]");
  ParamVector mask(static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask[i] = rng.bernoulli(xi) ? 1.0 : 0.0;
  return mask;
}

/// Indices of the ceil(mu * n) largest loss increases, ties to the lower
/// index, returned in ascending index order.
inline std::vector<std::size_t> sds_select(const std::vector<double>& loss_perturbed,
                                           const std::vector<double>& loss_base, double mu) {
  require(!loss_perturbed.empty(), "sds_select needs at least one sample");
  require(loss_perturbed.size() == loss_base.size(), "per-sample loss vectors differ in length");
  require(mu > 0.0 && mu <= 1.0, "mu must lie in (0, 1]");
  const std::size_t n = loss_perturbed.size();
  // guard against mu * n landing a rounding error above an integer
  auto keep = static_cast<std::size_t>(std::ceil(mu * static_cast<double>(n) - 1e-9));
  keep = std::clamp<std::size_t>(keep, 1, n);

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return loss_perturbed[a] - loss_base[a] > loss_perturbed[b] - loss_base[b];
  });
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// One Sharp-MAML meta-iteration:
///  1. eps_m per task from the support gradient (lower level),
///  2. theta1_m = BGD(theta, 0, eps_m),
///  3. eps from the summed meta-gradients of theta1_m (upper level),
///  4. theta2_m = BGD(theta, eps, eps_m),
///  5. theta <- theta - beta_up * sum_m grad L(theta2_m; query), offsets frozen.
/// `seed` keys the SWP mask, which is shared by all tasks of the iteration.
/// `update_tasks`, when given, supplies the query sets for step 5 (a fresh
/// query draw of the same tasks); otherwise the step-3 queries are reused.
inline StepResult sharp_meta_step(const ModelSpec& model, TrainState state, const std::vector<Task>& tasks,
                                  const InnerConfig& inner, const MetaConfig& meta, const SharpConfig& sharp,
                                  std::uint64_t seed, const std::vector<Task>& diag_tasks = {},
                                  const std::vector<Task>& update_tasks = {}) {
  sharp.validate();
  require(tasks.size() == meta.M, "task batch size does not match M");
  const ParamVector& theta = state.theta;
  const std::size_t M = tasks.size();
  require(update_tasks.empty() || update_tasks.size() == M, "one update task per batch task expected");

  InnerConfig in = inner;
  if (sharp.variant == Variant::maml) in.first_order = false;
  if (sharp.variant == Variant::fomaml) in.first_order = true;
  if (sharp.anil_enabled) {
    require(model.head_split <= model.dim(), "head_split out of range");
    in.frozen_prefix = model.head_split;
  }

  std::vector<InnerPlan> plans(M);
  std::vector<double> eps_m_norms(M, 0.0);
  std::vector<char> lower_degenerate(M, 0);

  if (sharp.alpha_low > 0.0) {
    std::optional<ParamVector> mask;
    if (sharp.esam_enabled && sharp.xi < 1.0) {
      Rng rng(seed, state.t, StreamTag::swp);
      mask = swp_mask(model.dim(), sharp.xi, rng);
    }
    detail::for_each_task(M, [&](std::size_t m) {
      Perturbation p = lower_perturbation(model, theta, tasks[m], sharp.alpha_low, in.frozen_prefix);
      lower_degenerate[m] = p.degenerate ? 1 : 0;
      if (mask) p.eps = p.eps.cwiseProduct(*mask);
      if (sharp.esam_enabled && sharp.mu < 1.0) {
        const ParamVector perturbed = theta + p.eps;
        plans[m].first_step_rows = sds_select(per_sample_loss(model, perturbed, tasks[m].support),
                                              per_sample_loss(model, theta, tasks[m].support), sharp.mu);
      }
      eps_m_norms[m] = p.eps.norm();
      if (!p.is_zero()) plans[m].grad_offset = std::move(p.eps);
    });
  }

  Perturbation upper{ParamVector::Zero(theta.size()), false};
  if (sharp.alpha_up > 0.0) {
    upper = upper_perturbation(model, theta, tasks, in, sharp.alpha_up, plans);
    if (!upper.is_zero())
      for (auto& p : plans) p.start_offset = upper.eps;
  }

  std::vector<ParamVector> grads(M);
  std::vector<double> losses(M);
  detail::for_each_task(M, [&](std::size_t m) {
    auto r = meta_gradient(model, theta, update_tasks.empty() ? tasks[m] : update_tasks[m], in, plans[m]);
    grads[m] = std::move(r.g);
    losses[m] = r.query_loss;
  });

  const bool unperturbed = std::all_of(plans.begin(), plans.end(), [](const InnerPlan& p) {
    return !p.start_offset && !p.grad_offset && !p.first_step_rows;
  });
  double norm_sq = 0.0;
  if (diag_tasks.empty() && unperturbed && !in.first_order) {
    ParamVector sum = ParamVector::Zero(theta.size());
    for (const auto& g : grads) sum += g;
    norm_sq = (sum / static_cast<double>(M)).squaredNorm();
  } else {
    norm_sq = diagnostic_grad_norm_sq(model, theta, tasks, in, diag_tasks);
  }

  StepResult out = apply_meta_update(std::move(state), grads, losses, meta, norm_sq);
  out.report.eps_norm = upper.eps.norm();
  double mean_norm = 0.0;
  for (double v : eps_m_norms) mean_norm += v;
  out.report.mean_eps_m_norm = mean_norm / static_cast<double>(M);
  out.report.degenerate_flags =
      static_cast<int>(std::count(lower_degenerate.begin(), lower_degenerate.end(), 1)) + (upper.degenerate ? 1 : 0);
  return out;
}

}  // namespace sharpmaml

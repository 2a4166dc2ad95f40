#pragma once

// Executable checks of the theory: stationary points / minimizers of the
// task loss carry over to the one-step MAML loss, the PAC-Bayes bound on the
// population MAML loss with its perturbation-radius sweep, and the
// O(1/sqrt(T)) convergence diagnostic.

#include "sharpmaml/core.hpp"
#include "sharpmaml/diffcore.hpp"
#include "sharpmaml/meta.hpp"
#include "sharpmaml/tasks.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace sharpmaml {

// ---------------------------------------------------------------------------
// Stationary-point / minimizer preservation.

enum class CheckStatus { verified, failed, inconclusive };

inline std::string to_string(CheckStatus s) {
  switch (s) {
    case CheckStatus::verified: return "verified";
    case CheckStatus::failed: return "failed";
    case CheckStatus::inconclusive: return "inconclusive";
  }
  return "?";
}

struct ProbeReport {
  int probe = 0;
  CheckStatus status = CheckStatus::inconclusive;
  double grad_norm = 0.0;        // ||grad L(theta*; D)||
  double meta_grad_norm = 0.0;   // ||grad F(theta*)||
  double hessian_bound = 0.0;    // power-iteration estimate of ||H||
  double meta_grad_limit = 0.0;  // allowed ||grad F|| given grad_norm
  double min_curvature = 0.0;    // smallest MAML-loss curvature observed
  int optimizer_iters = 0;
};

struct Lemma1Report {
  CheckStatus status = CheckStatus::inconclusive;
  std::vector<ProbeReport> probes;
};

struct Lemma1Options {
  int max_newton_iters = 1000;
  double fd_step = 1e-3;  // second-difference step for curvature probes
  int power_iters = 30;
};

namespace detail {

/// Conjugate gradients on (H + lambda I) p = -g. Returns nullopt on negative
/// curvature.
inline std::optional<ParamVector> damped_newton_direction(const ModelSpec& model, const ParamVector& theta,
                                                          const Dataset& data, const ParamVector& g, double lambda) {
  const Eigen::Index k = g.size();
  ParamVector p = ParamVector::Zero(k);
  ParamVector r = -g;
  ParamVector d = r;
  double rr = r.squaredNorm();
  const double stop = 1e-24 * std::max(1.0, g.squaredNorm());
  for (Eigen::Index it = 0; it < 2 * k + 10 && rr > stop; ++it) {
    const ParamVector Hd = hvp(model, theta, data, d) + lambda * d;
    const double curv = d.dot(Hd);
    if (!(curv > 0.0)) return std::nullopt;
    const double a = rr / curv;
    p += a * d;
    r -= a * Hd;
    const double rr_new = r.squaredNorm();
    d = r + (rr_new / rr) * d;
    rr = rr_new;
  }
  return p;
}

/// Levenberg-Marquardt style Newton-CG on L(theta; data) until
/// ||grad|| <= tol or the iteration cap, then a few polishing steps that are
/// kept only while the gradient keeps shrinking.
inline std::pair<ParamVector, int> minimize_to_stationarity(const ModelSpec& model, ParamVector theta,
                                                            const Dataset& data, double tol, int max_iters) {
  constexpr int polish_steps = 5;
  double lambda = 1e-3;
  auto [f, g] = value_and_grad(model, theta, data);
  int it = 0, polish = 0;
  for (; it < max_iters && polish < polish_steps; ++it) {
    if (g.norm() <= tol) ++polish;
    if (g.norm() == 0.0) break;
    const auto p = damped_newton_direction(model, theta, data, g, lambda);
    if (!p) {
      lambda *= 10.0;
      continue;
    }
    const ParamVector trial = theta + *p;
    auto [f2, g2] = value_and_grad(model, trial, data);
    if (polish > 0) {
      if (!(std::isfinite(f2) && f2 <= f && g2.norm() < g.norm())) break;
      theta = trial;
      f = f2;
      g = std::move(g2);
      continue;
    }
    if (std::isfinite(f2) && (f2 < f || (f2 <= f && g2.norm() < g.norm()))) {
      theta = trial;
      f = f2;
      g = std::move(g2);
      lambda = std::max(lambda / 3.0, 1e-14);
    } else {
      lambda *= 4.0;
      if (lambda > 1e12) break;
    }
  }
  return {theta, it};
}

inline double power_iteration_norm(const ModelSpec& model, const ParamVector& theta, const Dataset& data, Rng& rng,
                                   int iters) {
  ParamVector v = rng.normal_vector(theta.size());
  v.normalize();
  double est = 0.0;
  for (int i = 0; i < iters; ++i) {
    const ParamVector hv = hvp(model, theta, data, v);
    est = hv.norm();
    if (est == 0.0) break;
    v = hv / est;
  }
  return est;
}

}  // namespace detail

/// For `task` with support == query: find stationary points of the task loss
/// from n_probes random starts and check that (a) the MAML meta-gradient
/// vanishes there up to the propagated tolerance and (b) the MAML loss has
/// non-negative curvature there.
inline Lemma1Report lemma1_check(const ModelSpec& model, const Task& task, const InnerConfig& inner, int n_probes,
                                 std::uint64_t seed, double tol_grad, double tol_min,
                                 const Lemma1Options& opts = {}) {
  require(task.support == task.query, "stationary-point check requires support == query");
  require(n_probes >= 1, "n_probes must be at least 1");
  require(tol_grad >= 0.0 && tol_min >= 0.0, "tolerances must be non-negative");
  inner.validate();
  InnerConfig exact = inner;
  exact.first_order = false;
  const bool quadratic = task.support.loss_kind == LossKind::quadratic_analytic;

  Lemma1Report report;
  report.probes.resize(static_cast<std::size_t>(n_probes));
  parallel_for(static_cast<std::size_t>(n_probes), [&](std::size_t pi) {
    ProbeReport& pr = report.probes[pi];
    pr.probe = static_cast<int>(pi);
    Rng rng(seed, pi, StreamTag::probes);

    ParamVector theta_star;
    if (quadratic) {
      // the unique minimizer of an SPD quadratic is its center
      theta_star = task.support.center;
    } else {
      const ParamVector start = init_params(model, splitmix64(seed ^ (pi + 1)));
      auto [th, iters] = detail::minimize_to_stationarity(model, start, task.support, tol_grad, opts.max_newton_iters);
      theta_star = std::move(th);
      pr.optimizer_iters = iters;
    }
    pr.grad_norm = grad(model, theta_star, task.support).norm();
    if (!(pr.grad_norm <= tol_grad)) {
      pr.status = CheckStatus::inconclusive;
      return;
    }

    pr.meta_grad_norm = meta_gradient(model, theta_star, task, exact).g.norm();
    pr.hessian_bound = detail::power_iteration_norm(model, theta_star, task.support, rng, opts.power_iters);
    // each inner step contributes (I - beta H) on both the forward and the
    // backward side
    pr.meta_grad_limit = tol_grad * std::pow(1.0 + exact.beta_low * pr.hessian_bound, 2 * exact.steps);
    const bool stationary_ok = pr.meta_grad_norm <= pr.meta_grad_limit;

    bool curvature_ok = true;
    if (quadratic) {
      // MAML Hessian: (I - beta A)^K A (I - beta A)^K
      const Eigen::Index d = task.support.A.rows();
      Matrix contraction = Matrix::Identity(d, d);
      for (int s = 0; s < exact.steps; ++s)
        contraction = contraction * (Matrix::Identity(d, d) - exact.beta_low * task.support.A);
      Matrix h = contraction.transpose() * task.support.A * contraction;
      h = 0.5 * (h + h.transpose()).eval();
      pr.min_curvature = Eigen::SelfAdjointEigenSolver<Matrix>(h, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
      curvature_ok = pr.min_curvature >= -tol_min;
    } else {
      auto maml_loss = [&](const ParamVector& p) {
        return loss(model, inner_adapt(model, p, task, exact).points.back(), task.query);
      };
      const double f0 = maml_loss(theta_star);
      const double h = opts.fd_step;
      pr.min_curvature = std::numeric_limits<double>::infinity();
      for (int q = 0; q < n_probes; ++q) {
        ParamVector v = rng.normal_vector(theta_star.size());
        v.normalize();
        const double rq = (maml_loss(theta_star + h * v) - 2.0 * f0 + maml_loss(theta_star - h * v)) / (h * h);
        pr.min_curvature = std::min(pr.min_curvature, rq);
      }
      curvature_ok = pr.min_curvature >= -tol_min;
    }
    pr.status = (stationary_ok && curvature_ok) ? CheckStatus::verified : CheckStatus::failed;
  });

  bool any_failed = false, all_verified = true;
  for (const auto& p : report.probes) {
    any_failed |= p.status == CheckStatus::failed;
    all_verified &= p.status == CheckStatus::verified;
  }
  report.status = any_failed ? CheckStatus::failed : all_verified ? CheckStatus::verified : CheckStatus::inconclusive;
  return report;
}

// ---------------------------------------------------------------------------
// PAC-Bayes bound.

struct BoundInputs {
  long k = 1;       // parameter dimension
  long n = 1;       // samples per task
  long M = 1;       // tasks
  double delta = 0.05;
  double alpha = 0.05;
  double theta_norm_sq = 0.0;
  double gamma_A = 0.0;         // uniform stability of the inner algorithm
  double empirical_term = 0.0;  // max_{||e||<=alpha} F(theta + e; D), in [0, 1]

  void validate(bool check_alpha = true) const {
    require(k >= 1, "k must be at least 1");
    require(n >= 1 && M >= 1 && n * M >= 2, "need n*M >= 2");
    require(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
    if (check_alpha) require(alpha > 0.0, "alpha must be positive");
    require(theta_norm_sq >= 0.0 && gamma_A >= 0.0, "theta_norm_sq and gamma_A must be non-negative");
    require(empirical_term >= 0.0 && empirical_term <= 1.0, "empirical term must lie in [0, 1]");
  }
};

/// Short form (no constant under the root) or the detailed derivation,
/// which carries +14.
enum class BoundForm { main_text, appendix };

inline double bound_constant(BoundForm form) { return form == BoundForm::appendix ? 14.0 : 0.0; }

/// The square-root complexity term of the bound.
inline double bound_sqrt_term(const BoundInputs& b, BoundForm form = BoundForm::main_text) {
  b.validate();
  const double N = static_cast<double>(b.n) * static_cast<double>(b.M);
  const double k = static_cast<double>(b.k);
  const double lnN = std::log(N);
  const double inflate = 1.0 + std::sqrt(lnN / k);
  const double complexity = k * std::log1p(b.theta_norm_sq / (b.alpha * b.alpha) * inflate * inflate);
  return std::sqrt((complexity + 2.0 * std::log(1.0 / b.delta) + 5.0 * lnN + bound_constant(form)) / (4.0 * N));
}

/// Upper bound on the population MAML loss at theta-hat.
inline double pac_bound(const BoundInputs& b, BoundForm form = BoundForm::main_text) {
  return b.empirical_term + b.gamma_A + bound_sqrt_term(b, form);
}

/// Convenience stability estimate gamma_A = c / n for gradient descent.
inline double gd_stability(double c, long n) {
  require(n >= 1, "n must be at least 1");
  return c / static_cast<double>(n);
}

struct SweepRow {
  double alpha = 0.0;
  double empirical_term = 0.0;
  double sqrt_term = 0.0;
  double gamma_A = 0.0;
  double bound = 0.0;
};

struct AlphaSweep {
  std::vector<SweepRow> rows;
  std::size_t argmin = 0;
  /// Radii below this make the complexity term exceed 1.
  double threshold = 0.0;
  std::size_t qualifying = 0;   // grid radii below the threshold, except the largest
  std::size_t improved = 0;     // of those, how many have a larger radius with a smaller bound
  bool smallest_claim = false;  // claim for the smallest qualifying radius
  bool claim_holds = false;     // claim for every qualifying radius (vacuous if none)
  /// Radii whose sqrt term exceeds the largest radius's by more than 1. For
  /// these the claim holds whatever the empirical term in [0, 1] is.
  std::size_t provable = 0;
  std::size_t provable_improved = 0;
};

/// c = ||theta||^2 (1 + sqrt(ln N / k))^2, N = n*M.
inline double sweep_c(const BoundInputs& b) {
  const double N = static_cast<double>(b.n) * static_cast<double>(b.M);
  const double inflate = 1.0 + std::sqrt(std::log(N) / static_cast<double>(b.k));
  return b.theta_norm_sq * inflate * inflate;
}

/// sqrt(c / (exp(4N/k) - 1)); zero when the exponential overflows.
inline double sweep_threshold(const BoundInputs& b) {
  const double N = static_cast<double>(b.n) * static_cast<double>(b.M);
  const double denom = std::expm1(4.0 * N / static_cast<double>(b.k));
  if (!std::isfinite(denom)) return 0.0;
  return std::sqrt(sweep_c(b) / denom);
}

/// Evaluates the bound over ascending radii with a radius-dependent empirical
/// term, and checks that every radius below the threshold is beaten by some
/// larger radius on the grid.
inline AlphaSweep bound_alpha_sweep(const BoundInputs& base, const std::vector<double>& alphas,
                                    const std::function<double(double)>& empirical_term_fn,
                                    BoundForm form = BoundForm::main_text) {
  base.validate(false);
  require(!alphas.empty(), "alpha list is empty");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    require(alphas[i] > 0.0, "alphas must be positive");
    require(i == 0 || alphas[i] > alphas[i - 1], "alphas must be strictly ascending");
  }
  AlphaSweep out;
  out.threshold = sweep_threshold(base);
  for (double a : alphas) {
    BoundInputs b = base;
    b.alpha = a;
    b.empirical_term = empirical_term_fn(a);
    SweepRow row;
    row.alpha = a;
    row.empirical_term = b.empirical_term;
    row.sqrt_term = bound_sqrt_term(b, form);
    row.gamma_A = b.gamma_A;
    row.bound = row.empirical_term + row.gamma_A + row.sqrt_term;
    out.rows.push_back(row);
  }
  for (std::size_t i = 1; i < out.rows.size(); ++i)
    if (out.rows[i].bound < out.rows[out.argmin].bound) out.argmin = i;

  bool first = true;
  out.claim_holds = true;
  for (std::size_t i = 0; i + 1 < out.rows.size(); ++i) {
    if (!(alphas[i] < out.threshold)) continue;
    ++out.qualifying;
    bool found = false;
    for (std::size_t j = i + 1; j < out.rows.size() && !found; ++j) found = out.rows[j].bound < out.rows[i].bound;
    if (found) ++out.improved;
    out.claim_holds &= found;
    if (first) {
      out.smallest_claim = found;
      first = false;
    }
  }
  const double last_sqrt = out.rows.back().sqrt_term;
  for (std::size_t i = 0; i + 1 < out.rows.size(); ++i) {
    if (!(out.rows[i].sqrt_term > 1.0 + last_sqrt)) continue;
    ++out.provable;
    bool found = false;
    for (std::size_t j = i + 1; j < out.rows.size() && !found; ++j) found = out.rows[j].bound < out.rows[i].bound;
    if (found) ++out.provable_improved;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convergence diagnostic.

struct ConvergenceSummary {
  double final_avg = 0.0;
  double loglog_slope = 0.0;
  /// Set when the slope is undefined (a non-positive running average).
  bool slope_undefined = false;
};

/// Final running average of ||grad F||^2 and the least-squares slope of
/// log(running avg) against log(t) over the second half of the trace.
inline ConvergenceSummary convergence_diagnostic(const ConvergenceTrace& trace) {
  require(trace.size() >= 100, "convergence diagnostic needs at least 100 iterations");
  ConvergenceSummary s;
  s.final_avg = trace.running_avg.back();
  const std::size_t n = trace.size();
  const std::size_t lo = n / 2;
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = lo; i < n; ++i) {
    const double avg = trace.running_avg[i];
    if (!(avg > 0.0) || !std::isfinite(avg)) {
      s.slope_undefined = true;
      s.loglog_slope = 0.0;
      return s;
    }
    const double x = std::log(static_cast<double>(i + 1));
    const double y = std::log(avg);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double m = static_cast<double>(n - lo);
  s.loglog_slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
  return s;
}

}  // namespace sharpmaml

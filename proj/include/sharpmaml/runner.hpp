#pragma once

// Experiment drivers behind the command-line subcommands. Each writes its
// artifacts under cfg.out_dir and returns normally, or throws ConfigError,
// DivergenceError or IoError.

#include "sharpmaml/config.hpp"
#include "sharpmaml/io.hpp"
#include "sharpmaml/landscape.hpp"
#include "sharpmaml/meta.hpp"
#include "sharpmaml/sharp.hpp"
#include "sharpmaml/tasks.hpp"
#include "sharpmaml/theory.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace sharpmaml {

inline std::string out_path(const RunConfig& cfg, const std::string& name) {
  return (std::filesystem::path(cfg.out_dir) / name).string();
}

inline ParamVector initial_params(const RunConfig& cfg) {
  return init_params(cfg.model(), cfg.seed, cfg.init_scale);
}

inline ParamVector params_from(const RunConfig& cfg, const std::optional<std::string>& checkpoint) {
  if (checkpoint) return load_checkpoint_for(*checkpoint, cfg.model()).theta;
  return initial_params(cfg);
}

inline std::vector<Task> diagnostic_tasks(const RunConfig& cfg) {
  std::vector<Task> out;
  for (std::size_t i = 0; i < cfg.diag_tasks; ++i) out.push_back(sample_task(cfg.task, cfg.seed, diagnostic_id_base + i));
  return out;
}

/// The held-out task used by the single-task instruments.
inline Task instrument_task(const RunConfig& cfg) {
  return sample_task(cfg.task, cfg.seed, heldout_id_base + cfg.task_index);
}

struct EvalRow {
  std::uint64_t iter = 0;
  double pre_adapt = 0.0;
  double post_adapt = 0.0;
  double gen_gap = 0.0;
};

inline EvalRow evaluate(const RunConfig& cfg, const ParamVector& theta, std::uint64_t iter) {
  const ModelSpec model = cfg.model();
  const InnerConfig inner = cfg.inner();
  const auto test = sample_heldout_tasks(cfg.task, cfg.seed, cfg.n_test_tasks);
  const AdaptationMetrics m = evaluate_tasks(model, theta, test, inner);
  const GapResult gap = generalization_gap(model, theta, cfg.task, inner, cfg.n_train_tasks, cfg.n_test_tasks, cfg.seed);
  return {iter, m.pre_adapt, m.post_adapt, gap.gap};
}

inline std::string eval_row(const RunConfig& cfg, const EvalRow& r) {
  return std::to_string(cfg.seed) + "," + to_string(cfg.variant) + "," + std::to_string(r.iter) + "," +
         format_double(r.pre_adapt) + "," + format_double(r.post_adapt) + "," + format_double(r.gen_gap);
}

struct TrainOutcome {
  TrainState state;
  std::vector<EvalRow> evals;
};

/// One training step of whatever the config selects.
inline StepResult train_step(const RunConfig& cfg, const ModelSpec& model, TrainState state,
                             const std::vector<Task>& diag) {
  const auto tasks = sample_task_batch(cfg.task, cfg.seed, state.t, cfg.M);
  const MetaConfig meta = cfg.meta();
  if (cfg.objective == TrainObjective::erm) return erm_step(model, std::move(state), tasks, meta);
  const InnerConfig inner = cfg.inner();
  if (cfg.variant == Variant::maml || cfg.variant == Variant::fomaml) {
    // the plain path; sharp_meta_step with zero radii reproduces it bit for bit
    if (!cfg.esam_enabled) return maml_meta_step(model, std::move(state), tasks, inner, meta, diag);
  }
  std::vector<Task> update;
  if (cfg.resample_query)
    for (const auto& t : tasks) {
      Task fresh = sample_task(cfg.task, cfg.seed, t.task_id, 1);
      fresh.support = t.support;
      update.push_back(std::move(fresh));
    }
  return sharp_meta_step(model, std::move(state), tasks, inner, meta, cfg.sharp(), cfg.seed, diag, update);
}

/// Trains from scratch, or from `resume`. Trace rows go to trace.csv (rows at
/// or after the resume point are replaced), checkpoints to ckpt_<iter>.bin
/// and final.bin, evaluations to eval.csv.
inline TrainOutcome run_train(const RunConfig& cfg, const std::optional<std::string>& resume = std::nullopt) {
  cfg.validate();
  const ModelSpec model = cfg.model();
  std::filesystem::create_directories(cfg.out_dir);

  TrainState state;
  if (resume) {
    const Checkpoint ck = load_checkpoint_for(*resume, model);
    if (ck.seed != cfg.seed) throw ConfigError("checkpoint seed differs from config seed");
    state.theta = ck.theta;
    state.t = ck.iter;
    state.trace.sum = ck.trace_sum;
    state.trace.count = ck.trace_count;
  } else {
    state.theta = initial_params(cfg);
  }
  require(state.t <= cfg.T, "checkpoint is past train.T");

  const std::string trace_path = out_path(cfg, "trace.csv");
  std::vector<std::string> kept{trace_header};
  if (resume && std::filesystem::exists(trace_path)) {
    const auto lines = read_lines(trace_path);
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      if (std::stoull(lines[i].substr(0, lines[i].find(','))) < state.t) kept.push_back(lines[i]);
    }
  }
  auto trace = open_output(trace_path);
  for (const auto& l : kept) trace << l << "\n";

  const std::string eval_path = out_path(cfg, "eval.csv");
  std::vector<std::string> eval_kept{eval_header};
  if (resume && std::filesystem::exists(eval_path)) {
    const auto lines = read_lines(eval_path);
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      const auto a = lines[i].find(',');
      const auto b = lines[i].find(',', a + 1);
      const auto c = lines[i].find(',', b + 1);
      if (std::stoull(lines[i].substr(b + 1, c - b - 1)) < state.t) eval_kept.push_back(lines[i]);
    }
  }
  auto eval = open_output(eval_path);
  for (const auto& l : eval_kept) eval << l << "\n";
  eval.flush();

  const auto diag = diagnostic_tasks(cfg);
  const auto start = std::chrono::steady_clock::now();
  TrainOutcome outcome;

  auto checkpoint = [&](const std::string& name) {
    write_checkpoint(out_path(cfg, name),
                     {model.layout_string(), cfg.seed, state.t, state.trace.count, state.trace.sum, state.theta});
  };

  while (state.t < cfg.T) {
    StepResult r = train_step(cfg, model, std::move(state), diag);
    state = std::move(r.state);
    double wall = 0.0;
    if (cfg.trace_wall_ms)
      wall = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    trace << trace_row(r.report, wall) << "\n";
    trace.flush();
    if (cfg.checkpoint_every > 0 && state.t % cfg.checkpoint_every == 0 && state.t < cfg.T)
      checkpoint("ckpt_" + std::to_string(state.t) + ".bin");
    if (cfg.eval_every > 0 && state.t % cfg.eval_every == 0 && state.t < cfg.T) {
      outcome.evals.push_back(evaluate(cfg, state.theta, state.t));
      eval << eval_row(cfg, outcome.evals.back()) << "\n";
      eval.flush();
    }
  }
  checkpoint("final.bin");
  outcome.evals.push_back(evaluate(cfg, state.theta, state.t));
  eval << eval_row(cfg, outcome.evals.back()) << "\n";
  outcome.state = std::move(state);
  return outcome;
}

/// Single evaluation row for a stored model (eval.csv, overwritten).
inline EvalRow run_eval(const RunConfig& cfg, const std::optional<std::string>& checkpoint) {
  cfg.validate();
  std::uint64_t iter = 0;
  ParamVector theta;
  if (checkpoint) {
    const Checkpoint ck = load_checkpoint_for(*checkpoint, cfg.model());
    theta = ck.theta;
    iter = ck.iter;
  } else {
    theta = initial_params(cfg);
  }
  const EvalRow row = evaluate(cfg, theta, iter);
  auto out = open_output(out_path(cfg, "eval.csv"));
  out << eval_header << "\n" << eval_row(cfg, row) << "\n";
  return row;
}

inline void write_grid(const std::string& path, const LandscapeGrid& grid) {
  auto out = open_output(path);
  out << landscape_header << "\n";
  for (std::size_t i = 0; i < grid.ys.size(); ++i)
    for (std::size_t j = 0; j < grid.xs.size(); ++j)
      out << i << "," << j << "," << format_double(grid.xs[j]) << "," << format_double(grid.ys[i]) << ","
          << format_double(grid.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) << ","
          << static_cast<int>(grid.diverged[i][j]) << "\n";
}

/// landscape_erm.csv and/or landscape_maml.csv; both share the directions.
inline std::vector<LandscapeGrid> run_landscape(const RunConfig& cfg, const std::optional<std::string>& checkpoint) {
  cfg.validate();
  const ModelSpec model = cfg.model();
  const ParamVector theta = params_from(cfg, checkpoint);
  const Task task = instrument_task(cfg);
  const Directions dirs = random_directions(model, theta, cfg.seed);
  const double beta = cfg.inner().beta_low;
  std::vector<LandscapeGrid> grids;
  if (cfg.landscape_objective != "maml")
    grids.push_back(loss_grid(model, theta, task, dirs, cfg.landscape_extent, cfg.landscape_resolution,
                              ObjectiveTag::erm_task_loss, beta));
  if (cfg.landscape_objective != "erm")
    grids.push_back(loss_grid(model, theta, task, dirs, cfg.landscape_extent, cfg.landscape_resolution,
                              ObjectiveTag::maml_task_loss, beta));
  for (const auto& g : grids) write_grid(out_path(cfg, "landscape_" + to_string(g.objective) + ".csv"), g);
  return grids;
}

/// Sharpness of the instrument task's support loss over sharpness.alphas.
inline std::vector<SharpnessResult> run_sharpness(const RunConfig& cfg, const std::optional<std::string>& checkpoint) {
  cfg.validate();
  require(!cfg.sharpness_alphas.empty(), "sharpness.alphas is empty");
  const ModelSpec model = cfg.model();
  const ParamVector theta = params_from(cfg, checkpoint);
  const Task task = instrument_task(cfg);
  auto alphas = cfg.sharpness_alphas;
  std::sort(alphas.begin(), alphas.end());
  const auto results = sharpness_profile(model, theta, task.support, alphas, cfg.sharpness_budget, cfg.seed);
  auto out = open_output(out_path(cfg, "sharpness.csv"));
  out << sharpness_header << "\n";
  for (const auto& r : results)
    out << format_double(r.alpha) << "," << format_double(r.sharpness) << "," << format_double(r.argmax_norm) << ","
        << r.restarts << "\n";
  return results;
}

/// Bound table over bound.alphas. With a checkpoint, ||theta||^2 and k come
/// from the model and the empirical term is the MAML query loss over the
/// first eval.n_train_tasks training tasks plus its measured sharpness,
/// clipped to [0, 1]. Without one, bound.* supplies every input.
inline AlphaSweep run_bound(const RunConfig& cfg, const std::optional<std::string>& checkpoint) {
  cfg.validate();
  require(!cfg.bound_alphas.empty(), "bound.alphas is empty");
  const BoundForm form = cfg.bound_form == "appendix" ? BoundForm::appendix : BoundForm::main_text;
  BoundInputs base;
  base.delta = cfg.bound_delta;
  base.k = cfg.bound_k;
  base.n = cfg.bound_n > 0 ? cfg.bound_n : static_cast<long>(cfg.task.n_query);
  base.M = cfg.bound_M > 0 ? cfg.bound_M : static_cast<long>(cfg.n_train_tasks);
  base.theta_norm_sq = cfg.bound_theta_norm_sq;
  base.gamma_A = cfg.bound_gamma_c > 0.0 ? gd_stability(cfg.bound_gamma_c, base.n) : 0.0;
  base.empirical_term = cfg.bound_empirical_term;

  std::function<double(double)> emp = [&](double) { return cfg.bound_empirical_term; };
  std::vector<double> measured;
  auto alphas = cfg.bound_alphas;
  std::sort(alphas.begin(), alphas.end());
  if (checkpoint) {
    const ModelSpec model = cfg.model();
    const ParamVector theta = load_checkpoint_for(*checkpoint, model).theta;
    base.k = static_cast<long>(model.dim());
    base.theta_norm_sq = theta.squaredNorm();
    InnerConfig inner = cfg.inner();
    inner.first_order = false;
    std::vector<Task> tasks;
    for (std::size_t i = 0; i < cfg.n_train_tasks; ++i)
      tasks.push_back(sample_task(cfg.task, cfg.seed, training_task_id(cfg.task, i)));
    auto value = [&](const ParamVector& p) {
      std::vector<double> l(tasks.size());
      parallel_for(tasks.size(), [&](std::size_t m) {
        const Trajectory traj = inner_adapt(model, p, tasks[m], inner);
        l[m] = loss(model, traj.points.back(), tasks[m].query);
      });
      double s = 0.0;
      for (double v : l) s += v;
      return s / static_cast<double>(tasks.size());
    };
    auto gradient = [&](const ParamVector& p) {
      std::vector<ParamVector> g(tasks.size());
      parallel_for(tasks.size(), [&](std::size_t m) { g[m] = meta_gradient(model, p, tasks[m], inner).g; });
      ParamVector s = ParamVector::Zero(p.size());
      for (const auto& v : g) s += v;
      return ParamVector(s / static_cast<double>(tasks.size()));
    };
    const double base_value = value(theta);
    const auto profile = sharpness_profile(value, gradient, theta, alphas, cfg.sharpness_budget, cfg.seed);
    for (const auto& r : profile) measured.push_back(std::clamp(base_value + r.sharpness, 0.0, 1.0));
    emp = [&](double a) {
      const auto it = std::lower_bound(alphas.begin(), alphas.end(), a);
      return measured[static_cast<std::size_t>(it - alphas.begin())];
    };
  }
  require(base.k >= 1, "bound.k must be set (or pass a checkpoint)");

  const AlphaSweep sweep = bound_alpha_sweep(base, alphas, emp, form);
  auto out = open_output(out_path(cfg, "bound.csv"));
  out << bound_header << "\n";
  for (const auto& r : sweep.rows)
    out << format_double(r.alpha) << "," << format_double(r.empirical_term) << "," << format_double(r.sqrt_term)
        << "," << format_double(r.gamma_A) << "," << format_double(r.bound) << "\n";

  nlohmann::ordered_json j;
  j["form"] = cfg.bound_form;
  j["k"] = base.k;
  j["n"] = base.n;
  j["M"] = base.M;
  j["delta"] = base.delta;
  j["theta_norm_sq"] = base.theta_norm_sq;
  j["gamma_A"] = base.gamma_A;
  j["empirical_term_source"] = checkpoint ? "measured (clipped to [0, 1])" : "config";
  j["argmin_alpha"] = sweep.rows[sweep.argmin].alpha;
  j["threshold"] = sweep.threshold;
  j["qualifying"] = sweep.qualifying;
  j["improved"] = sweep.improved;
  j["smallest_claim"] = sweep.smallest_claim;
  j["claim_holds"] = sweep.claim_holds;
  j["provable"] = sweep.provable;
  j["provable_improved"] = sweep.provable_improved;
  j["conditional_on"] =
      "F(theta; P) <= E_{e ~ N(0, alpha^2 I)} F(theta + e; P), which cannot be checked from data";
  auto js = open_output(out_path(cfg, "bound_summary.json"));
  js << j.dump(2) << "\n";
  return sweep;
}

/// Lemma-1 check on the instrument task with its support set used at both
/// levels. Writes lemma.json.
inline Lemma1Report run_lemma_check(const RunConfig& cfg) {
  cfg.validate();
  const ModelSpec model = cfg.model();
  Task task = instrument_task(cfg);
  task.query = task.support;
  InnerConfig inner = cfg.inner();
  inner.first_order = false;
  const Lemma1Report report =
      lemma1_check(model, task, inner, cfg.lemma_probes, cfg.seed, cfg.lemma_tol_grad, cfg.lemma_tol_min);

  nlohmann::ordered_json j;
  j["status"] = to_string(report.status);
  j["model"] = model.layout_string();
  j["task_id"] = task.task_id;
  j["tol_grad"] = cfg.lemma_tol_grad;
  j["tol_min"] = cfg.lemma_tol_min;
  j["probes"] = nlohmann::json::array();
  for (const auto& p : report.probes) {
    nlohmann::ordered_json pj;
    pj["probe"] = p.probe;
    pj["status"] = to_string(p.status);
    pj["grad_norm"] = p.grad_norm;
    pj["meta_grad_norm"] = p.meta_grad_norm;
    pj["hessian_bound"] = p.hessian_bound;
    pj["meta_grad_limit"] = p.meta_grad_limit;
    pj["min_curvature"] = p.min_curvature;
    pj["optimizer_iters"] = p.optimizer_iters;
    j["probes"].push_back(pj);
  }
  auto out = open_output(out_path(cfg, "lemma.json"));
  out << j.dump(2) << "\n";
  return report;
}

}  // namespace sharpmaml

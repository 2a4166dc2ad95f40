// Acceptance run: one PASS/FAIL line per criterion, with the measured numbers.

#include "helpers.hpp"

#include "sharpmaml/runner.hpp"

#include <boost/multiprecision/cpp_bin_float.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <sstream>

using namespace sharpmaml;
using namespace testing_support;
namespace fs = std::filesystem;
using HP = boost::multiprecision::cpp_bin_float_50;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sharpmaml_accept_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

InnerConfig inner_cfg(double beta, int steps = 1, bool first_order = false) {
  InnerConfig c;
  c.beta_low = beta;
  c.steps = steps;
  c.first_order = first_order;
  return c;
}

Outcome quadratic_oracle() {
  Rng rng(1001, 0, StreamTag::params);
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const int d = i < 25 ? 1 : 5;
    const Matrix a = random_spd(d, 0.1, 4.0, rng);
    const ParamVector c = rng.normal_vector(d), theta = rng.normal_vector(d);
    const double beta = rng.uniform(0.01, 0.4);
    const Matrix ib = Matrix::Identity(d, d) - beta * a;
    const ParamVector expected = a * ib * ib * (theta - c);
    const ParamVector got = meta_gradient(ModelSpec::quadratic(d), theta, quadratic_task(a, c), inner_cfg(beta)).g;
    worst = std::max(worst, rel_err(got, expected));
  }
  return {worst < 1e-10, "max rel err " + fmt(worst) + " over 50 tasks"};
}

Outcome finite_differences() {
  const auto model = ModelSpec::mlp({2, 16, 1});
  double worst_full = 0.0, best_fo = std::numeric_limits<double>::infinity();
  for (int steps : {1, 2, 3})
    for (std::uint64_t s = 0; s < 10; ++s) {
      Rng rng(s, 50, StreamTag::params);
      const Task t = random_regression_task(model, 10, 10, rng);
      const ParamVector theta = init_params(model, s) + 0.1 * rng.normal_vector(static_cast<Eigen::Index>(model.dim()));
      const auto cfg = inner_cfg(0.1, steps);
      const ParamVector fd = fd_meta_gradient(model, theta, t, cfg, {}, 1e-4);
      worst_full = std::max(worst_full, rel_err(meta_gradient(model, theta, t, cfg).g, fd));
      best_fo = std::min(best_fo, rel_err(meta_gradient(model, theta, t, inner_cfg(0.1, steps, true)).g, fd));
    }
  // the negative control must fail the same check on every case
  return {worst_full < 1e-4 && best_fo > 1e-4,
          "full max rel err " + fmt(worst_full) + "; FOMAML min rel err " + fmt(best_fo) + " (fails, as expected)"};
}

std::string train_trace(RunConfig cfg, const std::string& tag, unsigned threads) {
  const fs::path dir = scratch("reduce_" + tag + "_" + std::to_string(threads));
  cfg.out_dir = dir.string();
  default_threads() = threads;
  run_train(cfg);
  default_threads() = 1;
  return read_file((dir / "trace.csv").string());
}

Outcome reductions() {
  RunConfig base;
  base.task.n_support = 5;
  base.task.n_query = 10;
  base.hidden = {40, 40};
  base.M = 4;
  base.T = 100;
  base.beta_low = 0.01;
  base.beta_up = 0.01;
  base.seed = 7;
  const double al = 0.05, au = 0.005;

  auto with = [&](Variant v, double a_low, double a_up) {
    RunConfig c = base;
    c.variant = v;
    c.alpha_low = a_low;
    c.alpha_up = a_up;
    return c;
  };
  struct Pair {
    std::string name;
    RunConfig lhs, rhs;
  };
  std::vector<Pair> pairs;
  pairs.push_back({"both(0,0)=maml", with(Variant::sharp_both, 0, 0), with(Variant::maml, 0, 0)});
  pairs.push_back({"both(up=0)=low", with(Variant::sharp_both, al, 0), with(Variant::sharp_low, al, 0)});
  pairs.push_back({"both(low=0)=up", with(Variant::sharp_both, 0, au), with(Variant::sharp_up, 0, au)});
  RunConfig esam = with(Variant::sharp_low, al, 0);
  esam.esam_enabled = true;
  esam.xi = 1.0;
  esam.mu = 1.0;
  pairs.push_back({"esam(1,1)=low", esam, with(Variant::sharp_low, al, 0)});
  for (Variant v : {Variant::maml, Variant::sharp_both}) {
    const bool sharp = v != Variant::maml;
    RunConfig anil = with(v, sharp ? al : 0, sharp ? au : 0);
    anil.anil_enabled = true;
    anil.head_split = 0;
    pairs.push_back({"anil(0)=" + to_string(v), anil, with(v, sharp ? al : 0, sharp ? au : 0)});
  }

  int ok = 0;
  std::string failed;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::string a1 = train_trace(pairs[i].lhs, std::to_string(i) + "l", 1);
    const std::string a4 = train_trace(pairs[i].lhs, std::to_string(i) + "l", 4);
    const std::string b1 = train_trace(pairs[i].rhs, std::to_string(i) + "r", 1);
    const std::string b4 = train_trace(pairs[i].rhs, std::to_string(i) + "r", 4);
    if (a1 == b1 && a1 == a4 && b1 == b4 && a1.size() > 100)
      ++ok;
    else
      failed += " " + pairs[i].name;
  }
  return {ok == static_cast<int>(pairs.size()),
          std::to_string(ok) + "/" + std::to_string(pairs.size()) +
              " identities byte-identical at 1 and 4 threads" + (failed.empty() ? "" : "; differing:" + failed)};
}

Outcome stationary_points() {
  Rng rng(404, 0, StreamTag::params);
  int quad_ok = 0;
  for (int i = 0; i < 20; ++i) {
    const int d = 1 + i % 5;
    const Matrix a = random_spd(d, 0.1, 3.0, rng);
    const ParamVector c = rng.normal_vector(d);
    const auto r = lemma1_check(ModelSpec::quadratic(d), quadratic_task(a, c), inner_cfg(rng.uniform(0.01, 1.5)), 2,
                                static_cast<std::uint64_t>(i), 0.0, 0.0);
    bool exact = r.status == CheckStatus::verified;
    for (const auto& p : r.probes) exact &= p.meta_grad_norm == 0.0;
    quad_ok += exact;
  }
  const auto model = ModelSpec::mlp({1, 6, 1});
  int mlp_ok = 0;
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng trng(s, 404, StreamTag::params);
    Task t = random_regression_task(model, 5, 5, trng);
    t.query = t.support;
    const auto r = lemma1_check(model, t, inner_cfg(0.05), 2, s, 1e-9, 1e-6);
    bool good = r.status == CheckStatus::verified;
    for (const auto& p : r.probes) {
      good &= p.grad_norm < 1e-9 && p.meta_grad_norm < 1e-7;
      worst = std::max(worst, p.meta_grad_norm);
    }
    mlp_ok += good;
  }
  return {quad_ok == 20 && mlp_ok == 10, std::to_string(quad_ok) + "/20 quadratics exact, " + std::to_string(mlp_ok) +
                                             "/10 MLPs verified, max meta-grad norm " + fmt(worst)};
}

Outcome convergence() {
  RunConfig cfg = load_config(std::string(SHARPMAML_SAMPLES) + "/quadratic_convergence.cfg");
  ConvergenceTrace mean;
  std::vector<std::vector<double>> series;
  std::string per_seed;
  bool all_seeds = true;
  for (std::uint64_t s = 0; s < 5; ++s) {
    cfg.seed = s;
    cfg.out_dir = scratch("thm1_" + std::to_string(s)).string();
    const auto res = run_train(cfg);
    const auto d = convergence_diagnostic(res.state.trace);
    per_seed += " [" + fmt(d.final_avg) + ", " + fmt(d.loglog_slope) + "]";
    all_seeds &= d.final_avg < 1e-3 && d.loglog_slope <= -0.4 && !d.slope_undefined;
    series.push_back(res.state.trace.grad_norm_sq);
  }
  for (std::size_t t = 0; t < series[0].size(); ++t) {
    double v = 0.0;
    for (const auto& s : series) v += s[t];
    mean.push(t, v / static_cast<double>(series.size()));
  }
  const auto d = convergence_diagnostic(mean);
  return {d.final_avg < 1e-3 && d.loglog_slope <= -0.4 && !d.slope_undefined,
          "seed-averaged final avg " + fmt(d.final_avg) + ", slope " + fmt(d.loglog_slope) + "; per seed" + per_seed +
              (all_seeds ? " (all seeds pass individually)" : " (not every seed passes alone)")};
}

Outcome sharpness_check() {
  Rng rng(606, 0, StreamTag::params);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const int d = 2 + i % 9;
    const Matrix a = random_spd(d, 0.1, 5.0, rng);
    const ParamVector c = rng.normal_vector(d);
    const double lmax = Eigen::SelfAdjointEigenSolver<Matrix>(a).eigenvalues().maxCoeff();
    const std::vector<double> alphas{0.01, 0.1, 1.0};
    const auto prof = sharpness_profile(ModelSpec::quadratic(d), c, Dataset::quadratic(a, c), alphas, 8,
                                        static_cast<std::uint64_t>(i));
    for (const auto& r : prof) {
      const double expected = 0.5 * lmax * r.alpha * r.alpha;
      worst = std::max(worst, std::abs(r.sharpness - expected) / expected);
    }
  }
  return {worst < 0.02, "max rel deviation from lambda_max alpha^2 / 2: " + fmt(worst)};
}

HP hp_bound(const BoundInputs& b) {
  using boost::multiprecision::log;
  using boost::multiprecision::sqrt;
  const HP N = HP(b.n) * HP(b.M);
  const HP k = HP(b.k);
  const HP inflate = HP(1) + sqrt(log(N) / k);
  const HP inner = k * log(HP(1) + HP(b.theta_norm_sq) / (HP(b.alpha) * HP(b.alpha)) * inflate * inflate) +
                   HP(2) * log(HP(1) / HP(b.delta)) + HP(5) * log(N);
  return HP(b.empirical_term) + HP(b.gamma_A) + sqrt(inner / (HP(4) * N));
}

Outcome pac() {
  Rng rng(707, 0, StreamTag::params);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    BoundInputs b;
    b.k = 1 + static_cast<long>(rng.uniform(0.0, 5000.0));
    b.n = 1 + static_cast<long>(rng.uniform(0.0, 200.0));
    b.M = 2 + static_cast<long>(rng.uniform(0.0, 200.0));
    b.delta = rng.uniform(0.001, 0.5);
    b.alpha = std::exp(rng.uniform(std::log(1e-5), 0.0));
    b.theta_norm_sq = std::exp(rng.uniform(std::log(1e-3), std::log(1e4)));
    b.gamma_A = rng.uniform(0.0, 0.2);
    b.empirical_term = rng.uniform(0.0, 1.0);
    const double oracle = hp_bound(b).convert_to<double>();
    worst = std::max(worst, std::abs(pac_bound(b) - oracle) / oracle);
  }

  // D.1 sweep: sharpness-shaped empirical term L0 + lambda alpha^2 / 2
  // (clipped to 1) on a log grid straddling the threshold
  int sets = 0, smallest_ok = 0, with_qualifying = 0;
  std::size_t qualifying = 0, improved = 0, provable = 0, provable_improved = 0;
  for (int s = 0; s < 50; ++s) {
    Rng r(static_cast<std::uint64_t>(s), 708, StreamTag::params);
    BoundInputs b;
    b.k = 50 + static_cast<long>(r.uniform(0.0, 2000.0));
    b.n = 1 + static_cast<long>(r.uniform(0.0, 20.0));
    b.M = 2 + static_cast<long>(r.uniform(0.0, 10.0));
    b.delta = r.uniform(0.01, 0.2);
    b.theta_norm_sq = r.uniform(0.1, 100.0);
    const double l0 = r.uniform(0.0, 0.5), lam = r.uniform(0.1, 10.0);
    const double thr = sweep_threshold(b);
    std::vector<double> grid;
    for (int i = 0; i < 121; ++i) grid.push_back(thr * 1e-3 * std::pow(1e5, i / 120.0));
    const auto sw = bound_alpha_sweep(b, grid, [&](double a) { return std::min(1.0, l0 + 0.5 * lam * a * a); });
    ++sets;
    if (sw.qualifying > 0) {
      ++with_qualifying;
      smallest_ok += sw.smallest_claim;
    }
    qualifying += sw.qualifying;
    improved += sw.improved;
    provable += sw.provable;
    provable_improved += sw.provable_improved;
  }
  const bool pass = worst < 1e-12 && with_qualifying == sets && smallest_ok == sets && provable_improved == provable;
  return {pass, "max rel err vs 50-digit oracle " + fmt(worst) + "; existence claim at the smallest qualifying alpha " +
                    std::to_string(smallest_ok) + "/" + std::to_string(sets) + " sets; provable radii improved " +
                    std::to_string(provable_improved) + "/" + std::to_string(provable) +
                    "; every grid point below threshold improved " + std::to_string(improved) + "/" +
                    std::to_string(qualifying)};
}

Outcome sinusoid_benefit() {
  const std::string dir = SHARPMAML_SAMPLES;
  const RunConfig maml = load_config(dir + "/sinusoid_maml.cfg");
  const RunConfig both = load_config(dir + "/sinusoid_sharp_both.cfg");
  RunConfig low = both;
  low.variant = Variant::sharp_low;
  low.alpha_up = 0.0;
  int low_wins = 0;
  double gap_maml = 0.0, gap_both = 0.0;
  std::string rows;
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto run = [&](RunConfig c, const std::string& tag) {
      c.seed = s;
      c.out_dir = scratch("sin_" + tag + std::to_string(s)).string();
      return run_train(c).evals.back();
    };
    const EvalRow m = run(maml, "maml"), l = run(low, "low"), b = run(both, "both");
    low_wins += l.post_adapt <= m.post_adapt;
    gap_maml += m.gen_gap / 5.0;
    gap_both += b.gen_gap / 5.0;
    rows += " [" + fmt(m.post_adapt) + " vs " + fmt(l.post_adapt) + "]";
  }
  return {low_wins >= 3 && gap_both <= gap_maml,
          "sharp_low <= maml post-adapt MSE on " + std::to_string(low_wins) + "/5 seeds" + rows +
              "; mean gap sharp_both " + fmt(gap_both) + " vs maml " + fmt(gap_maml)};
}

Outcome landscapes() {
  // quadratic ERM grid against the closed form
  Rng rng(909, 0, StreamTag::params);
  const int d = 4;
  const Matrix a = random_spd(d, 0.2, 2.0, rng);
  const ParamVector c = rng.normal_vector(d), theta = rng.normal_vector(d);
  const auto qm = ModelSpec::quadratic(d);
  Task qt = quadratic_task(a, c);
  const Directions dirs = random_directions(qm, theta, 9);
  const auto g = loss_grid(qm, theta, qt, dirs, 1.0, 21, ObjectiveTag::erm_task_loss);
  double erm_err = 0.0;
  for (std::size_t i = 0; i < g.ys.size(); ++i)
    for (std::size_t j = 0; j < g.xs.size(); ++j) {
      const ParamVector e = theta + g.xs[j] * dirs.d1 + g.ys[i] * dirs.d2 - c;
      const double want = 0.5 * e.dot(a * e);
      erm_err = std::max(erm_err, std::abs(g.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - want) /
                                      std::max(1.0, std::abs(want)));
    }

  // 1-D: MAML grid = (1 - beta a)^2 times the ERM grid
  double scale_err = 0.0;
  for (double av : {0.5, 2.0, 3.0}) {
    const auto m1 = ModelSpec::quadratic(1);
    const Task t1 = scalar_quadratic(av, 0.3);
    const ParamVector th = vec({1.1});
    const Directions d1 = random_directions(m1, th, 3);
    const double beta = 0.2;
    const auto ge = loss_grid(m1, th, t1, d1, 1.0, 11, ObjectiveTag::erm_task_loss, beta);
    const auto gm = loss_grid(m1, th, t1, d1, 1.0, 11, ObjectiveTag::maml_task_loss, beta);
    const double f = (1 - beta * av) * (1 - beta * av);
    for (Eigen::Index k = 0; k < ge.values.size(); ++k)
      scale_err = std::max(scale_err, std::abs(gm.values.data()[k] - f * ge.values.data()[k]) /
                                          std::max(1.0, std::abs(f * ge.values.data()[k])));
  }

  // MLP 51x51 at extent 1.0, timed, at 1 and 4 threads
  TaskFamily fam;
  fam.n_support = 5;
  fam.n_query = 10;
  const auto mm = ModelSpec::mlp({1, 40, 40, 1});
  const ParamVector mt = init_params(mm, 5);
  const Task task = sample_task(fam, 5, heldout_id_base);
  const Directions md = random_directions(mm, mt, 5);
  const auto t0 = Clock::now();
  const auto e1 = loss_grid(mm, mt, task, md, 1.0, 51, ObjectiveTag::erm_task_loss, 0.01);
  const auto m1 = loss_grid(mm, mt, task, md, 1.0, 51, ObjectiveTag::maml_task_loss, 0.01);
  const double secs = seconds_since(t0);
  default_threads() = 4;
  const auto e4 = loss_grid(mm, mt, task, md, 1.0, 51, ObjectiveTag::erm_task_loss, 0.01);
  const auto m4 = loss_grid(mm, mt, task, md, 1.0, 51, ObjectiveTag::maml_task_loss, 0.01);
  default_threads() = 1;
  const bool same = e1.values == e4.values && m1.values == m4.values && e1.diverged == e4.diverged;
  return {erm_err < 1e-12 && scale_err < 1e-12 && secs < 60.0 && same,
          "quadratic closed-form err " + fmt(erm_err) + ", MAML scaling err " + fmt(scale_err) +
              ", two 51x51 MLP grids in " + fmt(secs) + " s, thread-independent: " + (same ? "yes" : "no")};
}

}  // namespace

int main() {
  default_threads() = 1;
  struct Criterion {
    const char* name;
    double limit_s;
    Outcome (*fn)();
  };
  const std::vector<Criterion> criteria{
      {"quadratic meta-gradient oracle", 1.0, quadratic_oracle},
      {"finite-difference meta-gradient", 30.0, finite_differences},
      {"reduction identities", 0.0, reductions},
      {"stationary-point preservation", 120.0, stationary_points},
      {"convergence diagnostic", 300.0, convergence},
      {"sharpness instrument", 10.0, sharpness_check},
      {"PAC bound calculator", 5.0, pac},
      {"sinusoid benefit", 900.0, sinusoid_benefit},
      {"landscape grids", 0.0, landscapes},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    const bool in_time = criteria[i].limit_s <= 0.0 || secs < criteria[i].limit_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " " << (i + 1) << " " << criteria[i].name << " (" << fmt(secs) << " s"
              << (criteria[i].limit_s > 0.0 ? ", limit " + fmt(criteria[i].limit_s) + " s" : "") << "): " << o.detail
              << (in_time ? "" : " [over time limit]") << std::endl;
  }
  return failures == 0 ? 0 : 1;
}

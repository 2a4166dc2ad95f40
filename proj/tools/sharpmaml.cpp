// sharpmaml: command-line front end for training and the measurement tools.

#include "sharpmaml/runner.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

namespace {

enum ExitCode { ok = 0, config_error = 2, divergence = 3, io_error = 4 };

}  // namespace

int main(int argc, char** argv) {
  using namespace sharpmaml;
  CLI::App app{"Sharpness-aware MAML experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  unsigned threads = 1;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "run configuration file");
  app.add_option("--seed", seed, "master seed (overrides the config)");
  app.add_option("--out", out_dir, "output directory (overrides the config)");
  app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--set", overrides, "extra key=value assignment, applied after the config file");

  std::optional<std::string> checkpoint;
  std::optional<std::string> resume;
  auto* train = app.add_subcommand("train", "meta-train and write trace, checkpoints and eval rows");
  train->add_option("--resume", resume, "continue from a checkpoint");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out tasks");
  auto* landscape = app.add_subcommand("landscape", "2-D loss sections around a checkpoint");
  auto* sharp = app.add_subcommand("sharpness", "sharpness over sharpness.alphas");
  auto* bound = app.add_subcommand("bound-sweep", "PAC-Bayes bound over bound.alphas");
  auto* lemma = app.add_subcommand("lemma-check", "stationary-point preservation check");
  for (auto* sub : {eval, landscape, sharp, bound}) sub->add_option("--checkpoint", checkpoint, "parameter checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ok : config_error;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_config_value(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    if (seed) cfg.seed = *seed;
    if (out_dir) cfg.out_dir = *out_dir;
    default_threads() = threads;
    cfg.validate();

    if (*train) {
      const auto res = run_train(cfg, resume);
      std::cout << "trained " << res.state.t << " iterations; final running avg ||grad F||^2 = "
                << format_double(res.state.trace.count ? res.state.trace.sum / static_cast<double>(res.state.trace.count) : 0.0)
                << "\n";
    } else if (*eval) {
      const auto row = run_eval(cfg, checkpoint);
      std::cout << "post_adapt_metric = " << format_double(row.post_adapt) << ", gen_gap = " << format_double(row.gen_gap)
                << "\n";
    } else if (*landscape) {
      const auto grids = run_landscape(cfg, checkpoint);
      std::cout << "wrote " << grids.size() << " grid(s) to " << cfg.out_dir << "\n";
    } else if (*sharp) {
      for (const auto& r : run_sharpness(cfg, checkpoint))
        std::cout << "alpha " << format_double(r.alpha) << ": " << format_double(r.sharpness) << "\n";
    } else if (*bound) {
      const auto sweep = run_bound(cfg, checkpoint);
      std::cout << "argmin alpha = " << format_double(sweep.rows[sweep.argmin].alpha)
                << ", claim holds = " << (sweep.claim_holds ? "yes" : "no") << " (" << sweep.qualifying
                << " qualifying)\n";
    } else if (*lemma) {
      const auto report = run_lemma_check(cfg);
      std::cout << "status: " << to_string(report.status) << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return divergence;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return io_error;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return io_error;
  }
  return ok;
}

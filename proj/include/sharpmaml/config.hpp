#pragma once

// Run configuration: flat dotted `key = value` text, one assignment per
// line, `#` starts a comment. Unknown keys are rejected. Serialization is
// canonical (every key, fixed order, shortest round-trip numbers).

#include "sharpmaml/core.hpp"
#include "sharpmaml/diffcore.hpp"
#include "sharpmaml/landscape.hpp"
#include "sharpmaml/meta.hpp"
#include "sharpmaml/sharp.hpp"
#include "sharpmaml/tasks.hpp"
#include "sharpmaml/theory.hpp"

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

namespace sharpmaml {

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& key) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && s[0] == '+') ++first;
  auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) throw ConfigError("invalid number for " + key + ": '" + s + "'");
  return v;
}

inline long long parse_int(const std::string& s, const std::string& key) {
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError("invalid integer for " + key + ": '" + s + "'");
  return v;
}

inline std::uint64_t parse_seed(const std::string& s, const std::string& key) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError("invalid unsigned integer for " + key + ": '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("invalid boolean for " + key + ": '" + s + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

inline std::vector<double> parse_double_list(const std::string& s, const std::string& key) {
  std::vector<double> out;
  if (trim(s).empty()) return out;
  for (const auto& part : split(s, ',')) out.push_back(parse_double(part, key));
  return out;
}

inline std::string format_double_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s;
}

/// How step sizes relate to the horizon T. `inv_sqrt_t` divides beta_low,
/// beta_up and alpha_up by sqrt(T); alpha_low is left alone.
enum class StepSchedule { constant, inv_sqrt_t };

enum class TrainObjective { meta, erm };

struct RunConfig {
  TaskFamily task;
  std::vector<int> hidden{40, 40};
  Activation activation = Activation::tanh;
  long long head_split = -1;  // -1: output layer only (the ANIL head)
  double init_scale = 1.0;    // quadratic init range

  Variant variant = Variant::maml;
  TrainObjective objective = TrainObjective::meta;
  std::size_t M = 4;
  std::size_t T = 1000;
  int inner_steps = 1;
  double beta_low = 0.01;
  double beta_up = 0.001;
  std::size_t subsample = 0;
  std::size_t diag_tasks = 0;
  StepSchedule schedule = StepSchedule::constant;
  std::size_t checkpoint_every = 0;

  double alpha_low = 0.0;
  double alpha_up = 0.0;
  bool resample_query = false;
  bool esam_enabled = false;
  double xi = 1.0;
  double mu = 1.0;
  bool anil_enabled = false;

  std::uint64_t seed = 0;
  std::string out_dir = "out";
  bool trace_wall_ms = false;

  std::size_t n_test_tasks = 100;
  std::size_t n_train_tasks = 100;
  std::size_t eval_every = 0;

  double landscape_extent = 1.0;
  int landscape_resolution = 51;
  std::string landscape_objective = "both";
  std::size_t task_index = 0;

  std::vector<double> sharpness_alphas{0.0005, 0.005, 0.05};
  int sharpness_budget = 8;

  std::vector<double> bound_alphas{};
  double bound_delta = 0.05;
  double bound_gamma_c = 0.0;
  std::string bound_form = "main";
  long long bound_k = 0;
  long long bound_n = 0;
  long long bound_M = 0;
  double bound_theta_norm_sq = 0.0;
  double bound_empirical_term = 0.0;

  int lemma_probes = 5;
  double lemma_tol_grad = 1e-9;
  double lemma_tol_min = 1e-8;

  bool operator==(const RunConfig&) const = default;

  ModelSpec model() const {
    ModelSpec m = model_for_family(task, hidden, activation);
    if (m.kind == ModelKind::quadratic)
      m.head_split = head_split < 0 ? 0 : static_cast<std::size_t>(head_split);
    else
      m.head_split = head_split < 0 ? m.last_layer_offset() : static_cast<std::size_t>(head_split);
    m.validate();
    return m;
  }

  double schedule_scale() const {
    return schedule == StepSchedule::inv_sqrt_t ? 1.0 / std::sqrt(static_cast<double>(T)) : 1.0;
  }

  InnerConfig inner() const {
    InnerConfig c;
    c.beta_low = beta_low * schedule_scale();
    c.steps = inner_steps;
    c.first_order = variant == Variant::fomaml;
    c.subsample = subsample;
    if (anil_enabled) c.frozen_prefix = model().head_split;
    return c;
  }

  MetaConfig meta() const { return {beta_up * schedule_scale(), M, T}; }

  SharpConfig sharp() const {
    SharpConfig s;
    s.variant = variant;
    s.alpha_low = alpha_low;
    s.alpha_up = alpha_up * schedule_scale();
    s.esam_enabled = esam_enabled;
    s.xi = xi;
    s.mu = mu;
    s.anil_enabled = anil_enabled;
    return s;
  }

  void validate() const {
    task.validate();
    require(T >= 1, "train.T must be at least 1");
    require(M >= 1, "train.M must be at least 1");
    require(inner_steps >= 1, "train.inner_steps must be at least 1");
    require(beta_low >= 0.0, "train.beta_low must be non-negative");
    require(beta_up > 0.0, "train.beta_up must be positive");
    require(landscape_resolution >= 2, "landscape.resolution must be at least 2");
    require(landscape_extent > 0.0, "landscape.extent must be positive");
    require(landscape_objective == "erm" || landscape_objective == "maml" || landscape_objective == "both",
            "landscape.objective must be erm, maml or both");
    require(bound_form == "main" || bound_form == "appendix", "bound.form must be main or appendix");
    require(sharpness_budget >= 1, "sharpness.budget must be at least 1");
    require(n_test_tasks >= 1 && n_train_tasks >= 1, "eval task counts must be at least 1");
    require(lemma_probes >= 1, "lemma.n_probes must be at least 1");
    for (int h : hidden) require(h >= 1, "model.hidden widths must be positive");
    model();
    sharp().validate();
  }
};

namespace detail {

struct ConfigKey {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
ConfigKey size_key(std::string name, T RunConfig::*field) {
  return {name,
          [name, field](RunConfig& c, const std::string& v) {
            const auto x = parse_int(v, name);
            if (x < 0) throw ConfigError(name + " must be non-negative");
            c.*field = static_cast<T>(x);
          },
          [field](const RunConfig& c) { return std::to_string(c.*field); }};
}

template <class T>
ConfigKey int_key(std::string name, T RunConfig::*field) {
  return {name, [name, field](RunConfig& c, const std::string& v) { c.*field = static_cast<T>(parse_int(v, name)); },
          [field](const RunConfig& c) { return std::to_string(c.*field); }};
}

inline ConfigKey real_key(std::string name, double RunConfig::*field) {
  return {name, [name, field](RunConfig& c, const std::string& v) { c.*field = parse_double(v, name); },
          [field](const RunConfig& c) { return format_double(c.*field); }};
}

inline ConfigKey flag_key(std::string name, bool RunConfig::*field) {
  return {name, [name, field](RunConfig& c, const std::string& v) { c.*field = parse_bool(v, name); },
          [field](const RunConfig& c) { return std::string(c.*field ? "true" : "false"); }};
}

inline ConfigKey text_key(std::string name, std::string RunConfig::*field) {
  return {name, [field](RunConfig& c, const std::string& v) { c.*field = v; },
          [field](const RunConfig& c) { return c.*field; }};
}

inline ConfigKey task_real(std::string name, double TaskFamily::*field) {
  return {name, [name, field](RunConfig& c, const std::string& v) { c.task.*field = parse_double(v, name); },
          [field](const RunConfig& c) { return format_double(c.task.*field); }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back({"task.family", [](RunConfig& c, const std::string& v) { c.task.kind = parse_family(v); },
                 [](const RunConfig& c) { return to_string(c.task.kind); }});
    k.push_back({"task.ways", [](RunConfig& c, const std::string& v) { c.task.ways = static_cast<int>(parse_int(v, "task.ways")); },
                 [](const RunConfig& c) { return std::to_string(c.task.ways); }});
    k.push_back({"task.n_support",
                 [](RunConfig& c, const std::string& v) { c.task.n_support = static_cast<std::size_t>(parse_int(v, "task.n_support")); },
                 [](const RunConfig& c) { return std::to_string(c.task.n_support); }});
    k.push_back({"task.n_query",
                 [](RunConfig& c, const std::string& v) { c.task.n_query = static_cast<std::size_t>(parse_int(v, "task.n_query")); },
                 [](const RunConfig& c) { return std::to_string(c.task.n_query); }});
    k.push_back({"task.dim", [](RunConfig& c, const std::string& v) { c.task.dim = static_cast<int>(parse_int(v, "task.dim")); },
                 [](const RunConfig& c) { return std::to_string(c.task.dim); }});
    k.push_back({"task.input_dim",
                 [](RunConfig& c, const std::string& v) { c.task.input_dim = static_cast<int>(parse_int(v, "task.input_dim")); },
                 [](const RunConfig& c) { return std::to_string(c.task.input_dim); }});
    k.push_back({"task.pool",
                 [](RunConfig& c, const std::string& v) {
                   const auto x = parse_int(v, "task.pool");
                   if (x < 0) throw ConfigError("task.pool must be non-negative");
                   c.task.pool = static_cast<std::size_t>(x);
                 },
                 [](const RunConfig& c) { return std::to_string(c.task.pool); }});
    k.push_back(task_real("task.noise", &TaskFamily::blob_noise));
    k.push_back(task_real("task.mean_range", &TaskFamily::mean_range));
    k.push_back(task_real("task.lambda_min", &TaskFamily::lambda_min));
    k.push_back(task_real("task.lambda_max", &TaskFamily::lambda_max));
    k.push_back(task_real("task.amplitude_min", &TaskFamily::amplitude_min));
    k.push_back(task_real("task.amplitude_max", &TaskFamily::amplitude_max));
    k.push_back(task_real("task.phase_min", &TaskFamily::phase_min));
    k.push_back(task_real("task.phase_max", &TaskFamily::phase_max));
    k.push_back(task_real("task.input_min", &TaskFamily::input_min));
    k.push_back(task_real("task.input_max", &TaskFamily::input_max));

    k.push_back({"model.hidden",
                 [](RunConfig& c, const std::string& v) {
                   c.hidden.clear();
                   if (trim(v).empty() || trim(v) == "none") return;
                   for (const auto& p : split(v, ',')) c.hidden.push_back(static_cast<int>(parse_int(p, "model.hidden")));
                 },
                 [](const RunConfig& c) {
                   if (c.hidden.empty()) return std::string("none");
                   std::string s;
                   for (std::size_t i = 0; i < c.hidden.size(); ++i) s += (i ? "," : "") + std::to_string(c.hidden[i]);
                   return s;
                 }});
    k.push_back({"model.activation", [](RunConfig& c, const std::string& v) { c.activation = parse_activation(v); },
                 [](const RunConfig& c) { return to_string(c.activation); }});
    k.push_back({"model.head_split",
                 [](RunConfig& c, const std::string& v) { c.head_split = v == "auto" ? -1 : parse_int(v, "model.head_split"); },
                 [](const RunConfig& c) { return c.head_split < 0 ? std::string("auto") : std::to_string(c.head_split); }});
    k.push_back(real_key("model.init_scale", &RunConfig::init_scale));

    k.push_back({"train.variant", [](RunConfig& c, const std::string& v) { c.variant = parse_variant(v); },
                 [](const RunConfig& c) { return to_string(c.variant); }});
    k.push_back({"train.objective",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "meta") c.objective = TrainObjective::meta;
                   else if (v == "erm") c.objective = TrainObjective::erm;
                   else throw ConfigError("train.objective must be meta or erm");
                 },
                 [](const RunConfig& c) { return std::string(c.objective == TrainObjective::meta ? "meta" : "erm"); }});
    k.push_back(size_key("train.M", &RunConfig::M));
    k.push_back(size_key("train.T", &RunConfig::T));
    k.push_back(int_key("train.inner_steps", &RunConfig::inner_steps));
    k.push_back(real_key("train.beta_low", &RunConfig::beta_low));
    k.push_back(real_key("train.beta_up", &RunConfig::beta_up));
    k.push_back(size_key("train.subsample", &RunConfig::subsample));
    k.push_back(size_key("train.diag_tasks", &RunConfig::diag_tasks));
    k.push_back({"train.schedule",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "constant") c.schedule = StepSchedule::constant;
                   else if (v == "inv_sqrt_t") c.schedule = StepSchedule::inv_sqrt_t;
                   else throw ConfigError("train.schedule must be constant or inv_sqrt_t");
                 },
                 [](const RunConfig& c) { return std::string(c.schedule == StepSchedule::constant ? "constant" : "inv_sqrt_t"); }});
    k.push_back(size_key("train.checkpoint_every", &RunConfig::checkpoint_every));

    k.push_back(real_key("sharp.alpha_low", &RunConfig::alpha_low));
    k.push_back(real_key("sharp.alpha_up", &RunConfig::alpha_up));
    k.push_back(flag_key("sharp.resample_query", &RunConfig::resample_query));
    k.push_back(flag_key("esam.enabled", &RunConfig::esam_enabled));
    k.push_back(real_key("esam.xi", &RunConfig::xi));
    k.push_back(real_key("esam.mu", &RunConfig::mu));
    k.push_back(flag_key("anil.enabled", &RunConfig::anil_enabled));

    k.push_back({"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_seed(v, "seed"); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    k.push_back(text_key("out_dir", &RunConfig::out_dir));
    k.push_back(flag_key("trace.wall_ms", &RunConfig::trace_wall_ms));

    k.push_back(size_key("eval.n_test_tasks", &RunConfig::n_test_tasks));
    k.push_back(size_key("eval.n_train_tasks", &RunConfig::n_train_tasks));
    k.push_back(size_key("eval.eval_every", &RunConfig::eval_every));

    k.push_back(real_key("landscape.extent", &RunConfig::landscape_extent));
    k.push_back(int_key("landscape.resolution", &RunConfig::landscape_resolution));
    k.push_back(text_key("landscape.objective", &RunConfig::landscape_objective));
    k.push_back(size_key("instrument.task_index", &RunConfig::task_index));

    k.push_back({"sharpness.alphas",
                 [](RunConfig& c, const std::string& v) { c.sharpness_alphas = parse_double_list(v, "sharpness.alphas"); },
                 [](const RunConfig& c) { return format_double_list(c.sharpness_alphas); }});
    k.push_back(int_key("sharpness.budget", &RunConfig::sharpness_budget));

    k.push_back({"bound.alphas", [](RunConfig& c, const std::string& v) { c.bound_alphas = parse_double_list(v, "bound.alphas"); },
                 [](const RunConfig& c) { return format_double_list(c.bound_alphas); }});
    k.push_back(real_key("bound.delta", &RunConfig::bound_delta));
    k.push_back(real_key("bound.gamma_c", &RunConfig::bound_gamma_c));
    k.push_back(text_key("bound.form", &RunConfig::bound_form));
    k.push_back(int_key("bound.k", &RunConfig::bound_k));
    k.push_back(int_key("bound.n", &RunConfig::bound_n));
    k.push_back(int_key("bound.M", &RunConfig::bound_M));
    k.push_back(real_key("bound.theta_norm_sq", &RunConfig::bound_theta_norm_sq));
    k.push_back(real_key("bound.empirical_term", &RunConfig::bound_empirical_term));

    k.push_back(int_key("lemma.n_probes", &RunConfig::lemma_probes));
    k.push_back(real_key("lemma.tol_grad", &RunConfig::lemma_tol_grad));
    k.push_back(real_key("lemma.tol_min", &RunConfig::lemma_tol_min));
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Applies one `key = value` assignment.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (seen.count(key))
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "' (first on line " +
                        std::to_string(seen[key]) + ")");
    seen[key] = lineno;
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace sharpmaml

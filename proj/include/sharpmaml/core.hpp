#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace sharpmaml {

/// Flat parameter vector. Gradients, perturbations and directions all live here.
using ParamVector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a loss or gradient turns non-finite. Carries where it happened.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, long step, long task = -1)
      : std::runtime_error(what + " (step " + std::to_string(step) +
                           (task >= 0 ? ", task " + std::to_string(task) : std::string()) + ")"),
        step_(step),
        task_(task) {}

  long step() const { return step_; }
  long task() const { return task_; }

  DivergenceError with_task(long task) const {
    std::string msg = what();
    msg = msg.substr(0, msg.find(" (step "));
    return DivergenceError(msg, step_, task);
  }

 private:
  long step_;
  long task_;
};

inline bool all_finite(const ParamVector& v) { return v.allFinite(); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

inline ParamVector zero_prefix(ParamVector v, std::size_t n) {
  const auto k = std::min<std::size_t>(n, static_cast<std::size_t>(v.size()));
  v.head(static_cast<Eigen::Index>(k)).setZero();
  return v;
}

// ---------------------------------------------------------------------------
// Keyed random streams. A stream is identified by (master_seed, id, tag) and
// never depends on how many draws other streams consumed.

enum class StreamTag : std::uint64_t {
  support = 0x5350,
  query = 0x5152,
  params = 0x5041,
  init = 0x494e,
  swp = 0x5357,
  directions = 0x4449,
  sharpness = 0x5348,
  probes = 0x5052,
  subsample = 0x5342,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t stream_key(std::uint64_t master_seed, std::uint64_t id, StreamTag tag) {
  std::uint64_t h = splitmix64(master_seed);
  h = splitmix64(h ^ id);
  h = splitmix64(h ^ static_cast<std::uint64_t>(tag));
  return h;
}

/// mt19937_64 with hand-rolled conversions, so draws are identical on every
/// standard library (std:: distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t key) : engine_(key) {}
  Rng(std::uint64_t master_seed, std::uint64_t id, StreamTag tag)
      : engine_(stream_key(master_seed, id, tag)) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 2.0 * M_PI * u2;
    spare_ = r * std::sin(phi);
    has_spare_ = true;
    return r * std::cos(phi);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

  ParamVector normal_vector(Eigen::Index n) {
    ParamVector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Index-parallel loop. Each index writes its own slot; callers reduce in
// index order afterwards, so results never depend on the thread count.

inline unsigned& default_threads() {
  static unsigned n = 1;
  return n;
}

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, unsigned threads = default_threads()) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += workers) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  // lowest failing index wins, same as the serial loop
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace sharpmaml

#pragma once

// Seeded few-shot task distributions p(T). Every task is a pure function of
// (master_seed, task_id); support, query and task parameters come from
// independent keyed streams.

#include "sharpmaml/core.hpp"
#include "sharpmaml/diffcore.hpp"

#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

namespace sharpmaml {

enum class FamilyKind { sinusoid, blobs, quadratic };

inline std::string to_string(FamilyKind k) {
  switch (k) {
    case FamilyKind::sinusoid: return "sinusoid";
    case FamilyKind::blobs: return "blobs";
    case FamilyKind::quadratic: return "quadratic";
  }
  return "?";
}

inline FamilyKind parse_family(const std::string& s) {
  if (s == "sinusoid") return FamilyKind::sinusoid;
  if (s == "blobs") return FamilyKind::blobs;
  if (s == "quadratic") return FamilyKind::quadratic;
  throw ConfigError("unknown task family '" + s + "'");
}

struct TaskFamily {
  FamilyKind kind = FamilyKind::sinusoid;
  // sinusoid
  double amplitude_min = 0.1;
  double amplitude_max = 5.0;
  double phase_min = 0.0;
  double phase_max = std::numbers::pi;
  double input_min = -5.0;
  double input_max = 5.0;
  // blobs
  int ways = 5;
  int input_dim = 2;
  double mean_range = 3.0;
  double blob_noise = 1.0;
  // quadratic
  int dim = 1;
  double lambda_min = 0.5;
  double lambda_max = 2.0;
  /// K: support examples (per class for blobs).
  std::size_t n_support = 5;
  /// query examples (per class for blobs).
  std::size_t n_query = 10;
  /// Number of distinct training tasks; 0 means an unbounded stream.
  std::size_t pool = 0;

  bool operator==(const TaskFamily&) const = default;

  void validate() const {
    require(n_support >= 1 && n_query >= 1, "n_support and n_query must be at least 1");
    switch (kind) {
      case FamilyKind::sinusoid:
        require(amplitude_min <= amplitude_max && phase_min <= phase_max && input_min < input_max,
                "invalid sinusoid ranges");
        break;
      case FamilyKind::blobs:
        require(ways >= 2 && input_dim >= 1 && blob_noise >= 0.0 && mean_range > 0.0, "invalid blobs parameters");
        break;
      case FamilyKind::quadratic:
        require(dim >= 1, "quadratic dim must be positive");
        require(lambda_min > 0.0 && lambda_min <= lambda_max, "need 0 < lambda_min <= lambda_max");
        break;
    }
  }

  /// The model shape a task of this family expects at input/output.
  int model_input_dim() const { return kind == FamilyKind::blobs ? input_dim : 1; }
  int model_output_dim() const { return kind == FamilyKind::blobs ? ways : 1; }
};

struct Task {
  Dataset support;
  Dataset query;
  FamilyKind family = FamilyKind::sinusoid;
  std::uint64_t task_id = 0;
  /// Key for any per-task randomness used downstream (inner subsampling).
  std::uint64_t key = 0;
  // generating parameters, for inspection
  double amplitude = 0.0;
  double phase = 0.0;

  bool operator==(const Task& o) const {
    return support == o.support && query == o.query && family == o.family && task_id == o.task_id && key == o.key &&
           amplitude == o.amplitude && phase == o.phase;
  }
};

/// Id ranges reserved for tasks that must never collide with the training
/// stream (task_id = iteration * M + j).
inline constexpr std::uint64_t heldout_id_base = 1ULL << 62;
inline constexpr std::uint64_t diagnostic_id_base = 1ULL << 61;

namespace detail {

/// Haar-distributed orthogonal matrix via QR of a Gaussian matrix.
inline Matrix random_orthogonal(int d, Rng& rng) {
  Matrix g(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < d; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return q;
}

}  // namespace detail

/// `query_draw` > 0 selects an independent query sample of the same task
/// (same parameters and support set).
inline Task sample_task(const TaskFamily& family, std::uint64_t master_seed, std::uint64_t task_id,
                        std::uint64_t query_draw = 0) {
  family.validate();
  Task task;
  task.family = family.kind;
  task.task_id = task_id;
  task.key = stream_key(master_seed, task_id, StreamTag::subsample);

  Rng params(master_seed, task_id, StreamTag::params);
  Rng support(master_seed, task_id, StreamTag::support);
  const std::uint64_t query_key = stream_key(master_seed, task_id, StreamTag::query);
  Rng query(query_draw == 0 ? query_key : splitmix64(query_key ^ splitmix64(query_draw)));

  switch (family.kind) {
    case FamilyKind::sinusoid: {
      task.amplitude = params.uniform(family.amplitude_min, family.amplitude_max);
      task.phase = params.uniform(family.phase_min, family.phase_max);
      auto draw = [&](Rng& rng, std::size_t n) {
        Matrix x(static_cast<Eigen::Index>(n), 1), y(static_cast<Eigen::Index>(n), 1);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
          x(i, 0) = rng.uniform(family.input_min, family.input_max);
          y(i, 0) = task.amplitude * std::sin(x(i, 0) + task.phase);
        }
        return Dataset::regression(std::move(x), std::move(y));
      };
      task.support = draw(support, family.n_support);
      task.query = draw(query, family.n_query);
      break;
    }
    case FamilyKind::blobs: {
      Matrix means(family.ways, family.input_dim);
      for (int c = 0; c < family.ways; ++c)
        for (int j = 0; j < family.input_dim; ++j) means(c, j) = params.uniform(-family.mean_range, family.mean_range);
      auto draw = [&](Rng& rng, std::size_t per_class) {
        const auto n = per_class * static_cast<std::size_t>(family.ways);
        Matrix x(static_cast<Eigen::Index>(n), family.input_dim);
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
          const int c = static_cast<int>(i % static_cast<std::size_t>(family.ways));
          labels[i] = c;
          for (int j = 0; j < family.input_dim; ++j)
            x(static_cast<Eigen::Index>(i), j) = means(c, j) + family.blob_noise * rng.normal();
        }
        return Dataset::classification(std::move(x), std::move(labels));
      };
      task.support = draw(support, family.n_support);
      task.query = draw(query, family.n_query);
      break;
    }
    case FamilyKind::quadratic: {
      const int d = family.dim;
      const Matrix q = detail::random_orthogonal(d, params);
      ParamVector lambda(d);
      for (int i = 0; i < d; ++i) lambda[i] = params.uniform(family.lambda_min, family.lambda_max);
      Matrix a = q.transpose() * lambda.asDiagonal() * q;
      a = 0.5 * (a + a.transpose()).eval();
      ParamVector c(d);
      for (int i = 0; i < d; ++i) c[i] = params.uniform(-1.0, 1.0);
      task.support = Dataset::quadratic(a, c);
      task.query = task.support;
      break;
    }
  }
  return task;
}

/// Id of the i-th task of the training stream (cycles through the pool when
/// the family has one).
inline std::uint64_t training_task_id(const TaskFamily& family, std::uint64_t i) {
  return family.pool > 0 ? i % family.pool : i;
}

/// Tasks iteration*M .. iteration*M + M-1, in order.
inline std::vector<Task> sample_task_batch(const TaskFamily& family, std::uint64_t master_seed,
                                           std::uint64_t iteration, std::size_t M) {
  require(M >= 1, "task batch size must be at least 1");
  std::vector<Task> out;
  out.reserve(M);
  for (std::size_t j = 0; j < M; ++j)
    out.push_back(sample_task(family, master_seed, training_task_id(family, iteration * M + j)));
  return out;
}

inline std::vector<Task> sample_heldout_tasks(const TaskFamily& family, std::uint64_t master_seed, std::size_t n) {
  std::vector<Task> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_task(family, master_seed, heldout_id_base + i));
  return out;
}

/// Model matching the family's input/output shape.
inline ModelSpec model_for_family(const TaskFamily& family, const std::vector<int>& hidden, Activation act) {
  if (family.kind == FamilyKind::quadratic) return ModelSpec::quadratic(family.dim);
  std::vector<int> widths{family.model_input_dim()};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(family.model_output_dim());
  return ModelSpec::mlp(std::move(widths), act);
}

}  // namespace sharpmaml

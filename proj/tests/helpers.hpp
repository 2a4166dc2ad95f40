#pragma once

#include "sharpmaml/meta.hpp"
#include "sharpmaml/tasks.hpp"

#include <cmath>

namespace testing_support {

using namespace sharpmaml;

inline double rel_err(const ParamVector& a, const ParamVector& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-300});
  return (a - b).norm() / scale;
}

inline ParamVector vec(std::initializer_list<double> v) {
  ParamVector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

inline Task quadratic_task(const Matrix& a, const ParamVector& c) {
  Task t;
  t.family = FamilyKind::quadratic;
  t.support = Dataset::quadratic(a, c);
  t.query = t.support;
  return t;
}

inline Task scalar_quadratic(double a, double c) {
  Matrix A(1, 1);
  A << a;
  return quadratic_task(A, vec({c}));
}

/// Random SPD matrix with eigenvalues uniform on [lo, hi].
inline Matrix random_spd(int d, double lo, double hi, Rng& rng) {
  const Matrix q = detail::random_orthogonal(d, rng);
  ParamVector lambda(d);
  for (int i = 0; i < d; ++i) lambda[i] = rng.uniform(lo, hi);
  Matrix a = q.transpose() * lambda.asDiagonal() * q;
  return 0.5 * (a + a.transpose());
}

/// Regression task with random inputs/targets for an MLP of the given widths.
inline Task random_regression_task(const ModelSpec& model, std::size_t n_support, std::size_t n_query, Rng& rng) {
  auto draw = [&](std::size_t n) {
    Matrix x(static_cast<Eigen::Index>(n), model.input_dim());
    Matrix y(static_cast<Eigen::Index>(n), model.output_dim());
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-2.0, 2.0);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = rng.uniform(-1.0, 1.0);
    return Dataset::regression(x, y);
  };
  Task t;
  t.support = draw(n_support);
  t.query = draw(n_query);
  return t;
}

/// Central differences of theta -> L(theta_K(theta); query) with the plan's
/// offsets held fixed.
inline ParamVector fd_meta_gradient(const ModelSpec& model, const ParamVector& theta, const Task& task,
                                    const InnerConfig& cfg, const InnerPlan& plan, double h) {
  InnerConfig exact = cfg;
  exact.first_order = false;
  auto f = [&](const ParamVector& p) {
    return loss(model, inner_adapt(model, p, task, exact, plan).points.back(), task.query);
  };
  ParamVector out(theta.size());
  ParamVector probe = theta;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + h;
    const double up = f(probe);
    probe[i] = theta[i] - h;
    const double down = f(probe);
    probe[i] = theta[i];
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

}  // namespace testing_support

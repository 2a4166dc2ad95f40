#include "helpers.hpp"

#include "sharpmaml/landscape.hpp"

#include <gtest/gtest.h>

using namespace sharpmaml;
using namespace testing_support;

namespace {

Directions axis_directions() { return {vec({1.0}), vec({0.0}), 0}; }

}  // namespace

TEST(RandomDirections, GroupNormsMatchAndOrthogonal) {
  const auto model = ModelSpec::mlp({2, 5, 3});
  Rng rng(1, 0, StreamTag::params);
  const ParamVector theta = rng.normal_vector(static_cast<Eigen::Index>(model.dim()));
  const Directions d = random_directions(model, theta, 4);
  for (const auto& g : model.groups()) {
    const auto o = static_cast<Eigen::Index>(g.offset), n = static_cast<Eigen::Index>(g.size);
    EXPECT_NEAR(d.d1.segment(o, n).norm(), theta.segment(o, n).norm(), 1e-12);
  }
  EXPECT_LE(std::abs(d.d1.dot(d.d2)), 1e-10 * d.d1.norm() * d.d2.norm());
  EXPECT_EQ(d.zero_groups, 0u);
}

TEST(RandomDirections, ZeroLayerGivesZeroDirection) {
  const auto model = ModelSpec::mlp({2, 5, 1});
  Rng rng(2, 0, StreamTag::params);
  ParamVector theta = rng.normal_vector(static_cast<Eigen::Index>(model.dim()));
  const auto first = static_cast<Eigen::Index>(model.layer_offset(1));
  theta.head(first).setZero();
  const Directions d = random_directions(model, theta, 4);
  EXPECT_TRUE(d.d1.head(first).isZero(0.0));
  EXPECT_TRUE(d.d2.head(first).isZero(0.0));
  EXPECT_EQ(d.zero_groups, 6u);
}

TEST(RandomDirections, Deterministic) {
  const auto model = ModelSpec::mlp({1, 4, 1});
  const ParamVector theta = init_params(model, 3);
  const auto a = random_directions(model, theta, 8), b = random_directions(model, theta, 8);
  EXPECT_EQ(a.d1, b.d1);
  EXPECT_EQ(a.d2, b.d2);
  EXPECT_FALSE(a.d1 == random_directions(model, theta, 9).d1);
}

TEST(GridCoordinates, SymmetricWithExactZero) {
  const auto xs = grid_coordinates(1.0, 51);
  EXPECT_EQ(xs.front(), -1.0);
  EXPECT_EQ(xs.back(), 1.0);
  EXPECT_EQ(xs[25], 0.0);
  EXPECT_THROW(grid_coordinates(1.0, 1), ConfigError);
}

TEST(LossGrid, QuadraticErmIsParabola) {
  const double a = 2.0, c = 0.3, theta = 0.7;
  const auto m = ModelSpec::quadratic(1);
  const auto grid = loss_grid(m, vec({theta}), scalar_quadratic(a, c), axis_directions(), 1.0, 21,
                              ObjectiveTag::erm_task_loss);
  for (std::size_t j = 0; j < grid.xs.size(); ++j) {
    const double r = theta + grid.xs[j] - c;
    for (std::size_t i = 0; i < grid.ys.size(); ++i)
      EXPECT_NEAR(grid.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), 0.5 * a * r * r, 1e-12);
  }
}

TEST(LossGrid, QuadraticMamlIsScaledErm) {
  const double a = 2.0, c = -0.2, beta = 0.1;
  const auto m = ModelSpec::quadratic(1);
  const Task t = scalar_quadratic(a, c);
  const auto erm = loss_grid(m, vec({0.5}), t, axis_directions(), 1.0, 21, ObjectiveTag::erm_task_loss, beta);
  const auto maml = loss_grid(m, vec({0.5}), t, axis_directions(), 1.0, 21, ObjectiveTag::maml_task_loss, beta);
  const double factor = (1 - beta * a) * (1 - beta * a);
  for (Eigen::Index i = 0; i < erm.values.size(); ++i)
    EXPECT_NEAR(maml.values.data()[i], factor * erm.values.data()[i], 1e-12);
}

TEST(LossGrid, CenterCellAndDivergenceSentinel) {
  const auto model = ModelSpec::mlp({1, 5, 1});
  TaskFamily f;
  const Task t = sample_task(f, 0, 0);
  const ParamVector theta = init_params(model, 0);
  const auto dirs = random_directions(model, theta, 1);
  const auto erm = loss_grid(model, theta, t, dirs, 1.0, 5, ObjectiveTag::erm_task_loss, 0.01);
  const auto maml = loss_grid(model, theta, t, dirs, 1.0, 5, ObjectiveTag::maml_task_loss, 0.01);
  EXPECT_EQ(erm.values(2, 2), loss(model, theta, t.support));
  EXPECT_EQ(maml.values(2, 2), task_objective(model, theta, t, ObjectiveTag::maml_task_loss, 0.01));

  const auto q = ModelSpec::quadratic(1);
  const auto blow = loss_grid(q, vec({1e300}), scalar_quadratic(1e300, 0.0), axis_directions(), 1.0, 3,
                              ObjectiveTag::erm_task_loss);
  EXPECT_EQ(blow.values(0, 0), std::numeric_limits<double>::max());
  EXPECT_EQ(blow.diverged[0][0], 1);
}

TEST(LossGrid, MamlGridFlatAtErmStationaryPoint) {
  const auto m = ModelSpec::quadratic(2);
  Rng rng(5, 0, StreamTag::params);
  const Matrix a = random_spd(2, 0.5, 2.0, rng);
  const ParamVector c = rng.normal_vector(2);
  const Task t = quadratic_task(a, c);
  Directions dirs{vec({1.0, 0.0}), vec({0.0, 1.0}), 0};
  const auto g = loss_grid(m, c, t, dirs, 1e-3, 3, ObjectiveTag::maml_task_loss, 0.2);
  const double h = 1e-3;
  EXPECT_NEAR((g.values(1, 2) - g.values(1, 0)) / (2 * h), 0.0, 1e-12);
  EXPECT_NEAR((g.values(2, 1) - g.values(0, 1)) / (2 * h), 0.0, 1e-12);
}

TEST(LossGrid, DeterministicAcrossThreads) {
  const auto model = ModelSpec::mlp({1, 8, 1});
  TaskFamily f;
  const Task t = sample_task(f, 3, 1);
  const ParamVector theta = init_params(model, 3);
  const auto dirs = random_directions(model, theta, 2);
  default_threads() = 1;
  const auto a = loss_grid(model, theta, t, dirs, 1.0, 11, ObjectiveTag::maml_task_loss, 0.01);
  default_threads() = 3;
  const auto b = loss_grid(model, theta, t, dirs, 1.0, 11, ObjectiveTag::maml_task_loss, 0.01);
  default_threads() = 1;
  EXPECT_EQ(a.values, b.values);
}

TEST(Sharpness, ScalarQuadraticAtMinimum) {
  Rng rng(1, 0, StreamTag::sharpness);
  const auto r = sharpness(ModelSpec::quadratic(1), vec({0.0}), scalar_quadratic(2.0, 0.0).support, 0.1, 4, rng);
  EXPECT_NEAR(r.sharpness, 0.01, 1e-15);
  EXPECT_NEAR(r.argmax_norm, 0.1, 1e-15);
}

TEST(Sharpness, AlignsWithTopEigendirection) {
  Matrix a(2, 2);
  a << 2, 0, 0, 10;
  Rng rng(2, 0, StreamTag::sharpness);
  const auto r = sharpness(ModelSpec::quadratic(2), vec({0.0, 0.0}), quadratic_task(a, vec({0, 0})).support, 0.1, 8, rng);
  EXPECT_NEAR(r.sharpness, 0.05, 0.05 * 0.02);
}

TEST(Sharpness, VanishesWithRadius) {
  const auto model = ModelSpec::mlp({1, 6, 1});
  TaskFamily f;
  const Task t = sample_task(f, 1, 1);
  const ParamVector theta = init_params(model, 1);
  Rng rng(3, 0, StreamTag::sharpness);
  const double small = sharpness(model, theta, t.support, 1e-8, 2, rng).sharpness;
  EXPECT_GE(small, 0.0);
  EXPECT_LT(small, 1e-6);
}

TEST(Sharpness, ProfileIsMonotone) {
  const auto model = ModelSpec::mlp({1, 10, 1});
  TaskFamily f;
  const Task t = sample_task(f, 2, 2);
  const ParamVector theta = init_params(model, 2);
  std::vector<double> alphas;
  for (int i = 0; i < 12; ++i) alphas.push_back(1e-4 * std::pow(2.0, i));
  const auto prof = sharpness_profile(model, theta, t.support, alphas, 3, 5);
  for (std::size_t i = 1; i < prof.size(); ++i) EXPECT_GE(prof[i].sharpness, prof[i - 1].sharpness);
  for (const auto& r : prof) EXPECT_LE(r.argmax_norm, r.alpha * (1 + 1e-12));
}

TEST(Sharpness, RandomSpdIsCloseLowerBound) {
  Rng rng(4, 0, StreamTag::params);
  for (int trial = 0; trial < 10; ++trial) {
    const int d = 2 + trial % 5;
    const Matrix a = random_spd(d, 0.5, 5.0, rng);
    const ParamVector c = rng.normal_vector(d);
    const double lmax = Eigen::SelfAdjointEigenSolver<Matrix>(a).eigenvalues().maxCoeff();
    Rng srng(static_cast<std::uint64_t>(trial), 0, StreamTag::sharpness);
    const double alpha = 0.05;
    const auto r = sharpness(ModelSpec::quadratic(d), c, quadratic_task(a, c).support, alpha, 8, srng);
    const double exact = 0.5 * lmax * alpha * alpha;
    // 20 short steps cannot resolve close top eigenvalues, so only a loose
    // lower bound is guaranteed here
    EXPECT_LE(r.sharpness, exact * (1 + 1e-12));
    EXPECT_GE(r.sharpness, 0.85 * exact);
  }
}

TEST(GeneralizationGap, SameStreamGivesZero) {
  const auto model = ModelSpec::mlp({1, 5, 1});
  TaskFamily f;
  InnerConfig inner;
  const auto r = generalization_gap(model, init_params(model, 0), f, inner, 10, 10, 0, TestStream::training_stream);
  EXPECT_EQ(r.gap, 0.0);
}

TEST(GeneralizationGap, ConstantModelHasNoGap) {
  // all-zero weights and beta = 0: the prediction is 0 for every input
  const auto model = ModelSpec::mlp({1, 5, 1});
  TaskFamily f;
  InnerConfig inner;
  inner.beta_low = 0.0;
  const auto r = generalization_gap(model, ParamVector::Zero(static_cast<Eigen::Index>(model.dim())), f, inner, 2000,
                                    2000, 1);
  // E[a^2 sin^2] = E[a^2] / 2 ~ 4.2; the gap is Monte-Carlo noise only
  EXPECT_LT(std::abs(r.gap), 0.1 * r.train_metric);
}

TEST(GeneralizationGap, QuadraticMatchesClosedFormExpectation) {
  TaskFamily f;
  f.kind = FamilyKind::quadratic;
  f.dim = 1;
  f.lambda_min = 0.5;
  f.lambda_max = 2.0;
  InnerConfig inner;
  inner.beta_low = 0.2;
  const auto model = ModelSpec::quadratic(1);
  const std::size_t n = 100000;
  const auto tasks = sample_heldout_tasks(f, 7, n);
  const ParamVector theta = vec({0.0});  // mean of the centers
  double sum = 0.0, sum_sq = 0.0;
  for (const auto& t : tasks) {
    const double v = task_metric(model, inner_adapt(model, theta, t, inner).points.back(), t.query);
    sum += v;
    sum_sq += v * v;
  }
  const double mean = sum / n;
  const double sd = std::sqrt(sum_sq / n - mean * mean);
  // E[0.5 c^2 lambda (1 - beta lambda)^2] with c ~ U[-1, 1], lambda ~ U[lo, hi]
  const double b = inner.beta_low, lo = f.lambda_min, hi = f.lambda_max;
  auto prim = [&](double l) { return l * l / 2 - 2 * b * l * l * l / 3 + b * b * l * l * l * l / 4; };
  const double expected = 0.5 * (1.0 / 3.0) * (prim(hi) - prim(lo)) / (hi - lo);
  EXPECT_NEAR(mean, expected, 4 * sd / std::sqrt(static_cast<double>(n)));
  const auto gap = generalization_gap(model, theta, f, inner, 1000, 1000, 7);
  EXPECT_NEAR(gap.test_metric, expected, 4 * sd / std::sqrt(1000.0));
}

TEST(TaskMetric, ErrorRateForClassification) {
  const auto model = ModelSpec::mlp({1, 2}, Activation::identity);
  Matrix x(4, 1);
  x << -1, -2, 1, 2;
  const Dataset d = Dataset::classification(x, {0, 0, 1, 0});
  // logit_0 = -x, logit_1 = x: predicts 0 for negative inputs
  EXPECT_DOUBLE_EQ(task_metric(model, vec({-1.0, 1.0, 0.0, 0.0}), d), 0.25);
}

// Library walk-through on a one-dimensional quadratic task, where every
// quantity has a closed form: L(theta) = a/2 (theta - c)^2.

#include "sharpmaml/meta.hpp"
#include "sharpmaml/sharp.hpp"

#include <cstdio>

int main() {
  using namespace sharpmaml;
  const double a = 2.0, c = 0.0, beta = 0.1;
  Matrix A(1, 1);
  A << a;
  ParamVector center(1);
  center << c;

  Task task;
  task.family = FamilyKind::quadratic;
  task.support = Dataset::quadratic(A, center);
  task.query = task.support;
  const ModelSpec model = ModelSpec::quadratic(1);
  ParamVector theta(1);
  theta << 1.0;

  InnerConfig inner;
  inner.beta_low = beta;
  const MetaGradient g = meta_gradient(model, theta, task, inner);
  std::printf("meta-gradient %.12g (closed form a(1-beta a)^2 theta = %.12g)\n", g.g[0],
              a * (1 - beta * a) * (1 - beta * a) * 1.0);

  // Lower-level SAM: the inner gradient is taken at theta + eps_m.
  InnerPlan plan;
  plan.grad_offset = lower_perturbation(model, theta, task, 0.1).eps;
  const MetaGradient gs = meta_gradient(model, theta, task, inner, plan);
  std::printf("sharp_low meta-gradient %.12g (hand-chained 1.248)\n", gs.g[0]);

  MetaConfig meta{0.1, 1, 1};
  TrainState state{theta, 0, {}};
  const StepResult r = maml_meta_step(model, state, {task}, inner, meta);
  std::printf("theta after one MAML step %.12g (expected 0.872)\n", r.state.theta[0]);
  return 0;
}

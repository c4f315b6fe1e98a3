#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "softabs/lbfgs.hpp"

using namespace softabs;

namespace {

double rosenbrock(const VectorXd& x, VectorXd& g) {
  double f = 0.0;
  g.setZero();
  for (int i = 0; i + 1 < x.size(); ++i) {
    const double a = x[i + 1] - x[i] * x[i], b = 1.0 - x[i];
    f += 100.0 * a * a + b * b;
    g[i] += -400.0 * x[i] * a - 2.0 * b;
    g[i + 1] += 200.0 * a;
  }
  return f;
}

}  // namespace

TEST(Lbfgs, Rosenbrock) {
  for (int d : {2, 10}) {
    VectorXd x0 = VectorXd::Constant(d, -1.2);
    x0[d - 1] = 1.0;
    const auto res = lbfgs_minimize(rosenbrock, x0);
    EXPECT_TRUE(res.converged) << res.message;
    EXPECT_LE(res.gradient.lpNorm<Eigen::Infinity>(), 1e-6);
    EXPECT_LE((res.x - VectorXd::Ones(d)).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(Lbfgs, IllConditionedQuadratic) {
  const int d = 50;
  const VectorXd diag = VectorXd::LinSpaced(d, 0.0, 4.0).unaryExpr([](double t) { return std::pow(10.0, t); });
  const VectorXd b = VectorXd::LinSpaced(d, -1.0, 1.0);
  auto f = [&](const VectorXd& x, VectorXd& g) {
    g = diag.cwiseProduct(x) - b;
    return 0.5 * x.dot(diag.cwiseProduct(x)) - b.dot(x);
  };
  const auto res = lbfgs_minimize(f, VectorXd::Zero(d));
  EXPECT_TRUE(res.converged);
  EXPECT_LE((res.x - b.cwiseQuotient(diag)).cwiseAbs().maxCoeff(), 1e-6);
}

// Conditional on the hyperparameters the logistic posterior is log-concave.
TEST(Lbfgs, ConditionalLogisticPosteriorMode) {
  auto sim = simulate_logistic(1, 500, 8.0, 1);
  auto model = logistic_model(1, 30);
  model.pinned = {1.0, 1.0, 1.0};
  Posterior post(model, sim.data);
  ASSERT_EQ(post.dim(), 31);
  auto f = [&](const VectorXd& q, VectorXd& g) {
    const auto s = post.prepare(q);
    g = post.gradient(s);
    return post.neg_log_density(s);
  };
  const auto res = lbfgs_minimize(f, post.initial_position());
  EXPECT_TRUE(res.converged) << res.message;
  EXPECT_LE(post.gradient(post.prepare(res.x)).lpNorm<Eigen::Infinity>(), 1e-6);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(post.hessian(post.prepare(res.x)));
  EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
}

TEST(Lbfgs, DomainErrorsShortenTheStep) {
  // minimum at x = 1; undefined for x <= 0
  auto f = [](const VectorXd& x, VectorXd& g) {
    if (x[0] <= 0.0) throw DomainError("x must be positive");
    g.resize(1);
    g[0] = 1.0 - 1.0 / x[0];
    return x[0] - std::log(x[0]);
  };
  VectorXd x0(1);
  x0[0] = 8.0;
  const auto res = lbfgs_minimize(f, x0);
  EXPECT_TRUE(res.converged);
  EXPECT_NEAR(res.x[0], 1.0, 1e-6);
}

TEST(Lbfgs, InvalidInputs) {
  LbfgsOptions bad;
  bad.c2 = 1e-5;
  EXPECT_THROW(lbfgs_minimize(rosenbrock, VectorXd::Zero(2), bad), std::invalid_argument);
  auto nan = [](const VectorXd&, VectorXd& g) {
    g = VectorXd::Zero(1);
    return std::nan("");
  };
  EXPECT_THROW(lbfgs_minimize(nan, VectorXd::Zero(1)), std::runtime_error);
}

#pragma once

#include <cmath>
#include <random>

#include "softabs/posterior.hpp"
#include "softabs/rrgp_model.hpp"

namespace fixtures {

using namespace softabs;

inline Posterior logistic_posterior(int dims, int features, int samples, std::uint64_t seed,
                                    HyperTransform transform = HyperTransform::log) {
  auto sim = simulate_logistic(dims, samples, 8.0, seed);
  auto model = logistic_model(dims, features);
  model.transform = transform;
  return Posterior(model, sim.data);
}

/// Heteroscedastic data: one continuous and one binary covariate.
inline Dataset meanvar_data(int samples, std::uint64_t seed) { return simulate_heteroscedastic(samples, seed); }

inline Posterior meanvar_posterior(int features, int samples, std::uint64_t seed,
                                   HyperTransform transform = HyperTransform::log) {
  auto ds = meanvar_data(samples, seed);
  auto model = regression_model(RegressionKind::nonlinear_meanvar, ds, features);
  model.transform = transform;
  model.delta = 0.05;
  return Posterior(model, ds);
}

/// Coefficients ~ N(0, scale^2); transformed hyperparameters ~ N(0, 0.5^2)
/// (or 1 + U(-0.5, 0.5) under the identity transform).
inline VectorXd random_position(const Posterior& post, std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(-0.5, 0.5);
  VectorXd q(post.dim());
  for (auto& v : q) v = scale * normal(rng);
  for (int h : post.layout().hyper_index) {
    if (h < 0) continue;
    q[h] = post.model().transform == HyperTransform::log ? 0.5 * normal(rng) : 1.0 + unif(rng);
  }
  return q;
}

inline MatrixXd random_symmetric(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd W(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) W(i, j) = normal(rng);
  return 0.5 * (W + W.transpose());
}

inline double rel_err(const VectorXd& a, const VectorXd& b) { return (a - b).norm() / b.norm(); }
inline double rel_err(const MatrixXd& a, const MatrixXd& b) { return (a - b).norm() / b.norm(); }

/// Central differences with one Richardson step.
template <class R, class F>
R richardson(F&& f, double h) {
  const R coarse = (f(h) - f(-h)) / (2.0 * h);
  const R fine = (f(h / 2) - f(-h / 2)) / h;
  return (4.0 * fine - coarse) / 3.0;
}

inline VectorXd fd_gradient(const Posterior& post, const VectorXd& q, double h = 1e-4) {
  VectorXd g(q.size());
  for (int i = 0; i < q.size(); ++i)
    g[i] = richardson<double>(
        [&](double dh) {
          VectorXd x = q;
          x[i] += dh;
          return post.neg_log_density(post.prepare(x));
        },
        h);
  return g;
}

inline MatrixXd fd_hessian(const Posterior& post, const VectorXd& q, double h = 1e-4) {
  MatrixXd H(q.size(), q.size());
  for (int i = 0; i < q.size(); ++i)
    H.col(i) = richardson<VectorXd>(
        [&](double dh) {
          VectorXd x = q;
          x[i] += dh;
          return VectorXd(post.gradient(post.prepare(x)));
        },
        h);
  return H;
}

}  // namespace fixtures

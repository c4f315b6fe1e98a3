#pragma once

// Limited-memory BFGS with a strong-Wolfe line search.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "softabs/errors.hpp"

namespace softabs {

using Eigen::VectorXd;

struct LbfgsOptions {
  int memory = 10;
  double gtol = 1e-6;  // on the max-norm of the gradient
  int max_iters = 5000;
  double c1 = 1e-4;
  double c2 = 0.9;
  int max_linesearch = 40;
};

struct LbfgsResult {
  VectorXd x;
  double value = 0.0;
  VectorXd gradient;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string message;
};

namespace detail {

struct LinePoint {
  double alpha = 0.0;
  double value = 0.0;
  double slope = 0.0;
  VectorXd grad;
  bool finite = true;
};

/// Minimiser of the cubic through (a, fa, da), (b, fb, db), kept inside
/// the middle 80% of the bracket; bisection when the cubic is unusable.
inline double cubic_step(const LinePoint& a, const LinePoint& b) {
  const double lo = std::min(a.alpha, b.alpha), hi = std::max(a.alpha, b.alpha);
  double t = 0.5 * (lo + hi);
  if (a.finite && b.finite) {
    const double d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.alpha - b.alpha);
    const double disc = d1 * d1 - a.slope * b.slope;
    if (disc >= 0.0) {
      const double d2 = std::copysign(std::sqrt(disc), b.alpha - a.alpha);
      const double c = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
      if (std::isfinite(c)) t = c;
    }
  }
  const double margin = 0.1 * (hi - lo);
  return std::clamp(t, lo + margin, hi - margin);
}

}  // namespace detail

/// Minimises f, where f(x, grad) returns the value and fills grad. A
/// DomainError from f is treated as an infinite value during line searches.
template <class F>
LbfgsResult lbfgs_minimize(F&& f, VectorXd x0, const LbfgsOptions& opt = {}) {
  if (opt.memory < 1 || !(opt.gtol > 0.0) || !(0.0 < opt.c1 && opt.c1 < opt.c2 && opt.c2 < 1.0))
    throw std::invalid_argument("invalid L-BFGS options");
  LbfgsResult res;
  const auto n = x0.size();
  res.x = std::move(x0);
  res.gradient.resize(n);
  res.value = f(res.x, res.gradient);
  res.evaluations = 1;
  if (!std::isfinite(res.value) || !res.gradient.allFinite())
    throw std::runtime_error("L-BFGS: non-finite objective at the starting point");

  std::deque<VectorXd> S, Y;
  std::deque<double> rho;

  auto evaluate = [&](const VectorXd& dir, double alpha) {
    detail::LinePoint p;
    p.alpha = alpha;
    p.grad.resize(n);
    try {
      p.value = f(VectorXd(res.x + alpha * dir), p.grad);
      p.finite = std::isfinite(p.value) && p.grad.allFinite();
    } catch (const DomainError&) {
      p.finite = false;
    }
    if (!p.finite) p.value = std::numeric_limits<double>::infinity();
    p.slope = p.finite ? p.grad.dot(dir) : std::numeric_limits<double>::quiet_NaN();
    ++res.evaluations;
    return p;
  };

  bool restarted = false;
  for (res.iterations = 0; res.iterations < opt.max_iters; ++res.iterations) {
    if (res.gradient.lpNorm<Eigen::Infinity>() <= opt.gtol) {
      res.converged = true;
      res.message = "gradient tolerance reached";
      return res;
    }

    // two-loop recursion
    VectorXd dir = -res.gradient;
    std::vector<double> a(S.size());
    for (int i = static_cast<int>(S.size()) - 1; i >= 0; --i) {
      a[i] = rho[i] * S[i].dot(dir);
      dir -= a[i] * Y[i];
    }
    if (!S.empty()) dir *= S.back().dot(Y.back()) / Y.back().squaredNorm();
    for (std::size_t i = 0; i < S.size(); ++i) {
      const double b = rho[i] * Y[i].dot(dir);
      dir += (a[i] - b) * S[i];
    }
    double slope0 = res.gradient.dot(dir);
    if (!(slope0 < 0.0)) {
      S.clear(), Y.clear(), rho.clear();
      dir = -res.gradient;
      slope0 = -res.gradient.squaredNorm();
    }

    detail::LinePoint zero;
    zero.value = res.value;
    zero.slope = slope0;
    zero.grad = res.gradient;
    double alpha = S.empty() ? std::min(1.0, 1.0 / dir.lpNorm<Eigen::Infinity>()) : 1.0;

    std::optional<detail::LinePoint> accepted;
    detail::LinePoint prev = zero;
    // approximate Wolfe (Hager-Zhang) once decreases fall below rounding of f
    const double noise = 1e-10 * std::max(1.0, std::abs(res.value));
    auto sufficient = [&](const detail::LinePoint& p) {
      if (!p.finite) return false;
      if (p.value <= res.value + opt.c1 * p.alpha * slope0) return true;
      return p.value <= res.value + noise && p.slope <= (2.0 * opt.c1 - 1.0) * slope0;
    };
    auto curvature = [&](const detail::LinePoint& p) { return std::abs(p.slope) <= -opt.c2 * slope0; };
    auto zoom = [&](detail::LinePoint lo, detail::LinePoint hi, int budget) -> std::optional<detail::LinePoint> {
      for (int k = 0; k < budget; ++k) {
        const double t = hi.finite ? detail::cubic_step(lo, hi) : 0.5 * (lo.alpha + hi.alpha);
        auto p = evaluate(dir, t);
        if (!sufficient(p) || p.value > lo.value + (lo.alpha > 0.0 ? 0.0 : noise)) {
          hi = std::move(p);
        } else {
          if (curvature(p)) return p;
          if (p.slope * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
          lo = std::move(p);
        }
        if (std::abs(hi.alpha - lo.alpha) <= 1e-16 * std::max(1.0, lo.alpha)) break;
      }
      // accept the best sufficient-decrease point when the bracket collapses
      if (lo.alpha > 0.0) return lo;
      return std::nullopt;
    };

    for (int k = 0; k < opt.max_linesearch && !accepted; ++k) {
      auto p = evaluate(dir, alpha);
      if (!sufficient(p) || (k > 0 && p.value > prev.value)) {
        accepted = zoom(prev, p, opt.max_linesearch);
        break;
      }
      if (curvature(p)) {
        accepted = std::move(p);
        break;
      }
      if (p.slope >= 0.0) {
        accepted = zoom(p, prev, opt.max_linesearch);
        break;
      }
      prev = std::move(p);
      alpha *= 2.0;
    }

    if (!accepted) {
      if (restarted || S.empty()) {
        res.message = "line search failed";
        return res;
      }
      S.clear(), Y.clear(), rho.clear();
      restarted = true;
      continue;
    }
    restarted = false;

    VectorXd s = accepted->alpha * dir;
    VectorXd y = accepted->grad - res.gradient;
    res.x += s;
    res.value = accepted->value;
    res.gradient = std::move(accepted->grad);
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      S.push_back(std::move(s));
      Y.push_back(std::move(y));
      rho.push_back(1.0 / sy);
      if (static_cast<int>(S.size()) > opt.memory) {
        S.pop_front();
        Y.pop_front();
        rho.pop_front();
      }
    }
  }
  res.converged = res.gradient.lpNorm<Eigen::Infinity>() <= opt.gtol;
  res.message = res.converged ? "gradient tolerance reached" : "iteration limit reached";
  return res;
}

}  // namespace softabs

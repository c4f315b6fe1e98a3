#pragma once

// Bayesian model evidence: thermodynamic integration over a temperature
// ladder with independent RMHMC chains, its variance estimate, the Laplace
// approximation and the conditional-Laplace hyperparameter-grid oracle.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <istream>
#include <limits>
#include <span>
#include <sstream>
#include <iterator>
#include <memory>
#include <mutex>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "softabs/errors.hpp"
#include "softabs/lbfgs.hpp"
#include "softabs/posterior.hpp"
#include "softabs/rrgp_model.hpp"
#include "softabs/sampler.hpp"

namespace softabs {

struct TemperLadder {
  std::vector<double> tau;  // tau[0] = 1 > ... > tau.back() = 0

  int size() const { return static_cast<int>(tau.size()); }

  void validate() const {
    if (tau.size() < 2) throw std::invalid_argument("temperature ladder needs at least two rungs");
    if (tau.front() != 1.0 || tau.back() != 0.0)
      throw std::invalid_argument("temperature ladder must start at 1 and end at 0");
    for (std::size_t s = 1; s < tau.size(); ++s)
      if (!(tau[s] < tau[s - 1])) throw std::invalid_argument("temperature ladder must be strictly decreasing");
  }
};

/// 101 rungs: steps of 0.02 down to 0.2, 0.005 down to 0.05, 0.002 down to
/// 0.01, then 0.001 down to 0. Built from integer thousandths so every rung
/// is the correctly rounded decimal.
inline TemperLadder default_ladder() {
  TemperLadder l;
  for (int s = 1; s <= 101; ++s) {
    int milli;
    if (s <= 41)
      milli = 1000 - 20 * (s - 1);
    else if (s <= 71)
      milli = 200 - 5 * (s - 41);
    else if (s <= 91)
      milli = 50 - 2 * (s - 71);
    else
      milli = 10 - (s - 91);
    l.tau.push_back(milli / 1000.0);
  }
  return l;
}

/// Whitespace- or comma-separated tau values.
inline TemperLadder read_ladder(std::istream& in) {
  TemperLadder l;
  std::string token;
  while (in >> token) {
    std::replace(token.begin(), token.end(), ',', ' ');
    std::istringstream parts(token);
    std::string part;
    while (parts >> part) {
      std::size_t used = 0;
      double v;
      try {
        v = std::stod(part, &used);
      } catch (const std::exception&) {
        throw std::invalid_argument("ladder: cannot parse '" + part + "'");
      }
      if (used != part.size()) throw std::invalid_argument("ladder: cannot parse '" + part + "'");
      l.tau.push_back(v);
    }
  }
  l.validate();
  return l;
}

/// Var[BME] ~ sum_s 1/4 Var_s {(tau_s - tau_{s-1})^2 + (tau_{s+1} - tau_s)^2},
/// with the missing neighbour dropped at either end.
inline double ti_variance(const std::vector<double>& rung_variance, const TemperLadder& ladder) {
  if (static_cast<int>(rung_variance.size()) != ladder.size())
    throw std::invalid_argument("one variance per rung required");
  double total = 0.0;
  const int S = ladder.size();
  for (int s = 0; s < S; ++s) {
    double w = 0.0;
    if (s > 0) w += std::pow(ladder.tau[s] - ladder.tau[s - 1], 2);
    if (s + 1 < S) w += std::pow(ladder.tau[s + 1] - ladder.tau[s], 2);
    total += 0.25 * rung_variance[s] * w;
  }
  return total;
}

/// Integral over tau in [0, 1] of the rung values by the trapezoid rule.
inline double trapezoid(const std::vector<double>& values, const TemperLadder& ladder) {
  double total = 0.0;
  for (int s = 1; s < ladder.size(); ++s)
    total += 0.5 * (values[s] + values[s - 1]) * (ladder.tau[s - 1] - ladder.tau[s]);
  return total;
}

/// A target whose likelihood can be tempered.
template <class T>
concept TemperedTarget = Target<T> && std::copy_constructible<T> &&
                         requires(T& t, const T& ct, const typename T::State& s, double tau) {
                           t.set_temperature(tau);
                           { ct.log_likelihood(s) } -> std::convertible_to<double>;
                         };

struct TiConfig {
  ChainConfig chain;  // step size, leapfrogs and metric settings for every run
  int moves_per_rung = 12;
  int chains = 5;
  int warmup_block = 200;
  int warmup_max_blocks = 20;
  int prerun_moves = 500;
  int prerun_leapfrogs = 400;
  bool rung_average = false;  // average each rung's draws instead of its endpoint
  int threads = 1;

  void validate() const {
    if (moves_per_rung < 1 || chains < 1 || warmup_block < 10 || warmup_max_blocks < 0 || prerun_moves < 0 ||
        prerun_leapfrogs < 1 || threads < 1)
      throw std::invalid_argument("invalid thermodynamic-integration settings");
  }
};

struct ChainIntegral {
  double integral = 0.0;
  std::vector<double> rung_loglik;
  std::vector<double> rung_variance;
  int divergences = 0;
  bool failed = false;
  std::string error;
};

struct EvidenceEstimate {
  double bme_mean = 0.0;
  double bme_stderr = 0.0;
  std::vector<double> per_chain;
  std::vector<double> ladder;
  std::vector<double> rung_means;
  double ti_variance = 0.0;
  std::vector<std::string> warnings;
  VectorXd shared_start;
  std::vector<ChainIntegral> chains;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Runs job(i) for i in [0, n) on up to `threads` workers.
template <class Job>
void parallel_for(int n, int threads, Job&& job) {
  const int workers = std::max(1, std::min(threads, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::jthread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) job(i);
    });
}

}  // namespace detail

/// Single chain at tau = 1 run in blocks until the split-half rank-sum test
/// on the second half of the history passes (p > 0.05).
template <TemperedTarget T>
VectorXd warm_up(const T& target, const VectorXd& q0, const TiConfig& cfg, std::vector<std::string>& warnings) {
  T chain_target = target;
  chain_target.set_temperature(1.0);
  ChainConfig cc = cfg.chain;
  cc.moves = cfg.warmup_block;
  cc.burnin = 0;
  VectorXd q = q0;
  std::vector<double> history;
  for (int block = 0; block < cfg.warmup_max_blocks; ++block) {
    cc.seed = detail::mix_seed(cfg.chain.seed, 1000 + block);
    const auto res = run_chain(chain_target, q, cc);
    q = res.final_q;
    for (const auto& r : res.records) history.push_back(r.logpost);
    if (block == 0) continue;
    const std::span<const double> tail(history.data() + history.size() / 2, history.size() - history.size() / 2);
    if (wilcoxon_split_half(tail).p_value > 0.05) return q;
  }
  if (cfg.warmup_max_blocks > 0) warnings.push_back("warm-up chain did not pass the split-half rank-sum test");
  return q;
}

/// One chain: pre-run at tau = 1, then A moves per rung walking the ladder
/// downward from the previous rung's endpoint.
template <TemperedTarget T>
ChainIntegral ladder_chain(const T& target, const VectorXd& start, const TemperLadder& ladder, const TiConfig& cfg,
                           int chain_id) {
  ChainIntegral out;
  T t = target;
  const std::uint64_t base = detail::mix_seed(cfg.chain.seed, 7919 + chain_id);
  try {
    VectorXd q = start;
    if (cfg.prerun_moves > 0) {
      t.set_temperature(1.0);
      ChainConfig pre = cfg.chain;
      pre.moves = cfg.prerun_moves;
      pre.burnin = 0;
      pre.leapfrogs = cfg.prerun_leapfrogs;
      pre.seed = detail::mix_seed(base, 0);
      q = run_chain(t, q, pre).final_q;
    }
    ChainConfig rung = cfg.chain;
    rung.moves = cfg.moves_per_rung;
    rung.burnin = 0;
    rung.record_q = true;
    for (int s = 0; s < ladder.size(); ++s) {
      t.set_temperature(ladder.tau[s]);
      rung.seed = detail::mix_seed(base, 1 + s);
      const auto res = run_chain(t, q, rung);
      if (res.divergences() == rung.moves)
        throw DivergenceError("every move diverged at rung " + std::to_string(s + 1));
      out.divergences += res.divergences();
      std::vector<double> ll;
      ll.reserve(res.records.size());
      for (const auto& r : res.records) ll.push_back(t.log_likelihood(t.prepare(*r.q)));
      const double mean = std::accumulate(ll.begin(), ll.end(), 0.0) / static_cast<double>(ll.size());
      double var = 0.0;
      for (double v : ll) var += (v - mean) * (v - mean);
      var = ll.size() > 1 ? var / static_cast<double>(ll.size() - 1) : 0.0;
      out.rung_loglik.push_back(cfg.rung_average ? mean : ll.back());
      out.rung_variance.push_back(var);
      q = res.final_q;
    }
    out.integral = trapezoid(out.rung_loglik, ladder);
  } catch (const std::exception& e) {
    out.failed = true;
    out.error = e.what();
  }
  return out;
}

/// Log evidence as the integral over tau of E_tau[ln P(X | a)]. Failed
/// chains are excluded with a warning; all chains failing is an error.
template <TemperedTarget T>
EvidenceEstimate thermo_integrate(const T& target, const VectorXd& q0, const TemperLadder& ladder,
                                  const TiConfig& cfg) {
  ladder.validate();
  cfg.validate();
  cfg.chain.validate();
  EvidenceEstimate est;
  est.ladder = ladder.tau;
  est.shared_start = warm_up(target, q0, cfg, est.warnings);

  est.chains.resize(static_cast<std::size_t>(cfg.chains));
  detail::parallel_for(cfg.chains, cfg.threads, [&](int z) {
    est.chains[static_cast<std::size_t>(z)] = ladder_chain(target, est.shared_start, ladder, cfg, z);
  });

  std::vector<const ChainIntegral*> ok;
  for (int z = 0; z < cfg.chains; ++z) {
    const auto& c = est.chains[static_cast<std::size_t>(z)];
    if (c.failed) {
      est.warnings.push_back("chain " + std::to_string(z) + " excluded: " + c.error);
      continue;
    }
    if (c.divergences > 0)
      est.warnings.push_back("chain " + std::to_string(z) + " had " + std::to_string(c.divergences) +
                             " divergent moves");
    ok.push_back(&c);
  }
  if (ok.empty()) throw std::runtime_error("thermodynamic integration: every chain failed");

  const double n = static_cast<double>(ok.size());
  for (const auto* c : ok) est.per_chain.push_back(c->integral);
  est.bme_mean = std::accumulate(est.per_chain.begin(), est.per_chain.end(), 0.0) / n;
  if (ok.size() > 1) {
    double ss = 0.0;
    for (double v : est.per_chain) ss += (v - est.bme_mean) * (v - est.bme_mean);
    est.bme_stderr = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  } else {
    est.warnings.push_back("a single surviving chain gives no standard error");
  }
  est.rung_means.assign(ladder.tau.size(), 0.0);
  std::vector<double> rung_var(ladder.tau.size(), 0.0);
  for (const auto* c : ok)
    for (std::size_t s = 0; s < ladder.tau.size(); ++s) {
      est.rung_means[s] += c->rung_loglik[s] / n;
      rung_var[s] += c->rung_variance[s] / n;
    }
  est.ti_variance = ti_variance(rung_var, ladder);
  return est;
}

struct LaplaceResult {
  double log_evidence = 0.0;
  VectorXd mode;
  double neg_log_density = 0.0;
  double log_det_hessian = 0.0;
  LbfgsResult optimizer;
};

/// ln[P(q*) (2 pi)^{d/2} |H(q*)|^{-1/2}] at the mode q* of the target. The
/// search runs in z = (q - q0) / D with D = diag(H(q0))^{-1/2}.
template <Target T>
LaplaceResult laplace_full(const T& target, const VectorXd& q0, const LbfgsOptions& opt = {}) {
  VectorXd D = VectorXd::Ones(q0.size());
  try {
    const VectorXd h = target.hessian(target.prepare(q0)).diagonal();
    for (Eigen::Index i = 0; i < h.size(); ++i)
      if (std::isfinite(h[i]) && h[i] > 0.0) D[i] = 1.0 / std::sqrt(h[i]);
  } catch (const std::exception&) {
  }
  auto f = [&](const VectorXd& z, VectorXd& g) {
    const auto s = target.prepare(VectorXd(q0 + D.cwiseProduct(z)));
    g = D.cwiseProduct(target.gradient(s));
    return static_cast<double>(target.neg_log_density(s));
  };
  LaplaceResult out;
  out.optimizer = lbfgs_minimize(f, VectorXd::Zero(q0.size()), opt);
  if (!out.optimizer.converged)
    throw std::runtime_error("Laplace invalid (no mode found: " + out.optimizer.message + ")");
  out.mode = q0 + D.cwiseProduct(out.optimizer.x);
  const auto s = target.prepare(out.mode);
  out.neg_log_density = target.neg_log_density(s);
  const MatrixXd Hz = D.asDiagonal() * target.hessian(s) * D.asDiagonal();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(Hz, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success || !(es.eigenvalues().minCoeff() > 0.0))
    throw std::runtime_error("Laplace invalid (singular/indefinite posterior)");
  out.log_det_hessian = es.eigenvalues().array().log().sum() - 2.0 * D.array().log().sum();
  const double d = static_cast<double>(out.mode.size());
  out.log_evidence = -out.neg_log_density + 0.5 * d * std::log(2.0 * std::numbers::pi) - 0.5 * out.log_det_hessian;
  return out;
}

/// Exact log evidence of a Gaussian-likelihood model whose hyperparameters
/// are all pinned: y ~ N(0, v I + Phi Lambda Phi^T).
inline double conjugate_log_evidence(const ModelSpec& model, const Dataset& data) {
  if (model.likelihood != Likelihood::gaussian)
    throw std::invalid_argument("closed-form evidence needs the gaussian likelihood");
  for (const auto& p : model.pinned)
    if (!p) throw std::invalid_argument("closed-form evidence needs every hyperparameter pinned");
  model.validate();
  const auto cache = FeatureCache::build(model, data);
  const MatrixXd& Phi = cache.design[0];
  VectorXd prior(Phi.cols());
  int col = 0;
  for (const auto& k : model.functions[0]) {
    for (int m = 1; m <= k.features; ++m, ++col) {
      if (k.kind == KernelKind::gaussian_1d)
        prior[col] = *model.pinned[0] * spectral_variance(m, *model.pinned[1], k.half_width);
      else
        prior[col] = *model.pinned[2];
    }
  }
  prior[col] = model.intercept_variance;
  const auto N = Phi.rows();
  MatrixXd C = Phi * prior.asDiagonal() * Phi.transpose();
  C.diagonal().array() += model.noise_variance;
  Eigen::LLT<MatrixXd> llt(C);
  if (llt.info() != Eigen::Success) throw std::runtime_error("marginal covariance not positive definite");
  const VectorXd alpha = llt.solve(data.y);
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * (static_cast<double>(N) * std::log(2.0 * std::numbers::pi) + logdet + data.y.dot(alpha));
}

struct GridSpec {
  double c_lo = 0.0, c_hi = 4.0, c_step = 0.01;
  double sigma_lo = 0.0, sigma_hi = 4.0, sigma_step = 0.02;

  int c_nodes() const { return static_cast<int>(std::lround((c_hi - c_lo) / c_step)); }
  int sigma_nodes() const { return static_cast<int>(std::lround((sigma_hi - sigma_lo) / sigma_step)); }
  double c_at(int i) const { return c_lo + (i + 0.5) * c_step; }
  double sigma_at(int k) const { return sigma_lo + (k + 0.5) * sigma_step; }

  void validate() const {
    if (!(c_step > 0.0) || !(sigma_step > 0.0) || !(c_lo >= 0.0) || !(sigma_lo >= 0.0) || c_nodes() < 1 ||
        sigma_nodes() < 1)
      throw std::invalid_argument("invalid hyperparameter grid");
  }
};

struct GridResult {
  double log_evidence = 0.0;
  int nodes = 0;
  int skipped = 0;
  std::vector<std::string> warnings;
};

/// ln of max_a P(X|a) G_theta(a) (2 pi)^{d/2} |H_aa|^{-1/2} for a posterior
/// whose hyperparameters are all pinned. `warm` is used as the starting
/// point and overwritten with the mode.
inline double conditional_laplace(const Posterior& post, VectorXd& warm, const LbfgsOptions& opt = {}) {
  const auto res = laplace_full(post, warm, opt);
  warm = res.mode;
  return res.log_evidence;
}

inline double inv_gamma_log_pdf(double x, const InvGammaPrior& p) {
  return p.shape * std::log(p.scale) - std::lgamma(p.shape) - (p.shape + 1.0) * std::log(x) - p.scale / x;
}

/// Evidence integrated over (c_gauss, sigma_gauss) on a midpoint grid in
/// linear hyperparameter space, with the conditional Laplace value at each
/// node. The coefficients are optimised in serpentine order so every node
/// starts from its neighbour's mode.
inline GridResult laplace_grid_oracle(const ModelSpec& model, const Dataset& data, const GridSpec& grid,
                                      int threads = 1, const LbfgsOptions& opt = {}) {
  grid.validate();
  model.validate();
  bool has_gaussian = false, has_linear = false;
  for (const auto& f : model.functions)
    for (const auto& k : f) (k.kind == KernelKind::gaussian_1d ? has_gaussian : has_linear) = true;
  if (!has_gaussian) throw std::invalid_argument("grid oracle needs a Gaussian kernel");
  if (has_linear && !model.pinned[static_cast<int>(Hyper::c_linear)])
    throw std::invalid_argument("grid oracle covers (c_gauss, sigma_gauss) only; pin the linear-kernel hyperparameter");

  auto shared = std::make_shared<const Dataset>(data);
  auto features = std::make_shared<const FeatureCache>(FeatureCache::build(model, data));
  const int nc = grid.c_nodes(), ns = grid.sigma_nodes();
  const double log_area = std::log(grid.c_step * grid.sigma_step);
  const auto& prior_c = model.prior(Hyper::c_gauss);
  const auto& prior_s = model.prior(Hyper::sigma_gauss);

  std::vector<double> values(static_cast<std::size_t>(nc) * ns, -std::numeric_limits<double>::infinity());
  std::vector<char> failed(values.size(), 0);
  const int workers = std::max(1, std::min(threads, nc));
  detail::parallel_for(workers, workers, [&](int w) {
    const int begin = nc * w / workers, end = nc * (w + 1) / workers;
    ModelSpec m = model;
    m.pinned[static_cast<int>(Hyper::c_gauss)] = 1.0;
    m.pinned[static_cast<int>(Hyper::sigma_gauss)] = 1.0;
    VectorXd warm = Posterior(m, shared, features).initial_position();
    const VectorXd cold = warm;
    for (int i = begin; i < end; ++i) {
      for (int kk = 0; kk < ns; ++kk) {
        const int k = ((i - begin) % 2 == 0) ? kk : ns - 1 - kk;
        const double c = grid.c_at(i), sigma = grid.sigma_at(k);
        m.pinned[static_cast<int>(Hyper::c_gauss)] = c;
        m.pinned[static_cast<int>(Hyper::sigma_gauss)] = sigma;
        const std::size_t idx = static_cast<std::size_t>(i) * ns + k;
        try {
          const Posterior post(m, shared, features);
          values[idx] = conditional_laplace(post, warm, opt) + inv_gamma_log_pdf(c, prior_c) +
                        inv_gamma_log_pdf(sigma, prior_s) + log_area;
        } catch (const std::exception&) {
          failed[idx] = 1;
          warm = cold;
        }
      }
    }
  });

  GridResult out;
  out.nodes = nc * ns;
  out.skipped = static_cast<int>(std::count(failed.begin(), failed.end(), 1));
  if (out.skipped > 0)
    out.warnings.push_back(std::to_string(out.skipped) + " of " + std::to_string(out.nodes) +
                           " grid nodes skipped (inner optimisation failed)");
  if (out.skipped > out.nodes / 100) throw std::runtime_error("grid oracle: more than 1% of nodes failed");
  const double top = *std::max_element(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values)
    if (std::isfinite(v)) sum += std::exp(v - top);
  out.log_evidence = top + std::log(sum);
  return out;
}

}  // namespace softabs

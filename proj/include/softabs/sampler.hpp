#pragma once

// Riemannian-manifold HMC with the soft-absolute Hessian metric: Hamiltonian,
// implicit generalized leapfrog, Metropolis correction and the chain loop,
// plus a Euclidean-metric HMC baseline and the split-half rank-sum check.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "softabs/errors.hpp"
#include "softabs/softabs_metric.hpp"

namespace softabs {

/// A density exposed through -ln P and its first three derivatives, the
/// third only as contractions tr(W dH/dq_i).
template <class T>
concept Target = requires(const T& t, const VectorXd& q, const typename T::State& s, const MatrixXd& W) {
  { t.dim() } -> std::convertible_to<int>;
  { t.prepare(q) } -> std::same_as<typename T::State>;
  { t.neg_log_density(s) } -> std::convertible_to<double>;
  { t.gradient(s) } -> std::convertible_to<VectorXd>;
  { t.hessian(s) } -> std::convertible_to<MatrixXd>;
  { t.trace_contraction(s, W) } -> std::convertible_to<VectorXd>;
};

enum class MetricKind { softabs_dynamic, softabs_static, euclidean };

struct ChainConfig {
  double step_size = 0.001;
  int leapfrogs = 100;
  int moves = 9600;
  int burnin = 2400;
  double kappa = 1.0;
  double zeta = 1e-13;
  int fp_max_iters = 6;
  double fp_tol = 1e-10;
  int gs_interval = 10;
  int max_sweeps = 30;
  std::uint64_t seed = 1;
  MetricKind metric = MetricKind::softabs_dynamic;
  bool record_q = false;

  void validate() const {
    if (!(moves >= burnin && burnin >= 0)) throw std::invalid_argument("need moves >= burnin >= 0");
    if (!(step_size > 0.0) || !(kappa > 0.0) || !(zeta > 0.0) || !(fp_tol > 0.0))
      throw std::invalid_argument("step size, kappa, zeta and fixed-point tolerance must be > 0");
    if (leapfrogs < 1) throw std::invalid_argument("need at least one leapfrog per move");
    if (fp_max_iters < 1 || gs_interval < 1 || max_sweeps < 1)
      throw std::invalid_argument("iteration caps must be >= 1");
  }
};

/// Position with everything the integrator reuses while q stays fixed.
template <Target T>
struct PhasePoint {
  VectorXd q;
  typename T::State state;
  double neg_log_density = 0.0;
  VectorXd gradient;
  MetricState metric;  // unused for the Euclidean metric
  MatrixXd t_matrix;
  std::optional<VectorXd> w2_trace;
};

/// Evaluates the target at q and builds the metric: warm-started from `warm`
/// when given and the kind is softabs_dynamic, cold-start Jacobi otherwise.
template <Target T>
PhasePoint<T> make_point(const T& target, VectorXd q, const ChainConfig& cfg,
                         const MetricState* warm = nullptr) {
  PhasePoint<T> pt;
  pt.state = target.prepare(q);
  pt.q = std::move(q);
  pt.neg_log_density = target.neg_log_density(pt.state);
  pt.gradient = target.gradient(pt.state);
  if (!std::isfinite(pt.neg_log_density) || !pt.gradient.allFinite())
    throw DivergenceError("non-finite density or gradient");
  if (cfg.metric == MetricKind::euclidean) return pt;
  const MatrixXd H = target.hessian(pt.state);
  if (!H.allFinite()) throw DivergenceError("non-finite Hessian");
  Eigensystem eig = (warm != nullptr && cfg.metric == MetricKind::softabs_dynamic)
                        ? dynamic_eigendecompose(H, *warm, cfg.zeta, cfg.gs_interval, cfg.max_sweeps)
                        : static_eigendecompose(H, cfg.zeta, cfg.max_sweeps);
  pt.metric = make_metric(std::move(eig), cfg.kappa);
  pt.t_matrix = t_matrix(pt.metric.eigenvalues, cfg.kappa);
  return pt;
}

/// -ln P(q) + 1/2 ln((2 pi)^d |G|) + 1/2 p^T G^{-1} p.
inline double hamiltonian(double neg_log_density, const MetricState& metric, const VectorXd& p) {
  const double d = static_cast<double>(p.size());
  return neg_log_density + 0.5 * (d * std::log(2.0 * std::numbers::pi) + metric.log_det) +
         0.5 * p.dot(metric_apply_inverse(metric, p));
}

template <Target T>
double hamiltonian(const PhasePoint<T>& pt, const VectorXd& p, MetricKind kind) {
  if (kind == MetricKind::euclidean) return pt.neg_log_density + 0.5 * p.squaredNorm();
  return hamiltonian(pt.neg_log_density, pt.metric, p);
}

/// dH/dq = -d ln P/dq + 1/2 tr(G^{-1} dG/dq) - 1/2 p^T G^{-1} (dG/dq) G^{-1} p,
/// with both metric terms evaluated as tr(W dH/dq).
template <Target T>
VectorXd grad_q_hamiltonian(const T& target, PhasePoint<T>& pt, const VectorXd& p) {
  if (!pt.w2_trace) pt.w2_trace = target.trace_contraction(pt.state, metric_w2(pt.metric, pt.t_matrix));
  const VectorXd w1_trace = target.trace_contraction(pt.state, metric_w1(pt.metric, pt.t_matrix, p));
  return pt.gradient + 0.5 * (*pt.w2_trace) - 0.5 * w1_trace;
}

struct LeapfrogDiagnostics {
  std::vector<int> sweeps;
  int momentum_iterations = 0;
  int position_iterations = 0;
};

template <Target T>
struct LeapfrogResult {
  PhasePoint<T> point;
  VectorXd p;
  LeapfrogDiagnostics diagnostics;
};

/// One generalized leapfrog step. Both implicit updates are solved by
/// fixed-point iteration started from the explicit value; failure to reach
/// fp_tol within fp_max_iters raises DivergenceError.
template <Target T>
LeapfrogResult<T> leapfrog_step(const T& target, PhasePoint<T> start, const VectorXd& p,
                                const ChainConfig& cfg) {
  const double eps = cfg.step_size;
  const double half = 0.5 * eps;
  LeapfrogResult<T> out;

  VectorXd p_half = p - half * grad_q_hamiltonian(target, start, p);
  bool converged = false;
  for (int it = 1; it <= cfg.fp_max_iters; ++it) {
    VectorXd next = p - half * grad_q_hamiltonian(target, start, p_half);
    if (!next.allFinite()) throw DivergenceError("non-finite momentum");
    const double delta = (next - p_half).cwiseAbs().maxCoeff();
    p_half = std::move(next);
    out.diagnostics.momentum_iterations = it;
    if (delta <= cfg.fp_tol) {
      converged = true;
      break;
    }
  }
  if (!converged) throw DivergenceError("momentum fixed point did not converge");

  const VectorXd v0 = metric_apply_inverse(start.metric, p_half);
  VectorXd q_new = start.q + eps * v0;
  MetricState warm = start.metric;
  converged = false;
  for (int it = 1; it <= cfg.fp_max_iters; ++it) {
    PhasePoint<T> trial = make_point(target, q_new, cfg, &warm);
    out.diagnostics.sweeps.push_back(trial.metric.sweep_count);
    VectorXd next = start.q + half * (v0 + metric_apply_inverse(trial.metric, p_half));
    if (!next.allFinite()) throw DivergenceError("non-finite position");
    const double delta = (next - q_new).cwiseAbs().maxCoeff();
    q_new = std::move(next);
    warm = std::move(trial.metric);
    out.diagnostics.position_iterations = it;
    if (delta <= cfg.fp_tol) {
      converged = true;
      break;
    }
  }
  if (!converged) throw DivergenceError("position fixed point did not converge");

  out.point = make_point(target, std::move(q_new), cfg, &warm);
  out.diagnostics.sweeps.push_back(out.point.metric.sweep_count);
  out.p = p_half - half * grad_q_hamiltonian(target, out.point, p_half);
  if (!out.p.allFinite()) throw DivergenceError("non-finite momentum");
  return out;
}

/// Stormer-Verlet step for the identity metric.
template <Target T>
LeapfrogResult<T> euclidean_leapfrog_step(const T& target, const PhasePoint<T>& start,
                                          const VectorXd& p, const ChainConfig& cfg) {
  const double eps = cfg.step_size;
  LeapfrogResult<T> out;
  const VectorXd p_half = p - 0.5 * eps * start.gradient;
  out.point = make_point(target, VectorXd(start.q + eps * p_half), cfg);
  out.p = p_half - 0.5 * eps * out.point.gradient;
  if (!out.p.allFinite()) throw DivergenceError("non-finite momentum");
  return out;
}

struct MoveRecord {
  int move = 0;
  double logpost = 0.0;
  double h_before = 0.0;
  double h_after = 0.0;
  bool accept = false;
  bool divergent = false;
  double sweeps_mean = 0.0;
  double wall_ms = 0.0;
  double log_uniform = 0.0;
  std::optional<VectorXd> q;
};

struct ChainResult {
  std::vector<MoveRecord> records;
  VectorXd final_q;
  MetricState final_metric;

  double acceptance_rate() const {
    if (records.empty()) return 0.0;
    const auto n = std::count_if(records.begin(), records.end(), [](const auto& r) { return r.accept; });
    return static_cast<double>(n) / static_cast<double>(records.size());
  }
  int divergences() const {
    return static_cast<int>(
        std::count_if(records.begin(), records.end(), [](const auto& r) { return r.divergent; }));
  }
  /// Log-posterior values after `burnin` moves.
  std::vector<double> logpost(int burnin = 0) const {
    std::vector<double> out;
    for (std::size_t i = static_cast<std::size_t>(std::max(burnin, 0)); i < records.size(); ++i)
      out.push_back(records[i].logpost);
    return out;
  }
};

using MoveSink = std::function<void(const MoveRecord&)>;

/// Metropolis-corrected HMC chain: momentum refreshed from N(0, G(q)) every
/// move, `leapfrogs` steps per move, proposal accepted with probability
/// min(1, exp(H_old - H_new)). A rejected or divergent move keeps q and
/// rebuilds the metric there from a cold start.
template <Target T>
ChainResult run_chain(const T& target, const VectorXd& q0, const ChainConfig& cfg,
                      const MoveSink& sink = {}) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const bool euclid = cfg.metric == MetricKind::euclidean;

  PhasePoint<T> current;
  try {
    current = make_point(target, q0, cfg);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("cannot start chain at the initial position: ") + e.what());
  }

  ChainResult result;
  result.records.reserve(static_cast<std::size_t>(cfg.moves));
  for (int move = 0; move < cfg.moves; ++move) {
    const auto t0 = std::chrono::steady_clock::now();
    MoveRecord rec;
    rec.move = move;

    VectorXd p;
    if (euclid) {
      p.resize(target.dim());
      for (auto& x : p) x = normal(rng);
    } else {
      p = sample_momentum(current.metric, rng);
    }
    rec.h_before = hamiltonian(current, p, cfg.metric);

    std::optional<PhasePoint<T>> proposal;
    long sweep_total = 0, sweep_calls = 0;
    try {
      PhasePoint<T> pt = current;
      VectorXd mom = p;
      for (int c = 0; c < cfg.leapfrogs; ++c) {
        auto step = euclid ? euclidean_leapfrog_step(target, pt, mom, cfg)
                           : leapfrog_step(target, std::move(pt), mom, cfg);
        for (int s : step.diagnostics.sweeps) {
          sweep_total += s;
          ++sweep_calls;
        }
        pt = std::move(step.point);
        mom = std::move(step.p);
      }
      rec.h_after = hamiltonian(pt, mom, cfg.metric);
      if (!std::isfinite(rec.h_after)) throw DivergenceError("non-finite Hamiltonian");
      proposal = std::move(pt);
    } catch (const DivergenceError&) {
      rec.divergent = true;
    } catch (const DomainError&) {
      rec.divergent = true;
    } catch (const ConvergenceError&) {
      rec.divergent = true;
    }
    if (rec.divergent) rec.h_after = std::numeric_limits<double>::infinity();

    const double u = uniform(rng);
    rec.log_uniform = std::log(u);
    rec.accept = !rec.divergent && rec.log_uniform < rec.h_before - rec.h_after;
    if (rec.accept) {
      current = std::move(*proposal);
    } else if (!euclid) {
      current = make_point(target, current.q, cfg);
    }
    rec.logpost = -current.neg_log_density;
    rec.sweeps_mean = sweep_calls > 0 ? static_cast<double>(sweep_total) / sweep_calls : 0.0;
    if (cfg.record_q) rec.q = current.q;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (sink) sink(rec);
    result.records.push_back(std::move(rec));
  }
  result.final_q = current.q;
  result.final_metric = current.metric;
  return result;
}

template <Target T>
ChainResult rmhmc_run(const T& target, const VectorXd& q0, ChainConfig cfg, const MoveSink& sink = {}) {
  if (cfg.metric == MetricKind::euclidean) cfg.metric = MetricKind::softabs_dynamic;
  return run_chain(target, q0, cfg, sink);
}

template <Target T>
ChainResult euclidean_hmc_run(const T& target, const VectorXd& q0, ChainConfig cfg,
                              const MoveSink& sink = {}) {
  cfg.metric = MetricKind::euclidean;
  return run_chain(target, q0, cfg, sink);
}

struct RankSumResult {
  double rank_sum = 0.0;  // sum of ranks of the first sample
  double z = 0.0;
  double p_value = 1.0;
};

/// Two-sided Wilcoxon rank-sum test, normal approximation with tie-corrected
/// variance and continuity correction. Zero variance gives p = 1.
inline RankSumResult rank_sum_test(std::span<const double> x, std::span<const double> y) {
  const std::size_t n1 = x.size(), n2 = y.size(), n = n1 + n2;
  if (n1 == 0 || n2 == 0) throw std::invalid_argument("rank-sum test needs two non-empty samples");
  std::vector<std::pair<double, int>> all;
  all.reserve(n);
  for (double v : x) all.emplace_back(v, 0);
  for (double v : y) all.emplace_back(v, 1);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0, tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && all[j].first == all[i].first) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    for (std::size_t k = i; k < j; ++k)
      if (all[k].second == 0) rank_sum += avg;
    i = j;
  }
  const double dn1 = static_cast<double>(n1), dn2 = static_cast<double>(n2), dn = static_cast<double>(n);
  const double mean = dn1 * (dn + 1.0) / 2.0;
  const double var = dn1 * dn2 / 12.0 * ((dn + 1.0) - tie_term / (dn * (dn - 1.0)));
  RankSumResult r;
  r.rank_sum = rank_sum;
  if (!(var > 0.0)) return r;
  const double dev = rank_sum - mean;
  const double corrected = std::max(std::abs(dev) - 0.5, 0.0);
  r.z = std::copysign(corrected / std::sqrt(var), dev);
  r.p_value = std::min(1.0, std::erfc(std::abs(r.z) / std::numbers::sqrt2));
  return r;
}

/// Rank-sum test between the first and second halves of a series (the middle
/// element is dropped for odd lengths).
inline RankSumResult wilcoxon_split_half(std::span<const double> values) {
  if (values.size() < 10) throw std::invalid_argument("split-half test needs at least 10 values");
  const std::size_t h = values.size() / 2;
  return rank_sum_test(values.first(h), values.last(h));
}

}  // namespace softabs

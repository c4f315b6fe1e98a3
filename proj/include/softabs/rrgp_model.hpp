#pragma once

// Hierarchical reduced-rank Gaussian-process models: sinusoidal feature
// functions, spectral coefficient variances, inverse-gamma hyperpriors and
// per-sample likelihood potentials with analytic derivatives to third order.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "softabs/errors.hpp"

namespace softabs {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class KernelKind { gaussian_1d, linear };

struct KernelSpec {
  KernelKind kind = KernelKind::gaussian_1d;
  int covariate = 0;
  int features = 1;
  double half_width = 8.0;

  static KernelSpec gaussian(int covariate, int features = 30, double half_width = 8.0) {
    return {KernelKind::gaussian_1d, covariate, features, half_width};
  }
  static KernelSpec linear(int covariate) { return {KernelKind::linear, covariate, 1, 1.0}; }

  void validate() const {
    if (covariate < 0) throw std::invalid_argument("kernel covariate index must be >= 0");
    if (features < 1) throw std::invalid_argument("kernel feature count must be >= 1");
    if (kind == KernelKind::linear && features != 1)
      throw std::invalid_argument("linear kernels carry exactly one feature");
    if (kind == KernelKind::gaussian_1d && !(half_width > 0.0))
      throw std::invalid_argument("gaussian kernel half-width must be > 0");
  }
};

/// `gaussian` is a fixed-noise Gaussian regression (J=1) used for conjugate
/// reference models; the other two are the families used for data analysis.
enum class Likelihood { logistic, gaussian_meanvar, gaussian };

enum class HyperTransform { log, identity };

/// Shared hyperparameters: amplitude and bandwidth of every Gaussian kernel,
/// amplitude of every linear kernel.
enum class Hyper : int { c_gauss = 0, sigma_gauss = 1, c_linear = 2 };
inline constexpr int kHyperCount = 3;
inline constexpr std::array<std::string_view, kHyperCount> kHyperNames{"c_g", "sigma_g", "c_l"};

struct InvGammaPrior {
  double shape = 2.0;
  double scale = 2.0;

  /// -ln InvGamma(theta; shape, scale), normalised.
  double neg_log_density(double theta) const {
    return -shape * std::log(scale) + std::lgamma(shape) + (shape + 1.0) * std::log(theta) +
           scale / theta;
  }
};

struct ModelSpec {
  /// functions[j] is the kernel set of f_j.
  std::vector<std::vector<KernelSpec>> functions;
  Likelihood likelihood = Likelihood::logistic;
  double intercept_variance = 1.0;
  std::array<InvGammaPrior, kHyperCount> hyper_priors{};
  double delta = 1e-3;
  double noise_variance = 1.0;
  HyperTransform transform = HyperTransform::log;
  /// A pinned hyperparameter is held fixed and dropped from the sampling vector.
  std::array<std::optional<double>, kHyperCount> pinned{};

  int function_count() const { return static_cast<int>(functions.size()); }

  const InvGammaPrior& prior(Hyper h) const { return hyper_priors[static_cast<int>(h)]; }
  InvGammaPrior& prior(Hyper h) { return hyper_priors[static_cast<int>(h)]; }

  void validate() const {
    const int J = function_count();
    switch (likelihood) {
      case Likelihood::logistic:
        if (J != 1) throw std::invalid_argument("logistic likelihood requires J=1");
        break;
      case Likelihood::gaussian_meanvar:
        if (J != 2) throw std::invalid_argument("gaussian mean/variance likelihood requires J=2");
        if (!(delta > 0.0)) throw std::invalid_argument("variance floor delta must be > 0");
        break;
      case Likelihood::gaussian:
        if (J != 1) throw std::invalid_argument("gaussian likelihood requires J=1");
        if (!(noise_variance > 0.0)) throw std::invalid_argument("noise variance must be > 0");
        break;
    }
    if (!(intercept_variance > 0.0)) throw std::invalid_argument("intercept variance must be > 0");
    for (const auto& p : hyper_priors)
      if (!(p.shape > 0.0) || !(p.scale > 0.0))
        throw std::invalid_argument("inverse-gamma shape and scale must be > 0");
    for (const auto& pin : pinned)
      if (pin && !(*pin > 0.0)) throw std::invalid_argument("pinned hyperparameters must be > 0");
    for (const auto& ks : functions)
      for (const auto& k : ks) k.validate();
  }
};

/// Layout of the flat sampling vector. Each function occupies one contiguous
/// span [kernel coefficients..., intercept] matching the columns of its
/// design matrix; the free hyperparameters follow at the end.
struct BlockLayout {
  struct KernelBlock {
    int offset = 0;
    int size = 0;
  };
  struct FunctionBlock {
    int offset = 0;
    int size = 0;  // coefficients + intercept
    std::vector<KernelBlock> kernels;
    int intercept = 0;
  };

  std::vector<FunctionBlock> functions;
  std::array<int, kHyperCount> hyper_index{-1, -1, -1};
  int dim = 0;

  int hyper(Hyper h) const { return hyper_index[static_cast<int>(h)]; }
  int coefficient_dim() const {
    int n = 0;
    for (const auto& f : functions) n += f.size;
    return n;
  }

  static BlockLayout from(const ModelSpec& model) {
    BlockLayout layout;
    int offset = 0;
    for (const auto& kernels : model.functions) {
      FunctionBlock fb;
      fb.offset = offset;
      for (const auto& k : kernels) {
        fb.kernels.push_back({offset, k.features});
        offset += k.features;
      }
      fb.intercept = offset++;
      fb.size = offset - fb.offset;
      layout.functions.push_back(std::move(fb));
    }
    for (int h = 0; h < kHyperCount; ++h)
      if (!model.pinned[h]) layout.hyper_index[h] = offset++;
    layout.dim = offset;
    return layout;
  }
};

struct Dataset {
  MatrixXd X;  // N x D
  VectorXd y;  // N

  int size() const { return static_cast<int>(X.rows()); }
  int covariates() const { return static_cast<int>(X.cols()); }

  void validate_for(Likelihood likelihood) const {
    if (X.rows() < 1) throw std::invalid_argument("dataset needs at least one row");
    if (y.size() != X.rows()) throw std::invalid_argument("target length differs from row count");
    if (likelihood == Likelihood::logistic)
      for (double v : y)
        if (v != 1.0 && v != -1.0) throw std::invalid_argument("logistic targets must be -1 or +1");
  }
};

/// sin(pi m (x + L) / (2L)); the 1/L prefactor is absorbed into the amplitude.
inline double feature_value(int m, double x, double half_width) {
  return std::sin(std::numbers::pi * m * (x + half_width) / (2.0 * half_width));
}

/// Squared eigenfrequency (pi m / 2L)^2 of the m-th basis function.
inline double basis_frequency_sq(int m, double half_width) {
  const double w = std::numbers::pi * m / (2.0 * half_width);
  return w * w;
}

/// Spectral density sqrt(pi sigma) exp(-sigma w^2 / 4) of exp(-r^2/sigma)
/// at the basis frequency.
inline double spectral_variance(int m, double sigma, double half_width) {
  return std::sqrt(std::numbers::pi * sigma) *
         std::exp(-sigma * basis_frequency_sq(m, half_width) / 4.0);
}

/// Design matrices, one per function: N x (sum_k M_jk + 1), last column ones.
/// Depends only on covariates and kernel specs.
struct FeatureCache {
  std::vector<MatrixXd> design;

  static FeatureCache build(const ModelSpec& model, const Dataset& data) {
    FeatureCache cache;
    const int N = data.size();
    for (const auto& kernels : model.functions) {
      int cols = 1;
      for (const auto& k : kernels) {
        if (k.covariate >= data.covariates())
          throw std::invalid_argument("kernel refers to covariate " + std::to_string(k.covariate) +
                                      " but dataset has " + std::to_string(data.covariates()));
        cols += k.features;
      }
      MatrixXd phi(N, cols);
      int c = 0;
      for (const auto& k : kernels) {
        for (int m = 1; m <= k.features; ++m, ++c) {
          for (int i = 0; i < N; ++i) {
            const double x = data.X(i, k.covariate);
            phi(i, c) = k.kind == KernelKind::linear ? x : feature_value(m, x, k.half_width);
          }
        }
      }
      phi.col(c).setOnes();
      cache.design.push_back(std::move(phi));
    }
    return cache;
  }
};

/// U and its partial derivatives w.r.t. the J function values at one sample.
/// Entries beyond J are zero.
struct PotentialDerivatives {
  double value = 0.0;
  std::array<double, 2> d1{};
  std::array<std::array<double, 2>, 2> d2{};
  std::array<std::array<std::array<double, 2>, 2>, 2> d3{};
};

inline PotentialDerivatives potential_derivatives(const ModelSpec& model, std::span<const double> f,
                                                  double target) {
  for (double v : f)
    if (!std::isfinite(v)) throw DivergenceError("non-finite function value");
  PotentialDerivatives out;
  switch (model.likelihood) {
    case Likelihood::logistic: {
      // U = ln(1 + exp(-y f)); s = 1/(1 + exp(y f)).
      const double z = target * f[0];
      const double s = 1.0 / (1.0 + std::exp(z));
      const double w = s * (1.0 - s);
      out.value = z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
      out.d1[0] = -target * s;
      out.d2[0][0] = w;
      out.d3[0][0][0] = -target * w * (1.0 - 2.0 * s);
      break;
    }
    case Likelihood::gaussian: {
      const double v = model.noise_variance;
      const double r = target - f[0];
      out.value = 0.5 * std::log(2.0 * std::numbers::pi * v) + r * r / (2.0 * v);
      out.d1[0] = -r / v;
      out.d2[0][0] = 1.0 / v;
      break;
    }
    case Likelihood::gaussian_meanvar: {
      // U = 1/2 ln(2 pi v) + r^2 / (2v), r = x - f1, v = delta + exp(f2).
      const double delta = model.delta;
      const double r = target - f[0];
      const double w = std::exp(f[1]);
      const double v = delta + w;
      const double r2 = r * r;
      const double v2 = v * v, v3 = v2 * v, v4 = v3 * v;
      out.value = 0.5 * std::log(2.0 * std::numbers::pi * v) + r2 / (2.0 * v);
      out.d1[0] = -r / v;
      out.d1[1] = 0.5 * (w / v) * (1.0 - r2 / v);
      out.d2[0][0] = 1.0 / v;
      out.d2[0][1] = out.d2[1][0] = r * w / v2;
      out.d2[1][1] = w * delta / (2.0 * v2) - r2 * w * (v - 2.0 * w) / (2.0 * v3);
      const double d112 = -w / v2;
      const double d122 = r * w * (v - 2.0 * w) / v3;
      const double d222 = delta * w * (v - 2.0 * w) / (2.0 * v3) -
                          r2 * w * (v2 - 6.0 * w * v + 6.0 * w * w) / (2.0 * v4);
      out.d3[0][0][0] = 0.0;
      out.d3[0][0][1] = out.d3[0][1][0] = out.d3[1][0][0] = d112;
      out.d3[0][1][1] = out.d3[1][0][1] = out.d3[1][1][0] = d122;
      out.d3[1][1][1] = d222;
      break;
    }
  }
  if (!std::isfinite(out.value)) throw DivergenceError("non-finite potential");
  return out;
}

/// Ground truth behind a simulated logistic dataset.
struct LogisticTruth {
  double c_star = 0.0;
  double b_star = -0.5;
  int features = 30;
  double half_width = 8.0;
  /// a_star[k * features + (m - 1)] for covariate k.
  std::vector<double> a_star;
  std::uint64_t seed = 0;

  double f(std::span<const double> x) const {
    double s = b_star;
    for (std::size_t k = 0; k < x.size(); ++k)
      for (int m = 1; m <= features; ++m)
        s += a_star[k * features + (m - 1)] * feature_value(m, x[k], half_width);
    return s;
  }
};

struct SimulatedLogistic {
  Dataset data;
  LogisticTruth truth;
};

/// Standard-normal covariates, a*_km ~ N(0, c*/m) for 4 <= m <= 16, b* = -0.5,
/// c* rescaled so the sample SD of f* over the draws is exactly target_sd.
/// `null_truth` zeroes a* and b* (labels become fair coin flips).
inline SimulatedLogistic simulate_logistic(int dims, int samples, double half_width,
                                           std::uint64_t seed, int features = 30,
                                           double target_sd = 1.5, bool null_truth = false) {
  if (dims < 1) throw std::invalid_argument("dims must be >= 1");
  if (samples < 2) throw std::invalid_argument("need at least two samples");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  SimulatedLogistic out;
  out.data.X.resize(samples, dims);
  for (int i = 0; i < samples; ++i)
    for (int k = 0; k < dims; ++k) out.data.X(i, k) = normal(rng);

  LogisticTruth& truth = out.truth;
  truth.features = features;
  truth.half_width = half_width;
  truth.seed = seed;
  truth.a_star.assign(static_cast<std::size_t>(dims) * features, 0.0);
  for (int k = 0; k < dims; ++k)
    for (int m = 4; m <= std::min(16, features); ++m)
      truth.a_star[k * features + (m - 1)] = normal(rng) / std::sqrt(static_cast<double>(m));

  if (null_truth) {
    std::fill(truth.a_star.begin(), truth.a_star.end(), 0.0);
    truth.b_star = 0.0;
    truth.c_star = 0.0;
  } else {
    VectorXd g(samples);
    for (int i = 0; i < samples; ++i) {
      double s = 0.0;
      for (int k = 0; k < dims; ++k)
        for (int m = 1; m <= features; ++m)
          s += truth.a_star[k * features + (m - 1)] *
               feature_value(m, out.data.X(i, k), half_width);
      g[i] = s;
    }
    const double sd = std::sqrt((g.array() - g.mean()).square().sum() / (samples - 1));
    if (sd > 0.0) {
      const double scale = target_sd / sd;
      truth.c_star = scale * scale;
      for (double& a : truth.a_star) a *= scale;
    }
  }

  out.data.y.resize(samples);
  std::vector<double> row(dims);
  for (int i = 0; i < samples; ++i) {
    for (int k = 0; k < dims; ++k) row[k] = out.data.X(i, k);
    const double p = 1.0 / (1.0 + std::exp(-truth.f(row)));
    out.data.y[i] = uniform(rng) < p ? 1.0 : -1.0;
  }
  return out;
}

/// Heteroscedastic regression data with one standard-normal covariate x1 and
/// one Bernoulli(0.4) covariate x2: y ~ N(sin(1.5 x1) + 0.5 x2,
/// exp(0.8 cos(2 x1) - 1)).
inline Dataset simulate_heteroscedastic(int samples, std::uint64_t seed) {
  if (samples < 2) throw std::invalid_argument("need at least two samples");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.4);
  Dataset ds;
  ds.X.resize(samples, 2);
  ds.y.resize(samples);
  for (int i = 0; i < samples; ++i) {
    const double x = normal(rng);
    const double b = coin(rng) ? 1.0 : 0.0;
    ds.X(i, 0) = x;
    ds.X(i, 1) = b;
    const double mean = std::sin(1.5 * x) + 0.5 * b;
    const double sd = std::exp(0.5 * (0.8 * std::cos(2.0 * x) - 1.0));
    ds.y[i] = mean + sd * normal(rng);
  }
  return ds;
}

/// Gaussian-kernel logistic model over every covariate (J=1).
inline ModelSpec logistic_model(int dims, int features = 30, double half_width = 8.0) {
  ModelSpec model;
  model.likelihood = Likelihood::logistic;
  model.functions.resize(1);
  for (int k = 0; k < dims; ++k)
    model.functions[0].push_back(KernelSpec::gaussian(k, features, half_width));
  return model;
}

enum class RegressionKind { linear_mean, nonlinear_mean, linear_meanvar, nonlinear_meanvar };

inline bool is_binary_column(const Dataset& data, int k) {
  for (int i = 0; i < data.size(); ++i) {
    const double v = data.X(i, k);
    if (v != 0.0 && v != 1.0) return false;
  }
  return true;
}

/// Mean (and variance) regression models. Linear variants use a linear kernel
/// per covariate; nonlinear variants put a Gaussian kernel on each continuous
/// covariate and a linear kernel on each 0/1 covariate. Mean-only variants
/// keep f_2 = b_2.
inline ModelSpec regression_model(RegressionKind kind, const Dataset& data, int features = 30,
                                  double half_width = 8.0) {
  ModelSpec model;
  model.likelihood = Likelihood::gaussian_meanvar;
  model.functions.resize(2);
  const bool nonlinear =
      kind == RegressionKind::nonlinear_mean || kind == RegressionKind::nonlinear_meanvar;
  const bool with_variance =
      kind == RegressionKind::linear_meanvar || kind == RegressionKind::nonlinear_meanvar;
  std::vector<KernelSpec> kernels;
  for (int k = 0; k < data.covariates(); ++k) {
    if (nonlinear && !is_binary_column(data, k))
      kernels.push_back(KernelSpec::gaussian(k, features, half_width));
    else
      kernels.push_back(KernelSpec::linear(k));
  }
  model.functions[0] = kernels;
  if (with_variance) model.functions[1] = kernels;
  return model;
}

/// Data drawn from the nonlinear mean/variance model itself. Covariates as in
/// simulate_heteroscedastic; coefficients a ~ N(0, theta V_m) with
/// c_g = sigma_g = c_l = 1, intercepts ~ N(0, 1), y ~ N(f_1, delta + exp f_2).
inline Dataset simulate_meanvar(int samples, std::uint64_t seed, int features = 30, double half_width = 8.0,
                                double delta = 1e-3) {
  Dataset ds = simulate_heteroscedastic(samples, seed);
  const ModelSpec model = regression_model(RegressionKind::nonlinear_meanvar, ds, features, half_width);
  const auto cache = FeatureCache::build(model, ds);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::array<VectorXd, 2> f;
  for (int j = 0; j < 2; ++j) {
    VectorXd a(cache.design[j].cols());
    int c = 0;
    for (const auto& k : model.functions[j])
      for (int m = 1; m <= k.features; ++m, ++c)
        a[c] = normal(rng) * (k.kind == KernelKind::linear ? 1.0 : std::sqrt(spectral_variance(m, 1.0, k.half_width)));
    a[c] = normal(rng);
    f[j] = cache.design[j] * a;
  }
  for (int i = 0; i < samples; ++i) ds.y[i] = f[0][i] + std::sqrt(delta + std::exp(f[1][i])) * normal(rng);
  return ds;
}

/// Prior constants used for sampling-speed comparisons (all shapes and
/// scales 2, Sigma = 1).
inline void apply_sampling_priors(ModelSpec& model) {
  for (auto& p : model.hyper_priors) p = {2.0, 2.0};
  model.intercept_variance = 1.0;
}

/// Prior constants used for evidence computations.
inline void apply_evidence_priors(ModelSpec& model) {
  model.prior(Hyper::c_gauss) = {5.0, 0.5};
  model.prior(Hyper::c_linear) = {5.0, 0.5};
  model.prior(Hyper::sigma_gauss) = {1.0, 1.0};
  model.intercept_variance = 1.0;
}

}  // namespace softabs

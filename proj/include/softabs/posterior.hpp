#pragma once

// Negative log-posterior of a hierarchical reduced-rank GP model with its
// gradient, Hessian and the contractions tr(W dH/dq_i) of the third-order
// derivative tensor against a d x d weight matrix.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <utility>
#include <vector>

#include "softabs/errors.hpp"
#include "softabs/rrgp_model.hpp"

namespace softabs {

/// Sparse symmetric derivatives of the prior part of the density. Third-order
/// entries are stored for every ordered index triple.
struct PriorDerivatives {
  struct Entry2 {
    int row, col;
    double value;
  };
  struct Entry3 {
    int i, j, k;
    double value;
  };
  double value = 0.0;
  VectorXd gradient;
  std::vector<Entry2> hessian;
  std::vector<Entry3> third;
};

class Posterior {
 public:
  /// Everything the derivative routines need at one position q.
  struct State {
    VectorXd q;
    std::array<double, kHyperCount> theta{};
    MatrixXd f;  // N x J
    VectorXd u;  // per-sample potential
    std::array<VectorXd, 2> d1;
    std::array<std::array<VectorXd, 2>, 2> d2;
    std::array<std::array<std::array<VectorXd, 2>, 2>, 2> d3;
  };

  Posterior(ModelSpec model, Dataset data, double temperature = 1.0)
      : Posterior(std::move(model), std::make_shared<const Dataset>(std::move(data)), nullptr,
                  temperature) {}

  /// Shares covariates and design matrices across posteriors that differ only
  /// in priors, pinned hyperparameters or temperature.
  Posterior(ModelSpec model, std::shared_ptr<const Dataset> data,
            std::shared_ptr<const FeatureCache> features, double temperature = 1.0)
      : model_(std::move(model)), data_(std::move(data)), features_(std::move(features)) {
    model_.validate();
    data_->validate_for(model_.likelihood);
    if (!features_) features_ = std::make_shared<const FeatureCache>(FeatureCache::build(model_, *data_));
    layout_ = BlockLayout::from(model_);
    set_temperature(temperature);
    for (std::size_t j = 0; j < model_.functions.size(); ++j) {
      const auto& kernels = model_.functions[j];
      for (std::size_t k = 0; k < kernels.size(); ++k) {
        const auto& blk = layout_.functions[j].kernels[k];
        for (int m = 1; m <= kernels[k].features; ++m) {
          Coefficient c;
          c.index = blk.offset + m - 1;
          c.gaussian = kernels[k].kind == KernelKind::gaussian_1d;
          c.omega_sq = c.gaussian ? basis_frequency_sq(m, kernels[k].half_width) : 0.0;
          coefficients_.push_back(c);
        }
      }
    }
  }

  const ModelSpec& model() const { return model_; }
  const Dataset& data() const { return *data_; }
  std::shared_ptr<const Dataset> shared_data() const { return data_; }
  std::shared_ptr<const FeatureCache> shared_features() const { return features_; }
  const FeatureCache& features() const { return *features_; }
  const BlockLayout& layout() const { return layout_; }
  int dim() const { return layout_.dim; }
  double temperature() const { return temperature_; }
  void set_temperature(double tau) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("temperature must lie in [0, 1]");
    temperature_ = tau;
  }

  /// Default starting point: coefficients and intercepts 0, hyperparameters 1.
  VectorXd initial_position() const {
    VectorXd q = VectorXd::Zero(dim());
    if (model_.transform == HyperTransform::identity)
      for (int h : layout_.hyper_index)
        if (h >= 0) q[h] = 1.0;
    return q;
  }

  /// Hyperparameter value as seen by the model (pinned or untransformed).
  double hyper_value(const VectorXd& q, Hyper h) const {
    const int hi = static_cast<int>(h);
    if (model_.pinned[hi]) return *model_.pinned[hi];
    const double u = q[layout_.hyper_index[hi]];
    return model_.transform == HyperTransform::log ? std::exp(u) : u;
  }

  State prepare(const VectorXd& q) const {
    if (q.size() != dim()) throw std::invalid_argument("position has wrong dimension");
    if (!q.allFinite()) throw DivergenceError("non-finite position");
    State s;
    s.q = q;
    for (int h = 0; h < kHyperCount; ++h) {
      s.theta[h] = hyper_value(q, static_cast<Hyper>(h));
      if (model_.transform == HyperTransform::identity && !(s.theta[h] > 0.0))
        throw DomainError("hyperparameter outside its positive support");
      if (!std::isfinite(s.theta[h]) || s.theta[h] <= 0.0)
        throw DivergenceError("hyperparameter overflow");
    }
    const int N = data_->size();
    const int J = model_.function_count();
    s.f.resize(N, J);
    for (int j = 0; j < J; ++j) {
      const auto& fb = layout_.functions[j];
      s.f.col(j).noalias() = features_->design[j] * q.segment(fb.offset, fb.size);
    }
    s.u.resize(N);
    for (int a = 0; a < J; ++a) {
      s.d1[a].resize(N);
      for (int b = 0; b < J; ++b) {
        s.d2[a][b].resize(N);
        for (int c = 0; c < J; ++c) s.d3[a][b][c].resize(N);
      }
    }
    std::array<double, 2> fi{};
    for (int i = 0; i < N; ++i) {
      for (int j = 0; j < J; ++j) fi[j] = s.f(i, j);
      const auto pd = potential_derivatives(model_, std::span<const double>(fi.data(), J), data_->y[i]);
      s.u[i] = pd.value;
      for (int a = 0; a < J; ++a) {
        s.d1[a][i] = pd.d1[a];
        for (int b = 0; b < J; ++b) {
          s.d2[a][b][i] = pd.d2[a][b];
          for (int c = 0; c < J; ++c) s.d3[a][b][c][i] = pd.d3[a][b][c];
        }
      }
    }
    return s;
  }

  /// ln P(X | a), untempered.
  double log_likelihood(const State& s) const { return -s.u.sum(); }

  PriorDerivatives prior_derivatives(const State& s) const {
    PriorDerivatives out;
    out.gradient = VectorXd::Zero(dim());
    const double log2pi = std::log(2.0 * std::numbers::pi);

    // ln(c V) as a function of the free hyper coordinates, separable in them.
    struct LogVariance {
      double value = 0.0;
      int n = 0;
      std::array<int, 2> idx{};
      std::array<double, 2> d1{}, d2{}, d3{};
    };
    const auto c_term = [&](Hyper h, LogVariance& lv) {
      const double theta = s.theta[static_cast<int>(h)];
      lv.value += std::log(theta);
      const int qi = layout_.hyper(h);
      if (qi < 0) return;
      const int n = lv.n++;
      lv.idx[n] = qi;
      if (model_.transform == HyperTransform::log) {
        lv.d1[n] = 1.0;
        lv.d2[n] = lv.d3[n] = 0.0;
      } else {
        lv.d1[n] = 1.0 / theta;
        lv.d2[n] = -1.0 / (theta * theta);
        lv.d3[n] = 2.0 / (theta * theta * theta);
      }
    };
    const double sigma = s.theta[static_cast<int>(Hyper::sigma_gauss)];
    const int sigma_idx = layout_.hyper(Hyper::sigma_gauss);

    std::array<int, 3> idx{};
    std::array<double, 3> g{};
    std::array<std::array<double, 3>, 3> H{};
    std::array<std::array<std::array<double, 3>, 3>, 3> T{};

    for (const auto& coef : coefficients_) {
      LogVariance lv;
      if (coef.gaussian) {
        c_term(Hyper::c_gauss, lv);
        lv.value += 0.5 * std::log(std::numbers::pi) + 0.5 * std::log(sigma) - sigma * coef.omega_sq / 4.0;
        if (sigma_idx >= 0) {
          const int n = lv.n++;
          lv.idx[n] = sigma_idx;
          if (model_.transform == HyperTransform::log) {
            const double e = sigma * coef.omega_sq / 4.0;
            lv.d1[n] = 0.5 - e;
            lv.d2[n] = lv.d3[n] = -e;
          } else {
            lv.d1[n] = 0.5 / sigma - coef.omega_sq / 4.0;
            lv.d2[n] = -0.5 / (sigma * sigma);
            lv.d3[n] = 1.0 / (sigma * sigma * sigma);
          }
        }
      } else {
        c_term(Hyper::c_linear, lv);
      }

      // term(a, l) = a^2 e^{-l} / 2 + l / 2 + ln(2 pi) / 2
      const double a = s.q[coef.index];
      const double e = std::exp(-lv.value);
      const double t_a = a * e, t_aa = e;
      const double t_l = 0.5 * (1.0 - a * a * e), t_ll = 0.5 * a * a * e, t_lll = -0.5 * a * a * e;
      const double t_al = -a * e, t_aal = -e, t_all = a * e;
      out.value += 0.5 * a * a * e + 0.5 * lv.value + 0.5 * log2pi;

      const int n = 1 + lv.n;
      idx[0] = coef.index;
      for (int i = 0; i < lv.n; ++i) idx[1 + i] = lv.idx[i];
      for (auto& row : H) row.fill(0.0);
      for (auto& mat : T)
        for (auto& row : mat) row.fill(0.0);
      g[0] = t_a;
      H[0][0] = t_aa;
      for (int i = 0; i < lv.n; ++i) {
        const int x = 1 + i;
        g[x] = t_l * lv.d1[i];
        H[0][x] = H[x][0] = t_al * lv.d1[i];
        T[0][0][x] = T[0][x][0] = T[x][0][0] = t_aal * lv.d1[i];
        for (int k = 0; k < lv.n; ++k) {
          const int y = 1 + k;
          const double diag2 = i == k ? lv.d2[i] : 0.0;
          H[x][y] = t_ll * lv.d1[i] * lv.d1[k] + t_l * diag2;
          const double tay = t_all * lv.d1[i] * lv.d1[k] + t_al * diag2;
          T[0][x][y] = T[x][0][y] = T[x][y][0] = tay;
          for (int m = 0; m < lv.n; ++m) {
            const int z = 1 + m;
            double v = t_lll * lv.d1[i] * lv.d1[k] * lv.d1[m];
            if (i == k) v += t_ll * lv.d2[i] * lv.d1[m];
            if (i == m) v += t_ll * lv.d2[i] * lv.d1[k];
            if (k == m) v += t_ll * lv.d2[k] * lv.d1[i];
            if (i == k && k == m) v += t_l * lv.d3[i];
            T[x][y][z] = v;
          }
        }
      }
      for (int x = 0; x < n; ++x) {
        out.gradient[idx[x]] += g[x];
        for (int y = 0; y < n; ++y) {
          if (H[x][y] != 0.0) out.hessian.push_back({idx[x], idx[y], H[x][y]});
          for (int z = 0; z < n; ++z)
            if (T[x][y][z] != 0.0) out.third.push_back({idx[x], idx[y], idx[z], T[x][y][z]});
        }
      }
    }

    const double Sigma = model_.intercept_variance;
    for (const auto& fb : layout_.functions) {
      const double b = s.q[fb.intercept];
      out.value += b * b / (2.0 * Sigma) + 0.5 * std::log(2.0 * std::numbers::pi * Sigma);
      out.gradient[fb.intercept] += b / Sigma;
      out.hessian.push_back({fb.intercept, fb.intercept, 1.0 / Sigma});
    }

    for (int h = 0; h < kHyperCount; ++h) {
      const int qi = layout_.hyper_index[h];
      if (qi < 0) continue;
      const auto& pr = model_.hyper_priors[h];
      const double al = pr.shape, be = pr.scale, th = s.theta[h];
      const double norm = -al * std::log(be) + std::lgamma(al);
      double v, d1, d2, d3;
      if (model_.transform == HyperTransform::log) {
        // includes the log-Jacobian of theta = exp(u)
        const double u = s.q[qi];
        const double bt = be / th;
        v = norm + al * u + bt;
        d1 = al - bt;
        d2 = bt;
        d3 = -bt;
      } else {
        v = norm + (al + 1.0) * std::log(th) + be / th;
        d1 = (al + 1.0) / th - be / (th * th);
        d2 = -(al + 1.0) / (th * th) + 2.0 * be / (th * th * th);
        d3 = 2.0 * (al + 1.0) / (th * th * th) - 6.0 * be / (th * th * th * th);
      }
      out.value += v;
      out.gradient[qi] += d1;
      out.hessian.push_back({qi, qi, d2});
      out.third.push_back({qi, qi, qi, d3});
    }
    return out;
  }

  /// -ln P(q) with the likelihood raised to the temperature.
  double neg_log_density(const State& s) const {
    double prior = prior_derivatives(s).value;
    return temperature_ * s.u.sum() + prior;
  }

  VectorXd gradient(const State& s) const {
    VectorXd grad = prior_derivatives(s).gradient;
    for (int j = 0; j < model_.function_count(); ++j) {
      const auto& fb = layout_.functions[j];
      grad.segment(fb.offset, fb.size).noalias() +=
          temperature_ * features_->design[j].transpose() * s.d1[j];
    }
    return grad;
  }

  MatrixXd hessian(const State& s) const {
    MatrixXd H = MatrixXd::Zero(dim(), dim());
    const int J = model_.function_count();
    for (int j1 = 0; j1 < J; ++j1) {
      const auto& b1 = layout_.functions[j1];
      const MatrixXd& phi1 = features_->design[j1];
      for (int j2 = j1; j2 < J; ++j2) {
        const auto& b2 = layout_.functions[j2];
        const MatrixXd& phi2 = features_->design[j2];
        MatrixXd weighted = phi2.array().colwise() * (temperature_ * s.d2[j1][j2]).array();
        MatrixXd block = phi1.transpose() * weighted;
        H.block(b1.offset, b2.offset, b1.size, b2.size) += block;
        if (j2 != j1) H.block(b2.offset, b1.offset, b2.size, b1.size) += block.transpose();
      }
    }
    for (const auto& e : prior_derivatives(s).hessian) H(e.row, e.col) += e.value;
    return H;
  }

  /// tr(W dH/dq_i) for every i without forming the third-derivative tensor:
  /// per function pair, rowsum((Phi_j1 W_j1j2) .* Phi_j2) is weighted by the
  /// per-sample third derivatives and mapped back through Phi_j^T.
  VectorXd trace_contraction(const State& s, const MatrixXd& W) const {
    check_weight(W);
    VectorXd out = VectorXd::Zero(dim());
    const int J = model_.function_count();
    const int N = data_->size();
    std::array<std::array<VectorXd, 2>, 2> rows;
    for (int j1 = 0; j1 < J; ++j1) {
      const auto& b1 = layout_.functions[j1];
      const MatrixXd& phi1 = features_->design[j1];
      for (int j2 = 0; j2 < J; ++j2) {
        const auto& b2 = layout_.functions[j2];
        MatrixXd pw = phi1 * W.block(b1.offset, b2.offset, b1.size, b2.size);
        rows[j1][j2] = pw.cwiseProduct(features_->design[j2]).rowwise().sum();
      }
    }
    for (int j = 0; j < J; ++j) {
      VectorXd weights = VectorXd::Zero(N);
      for (int j1 = 0; j1 < J; ++j1)
        for (int j2 = 0; j2 < J; ++j2) weights.array() += s.d3[j1][j2][j].array() * rows[j1][j2].array();
      const auto& fb = layout_.functions[j];
      out.segment(fb.offset, fb.size).noalias() +=
          temperature_ * features_->design[j].transpose() * weights;
    }
    for (const auto& e : prior_derivatives(s).third) out[e.k] += W(e.i, e.j) * e.value;
    return out;
  }

  std::pair<VectorXd, VectorXd> trace_contractions(const State& s, const MatrixXd& W1,
                                                   const MatrixXd& W2) const {
    return {trace_contraction(s, W1), trace_contraction(s, W2)};
  }

  /// Same quantity by materialising each slice dH/dq_i analytically
  /// (O(N d^3)); the cost profile of a contraction that ignores the model
  /// structure.
  VectorXd naive_trace_contraction(const State& s, const MatrixXd& W) const {
    check_weight(W);
    const int d = dim();
    const int J = model_.function_count();
    VectorXd out = VectorXd::Zero(d);
    const auto prior = prior_derivatives(s);
    MatrixXd slice(d, d);
    for (int t = 0; t < d; ++t) {
      slice.setZero();
      for (int j = 0; j < J; ++j) {
        const auto& fb = layout_.functions[j];
        if (t < fb.offset || t >= fb.offset + fb.size) continue;
        const auto col = features_->design[j].col(t - fb.offset);
        for (int j1 = 0; j1 < J; ++j1) {
          const auto& b1 = layout_.functions[j1];
          for (int j2 = 0; j2 < J; ++j2) {
            const auto& b2 = layout_.functions[j2];
            VectorXd w = temperature_ * s.d3[j1][j2][j].cwiseProduct(col);
            MatrixXd weighted = features_->design[j2].array().colwise() * w.array();
            slice.block(b1.offset, b2.offset, b1.size, b2.size).noalias() +=
                features_->design[j1].transpose() * weighted;
          }
        }
      }
      for (const auto& e : prior.third)
        if (e.k == t) slice(e.i, e.j) += e.value;
      out[t] = W.cwiseProduct(slice.transpose()).sum();
    }
    return out;
  }

 private:
  struct Coefficient {
    int index = 0;
    bool gaussian = true;
    double omega_sq = 0.0;
  };

  void check_weight(const MatrixXd& W) const {
    if (W.rows() != dim() || W.cols() != dim())
      throw std::invalid_argument("weight matrix dimension mismatch");
  }

  ModelSpec model_;
  std::shared_ptr<const Dataset> data_;
  std::shared_ptr<const FeatureCache> features_;
  BlockLayout layout_;
  double temperature_ = 1.0;
  std::vector<Coefficient> coefficients_;
};

/// Reference contraction: dH/dq_i by Richardson-extrapolated central
/// differences of the analytic Hessian, then tr(W dH/dq_i). O(d^4); test use only.
inline VectorXd dense_oracle(const Posterior& post, const VectorXd& q, const MatrixXd& W,
                             double step = 1e-3, int max_dim = 200) {
  const int d = post.dim();
  if (d > max_dim) throw std::invalid_argument("dense oracle limited to d <= " + std::to_string(max_dim));
  if (W.rows() != d || W.cols() != d) throw std::invalid_argument("weight matrix dimension mismatch");
  const auto central = [&](int t, double h) {
    VectorXd qp = q, qm = q;
    qp[t] += h;
    qm[t] -= h;
    return MatrixXd((post.hessian(post.prepare(qp)) - post.hessian(post.prepare(qm))) / (2.0 * h));
  };
  VectorXd out(d);
  for (int t = 0; t < d; ++t) {
    const MatrixXd coarse = central(t, step);
    const MatrixXd fine = central(t, step / 2.0);
    const MatrixXd slice = (4.0 * fine - coarse) / 3.0;
    out[t] = W.cwiseProduct(slice.transpose()).sum();
  }
  return out;
}

}  // namespace softabs

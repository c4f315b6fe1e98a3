#pragma once

// Soft-absolute Hessian metric G = Psi diag(g(lambda)) Psi^T with
// g(lambda) = sqrt(kappa^2 + lambda^2), cyclic Jacobi eigendecomposition
// (cold and warm-started), and the cached matrices W1, W2 that turn the
// metric-derivative terms of the Hamiltonian gradient into traces against dH.

#include <Eigen/Dense>
#include <Eigen/Jacobi>

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "softabs/errors.hpp"

namespace softabs {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline double softabs(double lambda, double kappa) { return std::sqrt(kappa * kappa + lambda * lambda); }

inline double softabs_derivative(double lambda, double kappa) {
  return lambda / std::sqrt(kappa * kappa + lambda * lambda);
}

/// Divided differences of g over the spectrum; the derivative branch is used
/// when two eigenvalues are closer than kappa * 1e-10.
inline MatrixXd t_matrix(const VectorXd& lambda, double kappa) {
  const int d = static_cast<int>(lambda.size());
  const double tie = kappa * 1e-10;
  MatrixXd T(d, d);
  for (int j = 0; j < d; ++j) {
    for (int l = j; l < d; ++l) {
      const double diff = lambda[j] - lambda[l];
      const double v = std::abs(diff) <= tie
                           ? softabs_derivative(0.5 * (lambda[j] + lambda[l]), kappa)
                           : (softabs(lambda[j], kappa) - softabs(lambda[l], kappa)) / diff;
      T(j, l) = T(l, j) = v;
    }
  }
  return T;
}

struct Eigensystem {
  VectorXd values;
  MatrixXd vectors;
  int sweeps = 0;
  /// Warm-start calls since the basis was last re-orthogonalised.
  int steps_since_orthogonalization = 0;
};

inline double off_diagonal_norm(const MatrixXd& A) {
  double s = 0.0;
  const Eigen::Index d = A.rows();
  for (Eigen::Index c = 0; c < d; ++c)
    for (Eigen::Index r = 0; r < c; ++r) s += A(r, c) * A(r, c);
  return std::sqrt(2.0 * s);
}

/// Cyclic-by-row Jacobi on symmetric A, accumulating rotations into V.
/// Stops once the off-diagonal Frobenius norm is <= zeta * ||A||_F; rotations
/// for pivots below zeta * ||A||_F / d are skipped. Returns the sweep count.
inline int jacobi_diagonalize(MatrixXd& A, MatrixXd& V, double zeta, int max_sweeps = 30) {
  const int d = static_cast<int>(A.rows());
  const double norm = A.norm();
  if (!std::isfinite(norm)) throw DivergenceError("non-finite matrix in Jacobi eigensolver");
  const double target = zeta * norm;
  const double skip = target / d;
  for (int sweep = 0;; ++sweep) {
    if (off_diagonal_norm(A) <= target) return sweep;
    if (sweep == max_sweeps)
      throw ConvergenceError("cyclic Jacobi did not converge in " + std::to_string(max_sweeps) + " sweeps");
    for (int p = 0; p < d - 1; ++p) {
      for (int q = p + 1; q < d; ++q) {
        if (std::abs(A(p, q)) <= skip) continue;
        Eigen::JacobiRotation<double> rot;
        rot.makeJacobi(A, p, q);
        A.applyOnTheLeft(p, q, rot.adjoint());
        A.applyOnTheRight(p, q, rot);
        V.applyOnTheRight(p, q, rot);
        A(p, q) = A(q, p) = 0.0;
      }
    }
  }
}

/// Cold-start Jacobi from the identity basis.
inline Eigensystem static_eigendecompose(const MatrixXd& H, double zeta, int max_sweeps = 30) {
  Eigensystem out;
  MatrixXd A = 0.5 * (H + H.transpose());
  out.vectors = MatrixXd::Identity(H.rows(), H.cols());
  out.sweeps = jacobi_diagonalize(A, out.vectors, zeta, max_sweeps);
  out.values = A.diagonal();
  return out;
}

/// Library symmetric eigensolver; baseline for timings and tests.
inline Eigensystem reference_eigendecompose(const MatrixXd& H) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(0.5 * (H + H.transpose()));
  if (solver.info() != Eigen::Success) throw ConvergenceError("symmetric eigensolver failed");
  return {solver.eigenvalues(), solver.eigenvectors(), 0, 0};
}

/// In-place modified Gram-Schmidt on the columns of Q.
inline void modified_gram_schmidt(MatrixXd& Q) {
  const Eigen::Index d = Q.cols();
  for (Eigen::Index k = 0; k < d; ++k) {
    for (Eigen::Index j = 0; j < k; ++j) Q.col(k) -= Q.col(j).dot(Q.col(k)) * Q.col(j);
    const double n = Q.col(k).norm();
    if (!(n > 0.0)) throw DivergenceError("degenerate basis in Gram-Schmidt");
    Q.col(k) /= n;
  }
}

inline double orthogonality_error(const MatrixXd& Q) {
  return (Q.transpose() * Q - MatrixXd::Identity(Q.cols(), Q.cols())).cwiseAbs().maxCoeff();
}

struct MetricState {
  VectorXd eigenvalues;
  MatrixXd eigenvectors;
  VectorXd softabs_values;
  double log_det = 0.0;
  double kappa = 1.0;
  int sweep_count = 0;
  int steps_since_orthogonalization = 0;

  int dim() const { return static_cast<int>(eigenvalues.size()); }
};

inline MetricState make_metric(Eigensystem eig, double kappa) {
  if (!(kappa > 0.0)) throw std::invalid_argument("kappa must be > 0");
  MetricState m;
  m.kappa = kappa;
  m.sweep_count = eig.sweeps;
  m.steps_since_orthogonalization = eig.steps_since_orthogonalization;
  m.eigenvalues = std::move(eig.values);
  m.eigenvectors = std::move(eig.vectors);
  m.softabs_values = m.eigenvalues.unaryExpr([kappa](double l) { return softabs(l, kappa); });
  m.log_det = m.softabs_values.array().log().sum();
  return m;
}

/// Warm start: diagonalise Psi^T H Psi with Jacobi and rotate the previous
/// basis, Psi_new = Psi Q. The previous basis is re-orthogonalised on every
/// `gs_interval`-th call.
inline Eigensystem dynamic_eigendecompose(const MatrixXd& H, const MetricState& prev, double zeta,
                                          int gs_interval = 10, int max_sweeps = 30) {
  Eigensystem out;
  MatrixXd basis = prev.eigenvectors;
  out.steps_since_orthogonalization = prev.steps_since_orthogonalization + 1;
  if (out.steps_since_orthogonalization >= gs_interval) {
    modified_gram_schmidt(basis);
    out.steps_since_orthogonalization = 0;
  }
  MatrixXd A = basis.transpose() * H * basis;
  A = 0.5 * (A + A.transpose()).eval();
  MatrixXd Q = MatrixXd::Identity(A.rows(), A.cols());
  out.sweeps = jacobi_diagonalize(A, Q, zeta, max_sweeps);
  out.values = A.diagonal();
  out.vectors.noalias() = basis * Q;
  return out;
}

/// Reconstructed metric Psi diag(g) Psi^T.
inline MatrixXd metric_matrix(const MetricState& m) {
  return m.eigenvectors * m.softabs_values.asDiagonal() * m.eigenvectors.transpose();
}

inline VectorXd metric_apply(const MetricState& m, const VectorXd& v) {
  return m.eigenvectors * (m.softabs_values.cwiseProduct(m.eigenvectors.transpose() * v));
}

inline VectorXd metric_apply_inverse(const MetricState& m, const VectorXd& v) {
  return m.eigenvectors * (m.eigenvectors.transpose() * v).cwiseQuotient(m.softabs_values);
}

inline double metric_logdet(const MetricState& m) { return m.log_det; }

/// p = Psi diag(sqrt g) z, z standard normal, so p ~ N(0, G).
template <class Rng>
VectorXd sample_momentum(const MetricState& m, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  VectorXd z(m.dim());
  for (auto& x : z) x = normal(rng);
  return m.eigenvectors * m.softabs_values.cwiseSqrt().cwiseProduct(z);
}

struct BetancourtCache {
  MatrixXd T;
  VectorXd B;  // diagonal of B
  VectorXd R;  // diagonal of R
  MatrixXd W1;
  MatrixXd W2;
};

/// W2 = Psi (R .* T) Psi^T; independent of the momentum.
inline MatrixXd metric_w2(const MetricState& m, const MatrixXd& T) {
  const VectorXd diag = T.diagonal().cwiseQuotient(m.softabs_values);
  return m.eigenvectors * diag.asDiagonal() * m.eigenvectors.transpose();
}

/// W1 = Psi B T B Psi^T with B = diag((Psi^T p) / g).
inline MatrixXd metric_w1(const MetricState& m, const MatrixXd& T, const VectorXd& p) {
  const VectorXd b = (m.eigenvectors.transpose() * p).cwiseQuotient(m.softabs_values);
  const MatrixXd inner = b.asDiagonal() * T * b.asDiagonal();
  return m.eigenvectors * inner * m.eigenvectors.transpose();
}

inline BetancourtCache build_cache(const MetricState& m, const VectorXd& p) {
  BetancourtCache c;
  c.T = t_matrix(m.eigenvalues, m.kappa);
  c.R = m.softabs_values.cwiseInverse();
  c.B = (m.eigenvectors.transpose() * p).cwiseProduct(c.R);
  c.W1 = metric_w1(m, c.T, p);
  c.W2 = metric_w2(m, c.T);
  return c;
}

}  // namespace softabs

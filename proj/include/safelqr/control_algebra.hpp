#pragma once

#include "safelqr/common.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <stdexcept>

namespace safelqr {

/// Thrown when an operation requires a Schur-stable matrix and gets one
/// with spectral radius >= 1.
class UnstableArgumentError : public std::runtime_error {
 public:
  explicit UnstableArgumentError(const std::string& msg)
      : std::runtime_error(msg) {}
};

/// Thrown when the Riccati iteration fails to converge or the resulting
/// closed loop is not stable. Callers decide the fallback.
class DareFailure : public std::runtime_error {
 public:
  explicit DareFailure(const std::string& msg) : std::runtime_error(msg) {}
};

inline double spectral_radius(const Matrix& m) {
  require(m.rows() == m.cols(), "spectral_radius: matrix must be square");
  require(m.allFinite(), "spectral_radius: non-finite entries");
  if (m.rows() == 0) return 0.0;
  Eigen::EigenSolver<Matrix> es(m, /*computeEigenvectors=*/false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Moore-Penrose pseudo-inverse via SVD. Singular values below
/// 1e-12 * max(rows,cols) * sigma_max are treated as zero.
inline Matrix pseudo_inverse(const Matrix& m) {
  require(m.allFinite(), "pseudo_inverse: non-finite entries");
  if (m.size() == 0) return m.transpose();
  Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const double cutoff =
      1e-12 * static_cast<double>(std::max(m.rows(), m.cols())) * sv(0);
  Vector inv_sv = Vector::Zero(sv.size());
  for (int i = 0; i < sv.size(); ++i)
    if (sv(i) > cutoff) inv_sv(i) = 1.0 / sv(i);
  return svd.matrixV() * inv_sv.asDiagonal() * svd.matrixU().transpose();
}

namespace detail {

inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// Operator of the vectorized discrete Lyapunov equation
// At' X At - X + Q = 0, i.e. I - At' (x) At'.
inline Matrix lyap_operator(const Matrix& a_tilde) {
  const int n = static_cast<int>(a_tilde.rows());
  const Matrix at = a_tilde.transpose();
  return Matrix::Identity(n * n, n * n) - kron(at, at);
}

}  // namespace detail

/// Solves At' X At - X + Q = 0 by Kronecker vectorization (exact at
/// desk scale). Requires rho(At) < 1; the result is symmetrized.
inline Matrix solve_dlyap(const Matrix& a_tilde, const Matrix& q) {
  const int n = static_cast<int>(a_tilde.rows());
  require(a_tilde.rows() == a_tilde.cols() && q.rows() == n && q.cols() == n,
          "solve_dlyap: dimension mismatch");
  if (spectral_radius(a_tilde) >= 1.0)
    throw UnstableArgumentError("solve_dlyap: spectral radius >= 1");
  Matrix op = detail::lyap_operator(a_tilde);
  Vector vec_q = Eigen::Map<const Vector>(q.data(), n * n);
  Vector vec_x = op.partialPivLu().solve(vec_q);
  Matrix x = Eigen::Map<const Matrix>(vec_x.data(), n, n);
  return 0.5 * (x + x.transpose());
}

/// || (I - At' (x) At')^{-1} ||_2 * ||Q||_F, an upper bound on the
/// Frobenius norm of the discrete Lyapunov solution.
inline double lyap_norm_bound(const Matrix& a_tilde, const Matrix& q) {
  if (spectral_radius(a_tilde) >= 1.0)
    throw UnstableArgumentError("lyap_norm_bound: spectral radius >= 1");
  Matrix inv_op = detail::lyap_operator(a_tilde).inverse();
  return spectral_norm(inv_op) * q.norm();
}

/// ||dP||_F <= ||(I - At' (x) At')^{-1}||_2 * ||R||_F * ||dK||_F^2
/// for the Lyapunov-solution perturbation near a Riccati solution.
inline double riccati_sensitivity_bound(const Matrix& a_tilde, const Matrix& r,
                                        const Matrix& delta_k) {
  if (spectral_radius(a_tilde) >= 1.0)
    throw UnstableArgumentError("riccati_sensitivity_bound: unstable matrix");
  Matrix inv_op = detail::lyap_operator(a_tilde).inverse();
  const double dk = delta_k.norm();
  return spectral_norm(inv_op) * r.norm() * dk * dk;
}

struct GainSolution {
  Matrix P;                // Riccati solution, symmetric positive definite
  Matrix K;                // feedback gain, u = K x
  double closed_loop_rho;  // rho(A + B K)
  int iterations;
  double residual;         // Frobenius norm of the Riccati defect
};

/// Fixed-point iteration of the Riccati map starting from P = Q.
/// Throws DareFailure on non-convergence or an unstable closed loop.
inline GainSolution solve_dare(const Matrix& A, const Matrix& B,
                               const Matrix& Q, const Matrix& R,
                               double tol = 1e-12, int max_iter = 100000) {
  const int n = static_cast<int>(A.rows());
  const int p = static_cast<int>(B.cols());
  require(A.rows() == A.cols() && B.rows() == n && Q.rows() == n &&
              Q.cols() == n && R.rows() == p && R.cols() == p,
          "solve_dare: dimension mismatch");

  Matrix P = Q;
  int iter = 0;
  for (; iter < max_iter; ++iter) {
    Matrix BtP = B.transpose() * P;
    Matrix G = (R + BtP * B).ldlt().solve(BtP * A);
    Matrix next = Q + A.transpose() * P * A - (BtP * A).transpose() * G;
    next = 0.5 * (next + next.transpose());
    const double change = (next - P).norm() / (1.0 + next.norm());
    P = next;
    if (change < tol) break;
  }
  if (iter >= max_iter)
    throw DareFailure("solve_dare: no convergence in max_iter iterations");

  Matrix BtP = B.transpose() * P;
  Matrix K = -(R + BtP * B).ldlt().solve(BtP * A);
  const double rho = spectral_radius(A + B * K);
  if (rho >= 1.0)
    throw DareFailure("solve_dare: closed loop not stable");

  Matrix defect = Q + A.transpose() * P * A + (BtP * A).transpose() * K - P;
  return GainSolution{P, K, rho, iter + 1, defect.norm()};
}

/// Analytic cost Tr(W P_K) of the linear feedback u = K x, where P_K
/// solves the closed-loop Lyapunov equation with weight Q + K' R K.
/// Throws UnstableArgumentError when rho(A + B K) >= 1, the analytic
/// marker of a destabilizing policy.
inline double policy_cost(const Matrix& A, const Matrix& B, const Matrix& Q,
                          const Matrix& R, const Matrix& W, const Matrix& K) {
  Matrix a_cl = A + B * K;
  if (spectral_radius(a_cl) >= 1.0)
    throw UnstableArgumentError("policy_cost: destabilizing gain");
  Matrix P_K = solve_dlyap(a_cl, Q + K.transpose() * R * K);
  return (W * P_K).trace();
}

}  // namespace safelqr

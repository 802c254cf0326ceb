#pragma once

#include "safelqr/common.hpp"
#include "safelqr/control_algebra.hpp"

#include <stdexcept>
#include <utility>
#include <vector>

namespace safelqr {

class DegenerateProbesError : public std::runtime_error {
 public:
  explicit DegenerateProbesError(const std::string& msg)
      : std::runtime_error(msg) {}
};

/// Block lower-triangular Toeplitz map from stacked inputs to stacked
/// zero-initial-state responses: block row i (1-based) is
/// [H_{i-1}, H_{i-2}, ..., H_0, 0, ..., 0], so row i of T * U^v equals
/// x~_i = sum_{t=0}^{i-1} H_t u_{i-1-t}, the response at time i. With
/// this indexing the stacks satisfy X1^h = A X0^h + B U^h exactly when
/// the H are exact Markov parameters.
inline Matrix block_toeplitz(const std::vector<Matrix>& H) {
  require(!H.empty(), "block_toeplitz: empty parameter list");
  const int n = static_cast<int>(H.front().rows());
  const int p = static_cast<int>(H.front().cols());
  const int m = static_cast<int>(H.size());
  for (const auto& h : H)
    require(h.rows() == n && h.cols() == p,
            "block_toeplitz: inconsistent block shapes");
  Matrix T = Matrix::Zero(m * n, m * p);
  for (int i = 1; i <= m; ++i)
    for (int j = 0; j < i; ++j)
      T.block((i - 1) * n, j * p, n, p) = H[i - 1 - j];
  return T;
}

/// Virtual-rollout least squares: drives N random input trajectories
/// through the impulse-response model and regresses
/// [Bhat Ahat] = X1^h pinv([U^h; X0^h]). Probes are redrawn up to
/// 5 times if the stacked regressor loses row rank.
inline std::pair<Matrix, Matrix> reconstruct(const std::vector<Matrix>& H,
                                             int N, Rng& rng) {
  const int m = static_cast<int>(H.size());
  const int n = static_cast<int>(H.front().rows());
  const int p = static_cast<int>(H.front().cols());
  require(N >= 1 && static_cast<long>(N) * m >= n + p,
          "reconstruct: not enough probe columns");

  const Matrix T = block_toeplitz(H);
  for (int attempt = 0; attempt < 5; ++attempt) {
    Matrix U_v(m * p, N);
    for (int i = 0; i < m * p; ++i)
      U_v.row(i) = standard_normal(rng, N).transpose();
    Matrix X1_v = T * U_v;  // m*n x N, block i holds x~_i

    Matrix U_h(p, m * N);
    Matrix X1_h(n, m * N);
    Matrix X0_h = Matrix::Zero(n, m * N);
    for (int i = 0; i < m; ++i) {
      U_h.middleCols(i * N, N) = U_v.middleRows(i * p, p);
      X1_h.middleCols(i * N, N) = X1_v.middleRows(i * n, n);
      if (i > 0)
        X0_h.middleCols(i * N, N) = X1_v.middleRows((i - 1) * n, n);
    }

    Matrix regressor(p + n, m * N);
    regressor.topRows(p) = U_h;
    regressor.bottomRows(n) = X0_h;

    Eigen::BDCSVD<Matrix> svd(regressor);
    const auto& sv = svd.singularValues();
    if (sv(0) > 0.0 && sv(sv.size() - 1) > 1e-8 * sv(0)) {
      Matrix BA = X1_h * pseudo_inverse(regressor);
      return {BA.rightCols(n), BA.leftCols(p)};  // (Ahat, Bhat)
    }
    // Rank failure only happens for degenerate H (e.g. all zero with
    // n > 0 rows of X0^h identically zero); for all-zero H the
    // pseudo-inverse route still yields the zero estimate, so fall
    // through to redraw.
  }
  // Degenerate after retries: when H is identically zero the stacked
  // states vanish and the regression over the input rows alone is
  // still well posed.
  bool all_zero = true;
  for (const auto& h : H)
    if (h.norm() > 0.0) all_zero = false;
  if (all_zero) return {Matrix::Zero(n, n), Matrix::Zero(n, p)};
  throw DegenerateProbesError(
      "reconstruct: probe battery rank-deficient after 5 redraws");
}

inline std::pair<Matrix, Matrix> reconstruct(const std::vector<Matrix>& H,
                                             int N, std::uint64_t seed) {
  Rng rng(seed);
  return reconstruct(H, N, rng);
}

}  // namespace safelqr

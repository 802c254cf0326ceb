#pragma once

#include "safelqr/common.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace safelqr {

class UnavailableEstimateError : public std::runtime_error {
 public:
  explicit UnavailableEstimateError(const std::string& msg)
      : std::runtime_error(msg) {}
};

/// Online cross-correlation estimator of the Markov parameters
/// H_tau = A^tau B from states and past exploration draws:
///
///   Hhat_{k,tau} = 1/(k-tau) * sum_{i=tau+1..k} (i-tau)^beta
///                  [x_i - sum_{t<tau} Hhat_{k,t} u~_{i-t-1}] zeta_{i-tau-1}'
///
/// maintained as running sums so each ingest costs O((n+p)^2) matrix
/// work independent of k.
class MarkovEstimator {
 public:
  MarkovEstimator(int n, int p, double beta)
      : n_(n), p_(p), m_(n + p), beta_(beta) {
    require(n >= 1 && p >= 1, "MarkovEstimator: bad dimensions");
    cross_xz_.assign(m_, Matrix::Zero(n_, p_));
    cross_uz_.resize(m_);
    for (int tau = 0; tau < m_; ++tau)
      cross_uz_[tau].assign(tau, Matrix::Zero(p_, p_));
    zeta_buf_.assign(m_, Vector::Zero(p_));
    u_buf_.assign(m_, Vector::Zero(p_));
  }

  int horizon() const { return m_; }
  long steps() const { return k_; }

  /// Feeds the state observed at step i = steps()+1 together with the
  /// exploration draw and exploitation input applied at step i-1.
  void ingest(const Vector& x, const Vector& zeta_prev,
              const Vector& u_tilde_prev) {
    require(x.size() == n_ && zeta_prev.size() == p_ &&
                u_tilde_prev.size() == p_,
            "MarkovEstimator::ingest: dimension mismatch");
    head_ = (head_ + m_ - 1) % m_;
    zeta_buf_[head_] = zeta_prev;
    u_buf_[head_] = u_tilde_prev;
    k_ += 1;

    const int tau_max = static_cast<int>(std::min<long>(k_, m_));
    for (int tau = 0; tau < tau_max; ++tau) {
      const double w = std::pow(static_cast<double>(k_ - tau), beta_);
      const Vector& zeta = recent_zeta(tau);  // zeta_{i - tau - 1}
      cross_xz_[tau].noalias() += w * x * zeta.transpose();
      for (int t = 0; t < tau; ++t)
        cross_uz_[tau][t].noalias() += w * recent_u(t) * zeta.transpose();
    }
  }

  /// Estimate for a single lag; needs k - tau >= 1.
  Matrix estimate(int tau) const {
    require(tau >= 0 && tau < m_, "MarkovEstimator::estimate: bad lag");
    if (k_ - tau < 1)
      throw UnavailableEstimateError(
          "MarkovEstimator: no data yet for lag " + std::to_string(tau));
    return estimate_upto(tau + 1).back();
  }

  /// All m = n+p estimates, computed in increasing lag order.
  std::vector<Matrix> estimate_all() const {
    if (k_ < m_)
      throw UnavailableEstimateError(
          "MarkovEstimator: need at least n+p ingested steps");
    return estimate_upto(m_);
  }

 private:
  const Vector& recent_zeta(int j) const {
    return zeta_buf_[(head_ + j) % m_];
  }
  const Vector& recent_u(int j) const { return u_buf_[(head_ + j) % m_]; }

  std::vector<Matrix> estimate_upto(int count) const {
    std::vector<Matrix> H;
    H.reserve(count);
    for (int tau = 0; tau < count; ++tau) {
      Matrix acc = cross_xz_[tau];
      for (int t = 0; t < tau; ++t) acc.noalias() -= H[t] * cross_uz_[tau][t];
      H.push_back(acc / static_cast<double>(k_ - tau));
    }
    return H;
  }

  int n_, p_, m_;
  double beta_;
  long k_ = 0;
  int head_ = 0;
  std::vector<Matrix> cross_xz_;               // per tau, n x p
  std::vector<std::vector<Matrix>> cross_uz_;  // per (tau, t < tau), p x p
  std::vector<Vector> zeta_buf_;
  std::vector<Vector> u_buf_;
};

/// Full trajectory data for the brute-force estimator: xs[i-1] is the
/// state at step i (i = 1..k), zetas[j] and u_tildes[j] the draws and
/// exploitation inputs applied at step j (j = 0..k-1).
struct EstimatorHistory {
  std::vector<Vector> xs;
  std::vector<Vector> zetas;
  std::vector<Vector> u_tildes;
};

/// Literal nested-sum evaluation, with lower-lag estimates recomputed
/// recursively. Quadratic in the history length; oracle counterpart of
/// MarkovEstimator's running sums.
inline std::vector<Matrix> direct_estimate_all(const EstimatorHistory& hist,
                                               int count, double beta) {
  const long k = static_cast<long>(hist.xs.size());
  require(k >= count, "direct_estimate: history shorter than requested lags");
  const int n = static_cast<int>(hist.xs.front().size());
  const int p = static_cast<int>(hist.zetas.front().size());

  std::vector<Matrix> H;
  H.reserve(count);
  for (int tau = 0; tau < count; ++tau) {
    Matrix acc = Matrix::Zero(n, p);
    for (long i = tau + 1; i <= k; ++i) {
      Vector corrected = hist.xs[i - 1];
      for (int t = 0; t < tau; ++t) corrected -= H[t] * hist.u_tildes[i - t - 1];
      acc += std::pow(static_cast<double>(i - tau), beta) * corrected *
             hist.zetas[i - tau - 1].transpose();
    }
    H.push_back(acc / static_cast<double>(k - tau));
  }
  return H;
}

inline Matrix direct_estimate(const EstimatorHistory& hist, int tau,
                              double beta) {
  return direct_estimate_all(hist, tau + 1, beta).back();
}

}  // namespace safelqr

#pragma once

#include "safelqr/common.hpp"

#include <cmath>

namespace safelqr {

/// Internal state of the switching policy: number of remaining
/// "non-action" steps.
struct PolicyState {
  long safe_steps = 0;
};

struct PolicyDecision {
  Vector u;        // applied input, u = u_tilde + scale * zeta
  Vector u_tilde;  // exploitation component, K x or 0
  Vector zeta;     // exploration draw, N(0, I_p)
  PolicyState next;
};

/// One step of the safe switching policy with time-growing threshold
/// log k and non-action duration floor(log k) + 1 (the trigger step
/// itself counts). Thresholds use natural log; ||K|| is the spectral
/// norm and ||x|| the Euclidean norm. While safe_steps > 0 the
/// threshold test is not re-evaluated.
inline PolicyDecision safe_policy_step(const Vector& x, PolicyState state,
                                       long k, const Matrix& K, double K_norm,
                                       double beta, Rng& rng) {
  require(beta > 0.0 && beta < 0.5, "safe_policy_step: beta outside (0, 1/2)");
  require(k >= 1, "safe_policy_step: step index must be >= 1");
  const int p = static_cast<int>(K.rows());

  PolicyDecision d;
  if (state.safe_steps > 0) {
    d.u_tilde = Vector::Zero(p);
    d.next.safe_steps = state.safe_steps - 1;
  } else {
    const double threshold = std::log(static_cast<double>(k));
    if (std::max(K_norm, x.norm()) >= threshold) {
      d.u_tilde = Vector::Zero(p);
      d.next.safe_steps = static_cast<long>(std::floor(threshold));
    } else {
      d.u_tilde = K * x;
      d.next.safe_steps = 0;
    }
  }
  d.zeta = standard_normal(rng, p);
  d.u = d.u_tilde + std::pow(static_cast<double>(k + 1), -beta) * d.zeta;
  return d;
}

inline PolicyDecision safe_policy_step(const Vector& x, PolicyState state,
                                       long k, const Matrix& K, double beta,
                                       Rng& rng) {
  return safe_policy_step(x, state, k, K, spectral_norm(K), beta, rng);
}

/// Warm-up input u = (k+1)^{-beta} zeta with no exploitation term.
inline PolicyDecision warmup_input(long k, int p, double beta, Rng& rng) {
  require(k >= 0, "warmup_input: negative step index");
  PolicyDecision d;
  d.u_tilde = Vector::Zero(p);
  d.zeta = standard_normal(rng, p);
  d.u = std::pow(static_cast<double>(k + 1), -beta) * d.zeta;
  d.next.safe_steps = 0;
  return d;
}

/// Plain linear feedback u = K x. With explore=true this is the naive
/// certainty-equivalence input K x + k^{-beta} zeta.
inline PolicyDecision linear_policy_step(const Vector& x, long k,
                                         const Matrix& K, bool explore,
                                         double beta, Rng& rng) {
  const int p = static_cast<int>(K.rows());
  PolicyDecision d;
  d.u_tilde = K * x;
  d.zeta = standard_normal(rng, p);
  if (explore) {
    require(k >= 1, "linear_policy_step: explore mode needs k >= 1");
    d.u = d.u_tilde + std::pow(static_cast<double>(k), -beta) * d.zeta;
  } else {
    d.u = d.u_tilde;
  }
  d.next.safe_steps = 0;
  return d;
}

/// Fixed-parameter switching policy with constant threshold M and
/// non-action duration t, used by the bound validators. The hot-path
/// overload takes the precomputed gain norm.
inline PolicyDecision fixed_switching_step(const Vector& x, PolicyState state,
                                           const Matrix& K, double K_norm,
                                           double M, long t, Rng& rng) {
  require(t >= 1, "fixed_switching_step: duration must be >= 1");
  const int p = static_cast<int>(K.rows());
  PolicyDecision d;
  if (state.safe_steps > 0) {
    d.u_tilde = Vector::Zero(p);
    d.next.safe_steps = state.safe_steps - 1;
  } else if (std::max(K_norm, x.norm()) >= M) {
    d.u_tilde = Vector::Zero(p);
    d.next.safe_steps = t - 1;
  } else {
    d.u_tilde = K * x;
    d.next.safe_steps = 0;
  }
  d.zeta = Vector::Zero(p);
  d.u = d.u_tilde;
  return d;
}

inline PolicyDecision fixed_switching_step(const Vector& x, PolicyState state,
                                           const Matrix& K, double M, long t,
                                           Rng& rng) {
  return fixed_switching_step(x, state, K, spectral_norm(K), M, t, rng);
}

}  // namespace safelqr

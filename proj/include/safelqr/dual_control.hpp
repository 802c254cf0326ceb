#pragma once

#include "safelqr/common.hpp"
#include "safelqr/control_algebra.hpp"
#include "safelqr/lti_system.hpp"
#include "safelqr/markov_inference.hpp"
#include "safelqr/safe_policy.hpp"
#include "safelqr/sysid_reconstruction.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace safelqr {

struct DualControlConfig {
  double beta = 0.25;
  long total_steps = 10000;
  std::vector<long> schedule;  // empty => floor(10^{j/2}) grid
  int n_probes = 50;
  std::uint64_t seed = 0;
  long record_stride = 1;
  long warmup_steps = -1;  // -1 => n + p
  int snapshots_per_decade = 16;
  bool sweep_mode = false;  // admits beta = 0 and beta = 1/2
  std::optional<Matrix> frozen_gain;  // skip estimation-driven updates
};

/// Gain update instants floor(10^{j/2}), j = 0, 1, ...
inline std::vector<long> default_gain_schedule(long total_steps) {
  std::vector<long> ks;
  for (int j = 0;; ++j) {
    const long k = static_cast<long>(std::floor(std::pow(10.0, j / 2.0)));
    if (k > total_steps) break;
    if (ks.empty() || k != ks.back()) ks.push_back(k);
  }
  return ks;
}

inline void validate_config(const DualControlConfig& cfg, const LinearSystem& sys) {
  if (cfg.sweep_mode)
    require(cfg.beta >= 0.0 && cfg.beta <= 0.5,
            "config: beta outside [0, 1/2]");
  else
    require(cfg.beta > 0.0 && cfg.beta < 0.5,
            "config: beta outside (0, 1/2); use sweep mode for the endpoints");
  require(cfg.total_steps >= sys.n + sys.p,
          "config: total_steps must be >= n + p");
  require(cfg.record_stride >= 1, "config: record_stride must be positive");
  require(cfg.n_probes >= 1, "config: n_probes must be positive");
  for (std::size_t i = 1; i < cfg.schedule.size(); ++i)
    require(cfg.schedule[i] > cfg.schedule[i - 1],
            "config: schedule must be strictly increasing");
}

struct GainUpdate {
  Matrix K;
  Matrix Ahat;
  Matrix Bhat;
  bool fallback = false;
};

/// Certainty-equivalent gain synthesis from Markov-parameter estimates.
/// Reconstruction or Riccati failures fall back to K = 0 (safe for a
/// strictly stable plant) and are flagged, never thrown.
inline GainUpdate update_gain(const std::vector<Matrix>& H, const Matrix& Q,
                              const Matrix& R, int n_probes,
                              std::uint64_t probe_seed) {
  const int n = static_cast<int>(H.front().rows());
  const int p = static_cast<int>(H.front().cols());
  GainUpdate out;
  out.K = Matrix::Zero(p, n);
  out.Ahat = Matrix::Zero(n, n);
  out.Bhat = Matrix::Zero(n, p);
  try {
    auto [Ahat, Bhat] = reconstruct(H, n_probes, probe_seed);
    out.Ahat = Ahat;
    out.Bhat = Bhat;
    GainSolution sol = solve_dare(Ahat, Bhat, Q, R);
    out.K = sol.K;
  } catch (const DegenerateProbesError&) {
    out.fallback = true;
  } catch (const DareFailure&) {
    out.fallback = true;
  }
  return out;
}

struct Snapshot {
  long k = 0;
  std::vector<double> H_err;  // Frobenius error per lag
  double A_err = 0.0;         // spectral-norm errors vs the true system
  double B_err = 0.0;
  double K_err = 0.0;
  double cost = 0.0;          // Tr(W P_Khat) when the estimate stabilizes
  bool cost_finite = false;
  int gain_id = 0;
};

struct RunSummary {
  bool diverged = false;
  long diverged_step = -1;
  int fallback_count = 0;
  int gain_updates = 0;
  double max_state_norm = 0.0;
  double max_u_tilde_norm = 0.0;
  bool u_tilde_guard_ok = true;  // ||u~_k|| <= (ln k)^2 at every step
  Matrix final_K, final_Ahat, final_Bhat;
};

struct RunResult {
  TrajectoryRecord trajectory;  // thinned by record_stride
  std::vector<Snapshot> snapshots;
  RunSummary summary;
};

namespace detail {

inline std::vector<long> snapshot_grid(long total_steps, int per_decade,
                                       const std::vector<long>& schedule) {
  per_decade = std::min(per_decade, 128);
  std::vector<long> ks(schedule);
  if (per_decade > 0) {
    const double decades = std::log10(static_cast<double>(total_steps));
    const int count = static_cast<int>(decades * per_decade) + 1;
    for (int j = 0; j <= count; ++j) {
      const long k = static_cast<long>(
          std::llround(std::pow(10.0, static_cast<double>(j) / per_decade)));
      if (k >= 1 && k <= total_steps) ks.push_back(k);
    }
  }
  ks.push_back(total_steps);
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  return ks;
}

// Algorithm 2 branch order without the beta range check, so the sweep
// endpoints beta = 0 and beta = 1/2 can be exercised.
inline PolicyDecision safe_decision(const Vector& x, PolicyState state, long k,
                                    const Matrix& K, double K_norm,
                                    double beta, Rng& rng) {
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

struct LoopMode {
  bool safe = true;           // safe switching vs naive CE
  bool throw_on_diverge = true;
};

inline RunResult run_loop(const LinearSystem& sys,
                          const DualControlConfig& cfg, LoopMode mode) {
  validate_config(cfg, sys);
  const int n = sys.n;
  const int p = sys.p;
  const int m = n + p;
  // At least one warm-up step: the switching threshold log k is only
  // meaningful from k = 1.
  const long warmup =
      cfg.warmup_steps < 0 ? m : std::max<long>(1, cfg.warmup_steps);
  const std::vector<long> schedule =
      cfg.schedule.empty() ? default_gain_schedule(cfg.total_steps)
                           : cfg.schedule;
  const std::vector<long> snap_ks = snapshot_grid(
      cfg.total_steps, cfg.snapshots_per_decade, schedule);

  Rng rng(cfg.seed);
  GaussianSampler init(sys.X0);
  GaussianSampler noise(sys.W);
  MarkovEstimator estimator(n, p, cfg.beta);
  const std::vector<Matrix> H_true = true_markov(sys, m);

  // Reference gain for snapshot errors; the true system is available
  // because this is a simulation harness.
  Matrix K_star;
  try {
    K_star = solve_dare(sys.A, sys.B, sys.Q, sys.R).K;
  } catch (const DareFailure&) {
    K_star = Matrix::Zero(p, n);
  }

  RunResult res;
  RunSummary& sum = res.summary;
  Matrix K = Matrix::Zero(p, n);
  double K_norm = 0.0;
  int gain_id = 0;
  if (cfg.frozen_gain) {
    K = *cfg.frozen_gain;
    K_norm = spectral_norm(K);
  }
  sum.final_K = K;
  sum.final_Ahat = Matrix::Zero(n, n);
  sum.final_Bhat = Matrix::Zero(n, p);

  Vector x = init.draw(rng);
  PolicyState xi;
  Vector prev_zeta, prev_u_tilde;
  auto sched_it = schedule.begin();
  auto snap_it = snap_ks.begin();

  for (long k = 0; k < cfg.total_steps; ++k) {
    if (!x.allFinite() || x.norm() > kDivergenceThreshold) {
      sum.diverged = true;
      sum.diverged_step = k;
      if (mode.throw_on_diverge)
        throw DivergedError(k, "run_safe: state diverged at step " +
                                   std::to_string(k));
      break;
    }
    sum.max_state_norm = std::max(sum.max_state_norm, x.norm());

    if (k >= 1) estimator.ingest(x, prev_zeta, prev_u_tilde);

    while (sched_it != schedule.end() && *sched_it < k) ++sched_it;
    const bool update_now = sched_it != schedule.end() && *sched_it == k &&
                            k >= warmup && estimator.steps() >= m &&
                            !cfg.frozen_gain;
    if (update_now) {
      GainUpdate gu =
          update_gain(estimator.estimate_all(), sys.Q, sys.R, cfg.n_probes,
                      derive_seed(cfg.seed, 0x70726f6265ULL,
                                  static_cast<std::uint64_t>(k)));
      K = gu.K;
      K_norm = spectral_norm(K);
      gain_id += 1;
      sum.gain_updates += 1;
      if (gu.fallback) sum.fallback_count += 1;
      sum.final_K = K;
      sum.final_Ahat = gu.Ahat;
      sum.final_Bhat = gu.Bhat;
    }

    while (snap_it != snap_ks.end() && *snap_it < k) ++snap_it;
    if (snap_it != snap_ks.end() && *snap_it == k &&
        estimator.steps() >= m) {
      Snapshot snap;
      snap.k = k;
      snap.gain_id = gain_id;
      const auto H = estimator.estimate_all();
      for (int tau = 0; tau < m; ++tau)
        snap.H_err.push_back((H[tau] - H_true[tau]).norm());
      snap.A_err = spectral_norm(sum.final_Ahat - sys.A);
      snap.B_err = spectral_norm(sum.final_Bhat - sys.B);
      snap.K_err = spectral_norm(K - K_star);
      try {
        snap.cost = policy_cost(sys, K);
        snap.cost_finite = true;
      } catch (const UnstableArgumentError&) {
        snap.cost_finite = false;
      }
      res.snapshots.push_back(std::move(snap));
    }

    PolicyDecision d;
    if (k < warmup) {
      d = warmup_input(k, p, cfg.beta, rng);
    } else if (mode.safe) {
      d = safe_decision(x, xi, k, K, K_norm, cfg.beta, rng);
    } else {
      d = linear_policy_step(x, k, K, /*explore=*/true, cfg.beta, rng);
    }
    sum.max_u_tilde_norm = std::max(sum.max_u_tilde_norm, d.u_tilde.norm());
    if (k >= 1) {
      const double lk = std::log(static_cast<double>(k));
      if (d.u_tilde.norm() > lk * lk + 1e-12) sum.u_tilde_guard_ok = false;
    }

    if (k % cfg.record_stride == 0)
      res.trajectory.steps.push_back(
          {k, x, d.u, d.u_tilde, d.zeta, xi.safe_steps, gain_id});

    prev_zeta = d.zeta;
    prev_u_tilde = d.u_tilde;
    xi = d.next;
    x = step(sys, x, d.u, noise.draw(rng));
  }
  return res;
}

}  // namespace detail

/// Full dual-control loop: warm-up, per-step estimator ingest, gain
/// synthesis at scheduled instants, and the safe switching policy.
/// Divergence is an error here; the safe policy must prevent it.
inline RunResult run_safe(const LinearSystem& sys,
                          const DualControlConfig& cfg) {
  return detail::run_loop(sys, cfg, {/*safe=*/true, /*throw=*/true});
}

/// Naive certainty-equivalence baseline: u_k = Khat_k x_k + k^{-beta}
/// zeta_k with no switching guard. Divergence is reported in the
/// summary, not thrown.
inline RunResult run_certainty_equivalence(const LinearSystem& sys,
                                           const DualControlConfig& cfg) {
  return detail::run_loop(sys, cfg, {/*safe=*/false, /*throw=*/false});
}

}  // namespace safelqr

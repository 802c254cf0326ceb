#pragma once

#include "safelqr/common.hpp"
#include "safelqr/control_algebra.hpp"
#include "safelqr/safe_policy.hpp"

#include <Eigen/Eigenvalues>

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <vector>

namespace safelqr {

constexpr double kDivergenceThreshold = 1e12;

/// Thrown when a simulated state leaves the finite range; carries the
/// step index at which it happened.
class DivergedError : public std::runtime_error {
 public:
  DivergedError(long step, const std::string& msg)
      : std::runtime_error(msg), step(step) {}
  long step;
};

/// Plant, noise, and cost model:
///   x_{k+1} = A x_k + B u_k + w_k,  x_0 ~ N(0, X0),  w_k ~ N(0, W),
/// with quadratic stage cost x'Qx + u'Ru.
struct LinearSystem {
  Matrix A, B, W, X0, Q, R;
  int n = 0;
  int p = 0;
};

namespace detail {

inline bool is_symmetric(const Matrix& m, double tol = 1e-10) {
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol;
}

inline double min_eigenvalue_sym(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

}  // namespace detail

inline void validate_system(const LinearSystem& sys) {
  const int n = sys.n;
  const int p = sys.p;
  require(n >= 1 && p >= 1, "system: dimensions must be positive");
  require(sys.A.rows() == n && sys.A.cols() == n, "system: A must be n x n");
  require(sys.B.rows() == n && sys.B.cols() == p, "system: B must be n x p");
  require(sys.W.rows() == n && sys.W.cols() == n, "system: W must be n x n");
  require(sys.X0.rows() == n && sys.X0.cols() == n, "system: X0 must be n x n");
  require(sys.Q.rows() == n && sys.Q.cols() == n, "system: Q must be n x n");
  require(sys.R.rows() == p && sys.R.cols() == p, "system: R must be p x p");
  require(detail::is_symmetric(sys.W), "system: W not symmetric");
  require(detail::is_symmetric(sys.X0), "system: X0 not symmetric");
  require(detail::is_symmetric(sys.Q), "system: Q not symmetric");
  require(detail::is_symmetric(sys.R), "system: R not symmetric");
  require(detail::min_eigenvalue_sym(sys.W) >= -1e-10, "system: W not PSD");
  require(detail::min_eigenvalue_sym(sys.X0) >= -1e-10, "system: X0 not PSD");
  require(detail::min_eigenvalue_sym(sys.Q) > 0.0, "system: Q not PD");
  require(detail::min_eigenvalue_sym(sys.R) > 0.0, "system: R not PD");
  if (spectral_radius(sys.A) >= 1.0)
    throw UnstableArgumentError(
        "system: open-loop A must be strictly stable (rho(A) < 1)");
}

inline LinearSystem make_system(Matrix A, Matrix B, Matrix W, Matrix X0,
                                Matrix Q, Matrix R) {
  LinearSystem sys;
  sys.n = static_cast<int>(A.rows());
  sys.p = static_cast<int>(B.cols());
  sys.A = std::move(A);
  sys.B = std::move(B);
  sys.W = std::move(W);
  sys.X0 = std::move(X0);
  sys.Q = std::move(Q);
  sys.R = std::move(R);
  validate_system(sys);
  return sys;
}

inline Vector step(const LinearSystem& sys, const Vector& x, const Vector& u,
                   const Vector& w) {
  require(x.size() == sys.n && u.size() == sys.p && w.size() == sys.n,
          "step: dimension mismatch");
  return sys.A * x + sys.B * u + w;
}

/// Square-root factor of a PSD covariance: Cholesky with diagonal
/// jitter 1e-12, eigen-decomposition fallback for semidefinite inputs
/// (negative eigenvalues clamped at 0, tolerance 1e-8).
class GaussianSampler {
 public:
  explicit GaussianSampler(const Matrix& cov) {
    require(cov.rows() == cov.cols(), "GaussianSampler: cov must be square");
    require(detail::is_symmetric(cov, 1e-8), "GaussianSampler: cov asymmetric");
    const int n = static_cast<int>(cov.rows());
    Eigen::LLT<Matrix> llt(cov + 1e-12 * Matrix::Identity(n, n));
    if (llt.info() == Eigen::Success) {
      factor_ = llt.matrixL();
    } else {
      Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
      Vector ev = es.eigenvalues();
      require(ev.minCoeff() >= -1e-8, "GaussianSampler: cov not PSD");
      factor_ = es.eigenvectors() * ev.cwiseMax(0.0).cwiseSqrt().asDiagonal();
    }
  }

  Vector draw(Rng& rng) const {
    return factor_ * standard_normal(rng, static_cast<int>(factor_.cols()));
  }

  const Matrix& factor() const { return factor_; }

 private:
  Matrix factor_;
};

inline Vector sample_gaussian(Rng& rng, const Matrix& cov) {
  return GaussianSampler(cov).draw(rng);
}

struct TrajectoryStep {
  long k = 0;
  Vector x;
  Vector u;
  Vector u_tilde;
  Vector zeta;
  long safe_steps = 0;
  int gain_id = 0;
};

struct TrajectoryRecord {
  std::vector<TrajectoryStep> steps;

  void to_csv(std::ostream& os, bool full_state = false) const {
    os << "k,norm_x,norm_u,safesteps,gain_id";
    if (full_state && !steps.empty()) {
      for (long i = 0; i < steps.front().x.size(); ++i) os << ",x" << i;
      for (long i = 0; i < steps.front().u.size(); ++i) os << ",u" << i;
    }
    os << "\n";
    for (const auto& s : steps) {
      os << s.k << ',' << s.x.norm() << ',' << s.u.norm() << ','
         << s.safe_steps << ',' << s.gain_id;
      if (full_state) {
        for (long i = 0; i < s.x.size(); ++i) os << ',' << s.x(i);
        for (long i = 0; i < s.u.size(); ++i) os << ',' << s.u(i);
      }
      os << "\n";
    }
  }
};

/// A stateful policy maps (x, xi, k) to a PolicyDecision.
using StatefulPolicy =
    std::function<PolicyDecision(const Vector&, PolicyState, long, Rng&)>;

/// Closed-loop rollout: draws x0 ~ N(0, X0), iterates the dynamics for
/// `steps` steps and records every step. Throws DivergedError when the
/// state exceeds the divergence threshold or becomes non-finite.
inline TrajectoryRecord simulate(const LinearSystem& sys,
                                 const StatefulPolicy& policy, long steps,
                                 Rng& rng) {
  require(steps >= 1, "simulate: steps must be >= 1");
  GaussianSampler init(sys.X0);
  GaussianSampler noise(sys.W);

  TrajectoryRecord rec;
  rec.steps.reserve(static_cast<std::size_t>(steps));
  Vector x = init.draw(rng);
  PolicyState xi;
  for (long k = 0; k < steps; ++k) {
    if (!x.allFinite() || x.norm() > kDivergenceThreshold)
      throw DivergedError(k, "simulate: state diverged at step " +
                                 std::to_string(k));
    PolicyDecision d = policy(x, xi, k, rng);
    rec.steps.push_back({k, x, d.u, d.u_tilde, d.zeta, xi.safe_steps, 0});
    x = step(sys, x, d.u, noise.draw(rng));
    xi = d.next;
  }
  return rec;
}

/// A with i.i.d. N(0,1) entries rescaled to the target spectral radius,
/// B i.i.d. N(0,1), W = X0 = Q = I_n, R = I_p.
inline LinearSystem random_stable_system(int n, int p, double target_rho,
                                         Rng& rng) {
  require(n >= 1 && p >= 1, "random_stable_system: bad dimensions");
  require(target_rho > 0.0 && target_rho < 1.0,
          "random_stable_system: target_rho must be in (0, 1)");
  Matrix G(n, n);
  double rho = 0.0;
  do {
    for (int i = 0; i < n; ++i)
      G.row(i) = standard_normal(rng, n).transpose();
    rho = spectral_radius(G);
  } while (rho < 1e-8);
  Matrix B(n, p);
  for (int i = 0; i < n; ++i) B.row(i) = standard_normal(rng, p).transpose();
  return make_system(G * (target_rho / rho), B, Matrix::Identity(n, n),
                     Matrix::Identity(n, n), Matrix::Identity(n, n),
                     Matrix::Identity(p, p));
}

/// Markov parameters [B, AB, A^2 B, ...] of length `count`.
inline std::vector<Matrix> true_markov(const LinearSystem& sys, int count) {
  require(count >= 1, "true_markov: count must be >= 1");
  std::vector<Matrix> H;
  H.reserve(static_cast<std::size_t>(count));
  Matrix power = sys.B;
  for (int i = 0; i < count; ++i) {
    H.push_back(power);
    power = sys.A * power;
  }
  return H;
}

inline double policy_cost(const LinearSystem& sys, const Matrix& K) {
  return policy_cost(sys.A, sys.B, sys.Q, sys.R, sys.W, K);
}

// ---- JSON serialization -------------------------------------------------

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j, int rows, int cols,
                               const std::string& name) {
  require(j.is_array() && static_cast<int>(j.size()) == rows,
          "system file: bad row count for " + name);
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    require(j[i].is_array() && static_cast<int>(j[i].size()) == cols,
            "system file: bad column count for " + name);
    for (int c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

}  // namespace detail

inline nlohmann::json system_to_json(const LinearSystem& sys) {
  nlohmann::json j;
  j["n"] = sys.n;
  j["p"] = sys.p;
  j["A"] = detail::matrix_to_json(sys.A);
  j["B"] = detail::matrix_to_json(sys.B);
  j["W"] = detail::matrix_to_json(sys.W);
  j["X0"] = detail::matrix_to_json(sys.X0);
  j["Q"] = detail::matrix_to_json(sys.Q);
  j["R"] = detail::matrix_to_json(sys.R);
  return j;
}

/// Matrices omitted from the JSON object default to identity.
inline LinearSystem system_from_json(const nlohmann::json& j) {
  require(j.contains("n") && j.contains("p"), "system file: missing n or p");
  const int n = j["n"].get<int>();
  const int p = j["p"].get<int>();
  require(n >= 1 && p >= 1, "system file: dimensions must be positive");
  auto load = [&](const char* key, int r, int c) {
    if (!j.contains(key)) return Matrix(Matrix::Identity(r, c));
    return detail::matrix_from_json(j[key], r, c, key);
  };
  require(j.contains("A"), "system file: missing A");
  require(j.contains("B"), "system file: missing B");
  return make_system(detail::matrix_from_json(j["A"], n, n, "A"),
                     detail::matrix_from_json(j["B"], n, p, "B"),
                     load("W", n, n), load("X0", n, n), load("Q", n, n),
                     load("R", p, p));
}

inline LinearSystem load_system(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open system file: " + path);
  nlohmann::json j;
  in >> j;
  return system_from_json(j);
}

}  // namespace safelqr

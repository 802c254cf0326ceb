#include "safelqr/common.hpp"
#include "safelqr/control_algebra.hpp"
#include "safelqr/lti_system.hpp"
#include "safelqr/markov_inference.hpp"
#include "safelqr/safe_policy.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

using namespace safelqr;

namespace {

// Analytic scalar Riccati oracle for a=0.5, b=1, q=r=1: the positive
// root of p^2 - 0.25 p - 1 = 0 and the induced gain.
constexpr double kScalarP = 1.1327822185373186;
constexpr double kScalarK = -0.2655644370746374;

LinearSystem scalar_system() {
  Matrix one = Matrix::Identity(1, 1);
  Matrix A = 0.5 * one;
  return make_system(A, one, one, one, one, one);
}

}  // namespace

TEST_CASE("spectral_radius on known matrices") {
  Matrix m(2, 2);
  m << 0.25, 1.0, 1.0, 4.25;  // product of the two demo switching maps
  CHECK(spectral_radius(m) == Catch::Approx(2.25 + std::sqrt(5.0)).epsilon(1e-12));
  CHECK(spectral_radius(Matrix::Zero(3, 3)) == 0.0);
  CHECK(spectral_radius(0.5 * Matrix::Identity(4, 4)) == Catch::Approx(0.5));
  CHECK_THROWS_AS(spectral_radius(Matrix::Zero(2, 3)), std::invalid_argument);
}

TEST_CASE("pseudo_inverse satisfies the Moore-Penrose identities") {
  Rng rng(7);
  Matrix left(6, 4), right(4, 10);
  for (int i = 0; i < 6; ++i) left.row(i) = standard_normal(rng, 4).transpose();
  for (int i = 0; i < 4; ++i) right.row(i) = standard_normal(rng, 10).transpose();
  Matrix m = left * right;  // 6 x 10, rank 4
  Matrix pinv = pseudo_inverse(m);
  CHECK((m * pinv * m - m).norm() < 1e-8);
  CHECK((pinv * m * pinv - pinv).norm() < 1e-8);
  CHECK((m * pinv - (m * pinv).transpose()).norm() < 1e-8);
  CHECK((pinv * m - (pinv * m).transpose()).norm() < 1e-8);

  Matrix inv_id = pseudo_inverse(Matrix::Identity(3, 3));
  CHECK((inv_id - Matrix::Identity(3, 3)).norm() < 1e-12);
}

TEST_CASE("solve_dlyap scalar oracle and residual property") {
  Matrix a(1, 1), q(1, 1);
  a << 0.5;
  q << 1.0;
  CHECK(solve_dlyap(a, q)(0, 0) == Catch::Approx(4.0 / 3.0).epsilon(1e-12));

  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    LinearSystem sys = random_stable_system(4, 1, 0.85, rng);
    Matrix X = solve_dlyap(sys.A, sys.Q);
    Matrix residual = sys.A.transpose() * X * sys.A - X + sys.Q;
    CHECK(residual.norm() < 1e-9);
    CHECK(solve_dlyap(sys.A, sys.Q).norm() <= lyap_norm_bound(sys.A, sys.Q) + 1e-9);
  }

  Matrix unstable(1, 1);
  unstable << 1.5;
  CHECK_THROWS_AS(solve_dlyap(unstable, q), UnstableArgumentError);
}

TEST_CASE("solve_dare scalar oracle") {
  LinearSystem sys = scalar_system();
  GainSolution sol = solve_dare(sys.A, sys.B, sys.Q, sys.R);
  CHECK(std::abs(sol.P(0, 0) - kScalarP) < 1e-10);
  CHECK(std::abs(sol.K(0, 0) - kScalarK) < 1e-10);
  CHECK(sol.residual < 1e-9);
  CHECK(sol.closed_loop_rho < 1.0);
}

TEST_CASE("solve_dare residual and optimality on random systems") {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    LinearSystem sys = random_stable_system(2 + trial % 4, 1 + trial % 2, 0.9, rng);
    GainSolution sol = solve_dare(sys.A, sys.B, sys.Q, sys.R);
    CHECK(sol.residual < 1e-9);

    const double J_star = policy_cost(sys, sol.K);
    for (int j = 0; j < 5; ++j) {
      Matrix dK(sys.p, sys.n);
      for (int i = 0; i < sys.p; ++i)
        dK.row(i) = standard_normal(rng, sys.n).transpose();
      Matrix K = sol.K + 0.05 * dK;
      if (spectral_radius(sys.A + sys.B * K) >= 1.0) continue;
      CHECK(J_star <= policy_cost(sys, K) + 1e-9);
    }
  }
}

TEST_CASE("policy_cost rejects destabilizing gains") {
  LinearSystem sys = scalar_system();
  Matrix K(1, 1);
  K << 1.0;  // a + bK = 1.5
  CHECK_THROWS_AS(policy_cost(sys, K), UnstableArgumentError);
  K << 0.0;
  // Open loop cost: W * q / (1 - a^2) = 4/3.
  CHECK(policy_cost(sys, K) == Catch::Approx(4.0 / 3.0).epsilon(1e-10));
}

TEST_CASE("riccati_sensitivity_bound is quadratic in the perturbation") {
  Rng rng(31);
  LinearSystem sys = random_stable_system(3, 2, 0.8, rng);
  GainSolution sol = solve_dare(sys.A, sys.B, sys.Q, sys.R);
  Matrix dK(sys.p, sys.n);
  for (int i = 0; i < sys.p; ++i)
    dK.row(i) = standard_normal(rng, sys.n).transpose();
  dK /= dK.norm();
  const Matrix closed = sys.A + sys.B * sol.K;
  const double b1 = riccati_sensitivity_bound(closed, sys.R, 0.1 * dK);
  const double b2 = riccati_sensitivity_bound(closed, sys.R, 0.2 * dK);
  CHECK(b2 == Catch::Approx(4.0 * b1).epsilon(1e-9));
}

// ---- safe policy --------------------------------------------------------

TEST_CASE("safe_policy_step branch order and exploration term") {
  Matrix K(1, 2);
  K << 0.1, 0.1;
  const double beta = 0.25;
  Vector x(2);

  SECTION("active counter forces zero exploitation and decrements") {
    x << 100.0, 0.0;  // would trigger, but the counter takes precedence
    Rng rng(1);
    PolicyState st;
    st.safe_steps = 3;
    PolicyDecision d = safe_policy_step(x, st, 50, K, beta, rng);
    CHECK(d.u_tilde.norm() == 0.0);
    CHECK(d.next.safe_steps == 2);
  }

  SECTION("threshold trigger arms floor(log k) further steps") {
    const long k = 100;  // log 100 = 4.605
    x << 10.0, 0.0;
    Rng rng(1);
    PolicyDecision d = safe_policy_step(x, PolicyState{}, k, K, beta, rng);
    CHECK(d.u_tilde.norm() == 0.0);
    CHECK(d.next.safe_steps == 4);  // trigger step itself makes 5 in total
  }

  SECTION("quiet state applies the gain") {
    x << 0.5, 0.5;
    Rng rng(1);
    PolicyDecision d = safe_policy_step(x, PolicyState{}, 100, K, beta, rng);
    CHECK((d.u_tilde - K * x).norm() == 0.0);
    CHECK(d.next.safe_steps == 0);
  }

  SECTION("large gain norm alone triggers") {
    Matrix big = 10.0 * Matrix::Identity(2, 2);
    x << 0.01, 0.0;
    Rng rng(1);
    PolicyDecision d = safe_policy_step(x, PolicyState{}, 100, big, beta, rng);
    CHECK(d.u_tilde.norm() == 0.0);
  }

  SECTION("exploration scale is (k+1)^-beta") {
    x << 0.1, 0.1;
    Rng rng(9);
    const long k = 63;
    PolicyDecision d = safe_policy_step(x, PolicyState{}, k, K, beta, rng);
    Vector explore = d.u - d.u_tilde;
    CHECK((explore - std::pow(64.0, -beta) * d.zeta).norm() < 1e-15);
  }

  SECTION("beta outside (0, 1/2) rejected") {
    x << 0.1, 0.1;
    Rng rng(1);
    CHECK_THROWS_AS(safe_policy_step(x, PolicyState{}, 10, K, 0.0, rng),
                    std::invalid_argument);
    CHECK_THROWS_AS(safe_policy_step(x, PolicyState{}, 10, K, 0.5, rng),
                    std::invalid_argument);
  }
}

TEST_CASE("warmup_input has no exploitation component") {
  Rng rng(3);
  PolicyDecision d = warmup_input(3, 2, 0.25, rng);
  CHECK(d.u_tilde.norm() == 0.0);
  CHECK((d.u - std::pow(4.0, -0.25) * d.zeta).norm() < 1e-15);
}

TEST_CASE("fixed_switching_step honours constant threshold") {
  Matrix K = -0.2 * Matrix::Identity(2, 2);
  Rng rng(5);
  Vector x(2);
  x << 6.0, 0.0;
  PolicyDecision d = fixed_switching_step(x, PolicyState{}, K, 5.0, 3, rng);
  CHECK(d.u_tilde.norm() == 0.0);
  CHECK(d.next.safe_steps == 2);
  x << 1.0, 0.0;
  d = fixed_switching_step(x, PolicyState{}, K, 5.0, 3, rng);
  CHECK((d.u_tilde - K * x).norm() == 0.0);
}

// ---- LTI system ---------------------------------------------------------

TEST_CASE("validate_system rejects malformed inputs") {
  Matrix I2 = Matrix::Identity(2, 2);
  Matrix A = 0.5 * I2;
  CHECK_NOTHROW(make_system(A, I2, I2, I2, I2, I2));

  Matrix asym(2, 2);
  asym << 1.0, 0.5, 0.0, 1.0;
  CHECK_THROWS_AS(make_system(A, I2, asym, I2, I2, I2), std::invalid_argument);
  CHECK_THROWS_AS(make_system(A, I2, I2, I2, Matrix::Zero(2, 2), I2),
                  std::invalid_argument);  // Q must be PD
  CHECK_THROWS_AS(make_system(1.1 * I2, I2, I2, I2, I2, I2),
                  UnstableArgumentError);
  CHECK_THROWS_AS(make_system(A, Matrix::Identity(3, 2), I2, I2, I2, I2),
                  std::invalid_argument);
}

TEST_CASE("GaussianSampler factor reproduces the covariance") {
  Rng rng(17);
  Matrix C(2, 2);
  C << 2.0, 0.5, 0.5, 1.0;
  GaussianSampler sampler(C);
  CHECK((sampler.factor() * sampler.factor().transpose() - C).norm() < 1e-6);

  GaussianSampler zero(Matrix::Zero(2, 2));
  CHECK(zero.draw(rng).norm() < 1e-5);

  Matrix rank1(2, 2);
  rank1 << 1.0, 1.0, 1.0, 1.0;  // PSD, singular
  CHECK_NOTHROW(GaussianSampler(rank1));

  Matrix neg(2, 2);
  neg << 1.0, 0.0, 0.0, -1.0;
  CHECK_THROWS_AS(GaussianSampler(neg), std::invalid_argument);
}

TEST_CASE("simulate records steps and throws on divergence") {
  Rng rng(19);
  LinearSystem sys = scalar_system();
  StatefulPolicy zero = [](const Vector&, PolicyState, long, Rng& r) {
    PolicyDecision d;
    d.u = Vector::Zero(1);
    d.u_tilde = Vector::Zero(1);
    d.zeta = Vector::Zero(1);
    return d;
  };
  TrajectoryRecord rec = simulate(sys, zero, 100, rng);
  REQUIRE(rec.steps.size() == 100);
  CHECK(rec.steps.front().k == 0);
  CHECK(rec.steps.back().k == 99);

  // Unstable feedback on the scalar plant must hit the divergence guard.
  Matrix K(1, 1);
  K << 2.0;
  StatefulPolicy bad = [&K](const Vector& x, PolicyState, long, Rng& r) {
    return linear_policy_step(x, 0, K, false, 0.0, r);
  };
  CHECK_THROWS_AS(simulate(sys, bad, 1000, rng), DivergedError);
}

TEST_CASE("random_stable_system hits the target spectral radius") {
  Rng rng(29);
  for (double target : {0.5, 0.9, 0.99}) {
    LinearSystem sys = random_stable_system(4, 2, target, rng);
    CHECK(spectral_radius(sys.A) == Catch::Approx(target).epsilon(1e-9));
    CHECK(sys.n == 4);
    CHECK(sys.p == 2);
  }
}

TEST_CASE("true_markov lists impulse responses in lag order") {
  Rng rng(37);
  LinearSystem sys = random_stable_system(3, 2, 0.8, rng);
  auto H = true_markov(sys, 4);
  REQUIRE(H.size() == 4);
  CHECK((H[0] - sys.B).norm() == 0.0);
  CHECK((H[1] - sys.A * sys.B).norm() < 1e-14);
  CHECK((H[3] - sys.A * sys.A * sys.A * sys.B).norm() < 1e-12);
}

TEST_CASE("system JSON round trip and defaults") {
  Rng rng(41);
  LinearSystem sys = random_stable_system(3, 2, 0.7, rng);
  LinearSystem back = system_from_json(system_to_json(sys));
  CHECK((back.A - sys.A).norm() < 1e-15);
  CHECK((back.B - sys.B).norm() < 1e-15);
  CHECK((back.R - sys.R).norm() < 1e-15);

  nlohmann::json minimal;
  minimal["n"] = 2;
  minimal["p"] = 1;
  minimal["A"] = {{0.5, 0.0}, {0.0, 0.5}};
  minimal["B"] = {{1.0}, {0.0}};
  LinearSystem m = system_from_json(minimal);
  CHECK((m.W - Matrix::Identity(2, 2)).norm() == 0.0);
  CHECK((m.Q - Matrix::Identity(2, 2)).norm() == 0.0);

  minimal.erase("B");
  CHECK_THROWS_AS(system_from_json(minimal), std::invalid_argument);
}

TEST_CASE("trajectory CSV header") {
  TrajectoryRecord rec;
  TrajectoryStep st;
  st.k = 0;
  st.x = Vector::Ones(2);
  st.u = Vector::Zero(1);
  st.u_tilde = Vector::Zero(1);
  st.zeta = Vector::Zero(1);
  rec.steps.push_back(st);
  std::ostringstream os;
  rec.to_csv(os);
  CHECK(os.str().rfind("k,norm_x,norm_u,safesteps,gain_id\n", 0) == 0);
}

// ---- Markov estimator ---------------------------------------------------

namespace {

/// Rolls the plant under exploration inputs, feeding the recursive
/// estimator and the brute-force history in lockstep.
void roll(const LinearSystem& sys, long steps, double beta, Rng& rng,
          MarkovEstimator& est, EstimatorHistory& hist) {
  GaussianSampler noise(sys.W);
  Matrix K = -0.1 * Matrix::Ones(sys.p, sys.n);
  Vector x = Vector::Zero(sys.n);
  for (long k = 0; k < steps; ++k) {
    Vector zeta = standard_normal(rng, sys.p);
    Vector u_tilde = (k % 3 == 0) ? Vector(K * x) : Vector(Vector::Zero(sys.p));
    Vector u = u_tilde + std::pow(static_cast<double>(k + 1), -beta) * zeta;
    Vector x_next = step(sys, x, u, noise.draw(rng));
    est.ingest(x_next, zeta, u_tilde);
    hist.xs.push_back(x_next);
    hist.zetas.push_back(zeta);
    hist.u_tildes.push_back(u_tilde);
    x = x_next;
  }
}

}  // namespace

TEST_CASE("recursive estimator matches the brute-force oracle") {
  Rng rng(43);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 2 + trial % 3;
    const int p = 1 + trial % 2;
    const double beta = 0.1 + 0.05 * (trial % 5);
    LinearSystem sys = random_stable_system(n, p, 0.8, rng);
    MarkovEstimator est(n, p, beta);
    EstimatorHistory hist;
    roll(sys, 50 + 37 * trial, beta, rng, est, hist);

    auto rec = est.estimate_all();
    auto direct = direct_estimate_all(hist, n + p, beta);
    REQUIRE(rec.size() == direct.size());
    for (std::size_t tau = 0; tau < rec.size(); ++tau)
      CHECK((rec[tau] - direct[tau]).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("estimator availability rules") {
  MarkovEstimator est(2, 1, 0.25);
  CHECK(est.horizon() == 3);
  CHECK_THROWS_AS(est.estimate(0), UnavailableEstimateError);
  CHECK_THROWS_AS(est.estimate_all(), UnavailableEstimateError);

  Rng rng(47);
  est.ingest(standard_normal(rng, 2), standard_normal(rng, 1),
             Vector::Zero(1));
  CHECK_NOTHROW(est.estimate(0));
  CHECK_THROWS_AS(est.estimate(1), UnavailableEstimateError);
  est.ingest(standard_normal(rng, 2), standard_normal(rng, 1),
             Vector::Zero(1));
  est.ingest(standard_normal(rng, 2), standard_normal(rng, 1),
             Vector::Zero(1));
  CHECK_NOTHROW(est.estimate_all());
  CHECK_THROWS_AS(est.estimate(5), std::invalid_argument);
}

TEST_CASE("estimator converges toward the true Markov parameters") {
  Rng rng(53);
  LinearSystem sys = random_stable_system(2, 1, 0.6, rng);
  MarkovEstimator est(2, 1, 0.25);
  EstimatorHistory hist;
  roll(sys, 20000, 0.25, rng, est, hist);
  auto H = est.estimate_all();
  auto H_true = true_markov(sys, 3);
  // Loose consistency check; the rate itself is covered by the
  // acceptance suite.
  CHECK((H[0] - H_true[0]).norm() < 0.2);
  CHECK((H[1] - H_true[1]).norm() < 0.4);
}

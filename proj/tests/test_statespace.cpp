#include <catch2/catch_amalgamated.hpp>

#include "golf/oracle.hpp"
#include "golf/statespace.hpp"
#include "test_util.hpp"

using namespace golf;
using Catch::Approx;

namespace {

Eigen::MatrixXd dense_cov(KernelFamily f, double gamma, double sigma2,
                          const Eigen::VectorXd& grid) {
  KernelSpec spec;
  spec.family = f;
  spec.range = Eigen::VectorXd::Constant(1, gamma);
  return sigma2 * corr_matrix(spec, grid);
}

}  // namespace

TEST_CASE("markov transition reproduces the kernel cross-covariance") {
  // Cov(z(t + dt), z(t)) = (G W0)(0, 0) must equal sigma2 * K(dt).
  for (double gamma : {0.2, 1.0, 3.7}) {
    for (double dt : {0.01, 0.3, 2.0}) {
      Eigen::VectorXd grid(2);
      grid << 0.0, dt;
      {
        const auto rep = ssm_build(KernelFamily::Matern52, gamma, 2.3, grid);
        const auto& c = std::get<detail::SsmCore<3>>(rep.core);
        const double cross = (c.g[0] * c.w0)(0, 0);
        CHECK(cross == Approx(2.3 * kernel_eval_1d(KernelFamily::Matern52, gamma, dt))
                           .epsilon(1e-12));
      }
      {
        const auto rep = ssm_build(KernelFamily::Exponential, gamma, 2.3, grid);
        const auto& c = std::get<detail::SsmCore<1>>(rep.core);
        const double cross = (c.g[0] * c.w0)(0, 0);
        CHECK(cross == Approx(2.3 * kernel_eval_1d(KernelFamily::Exponential, gamma, dt))
                           .epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("filter operations agree with dense cholesky references") {
  golf::RngStream rng(20240901);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 1 + static_cast<int>(rng.next_u64() % 30);
    const KernelFamily f =
        (trial % 2 == 0) ? KernelFamily::Exponential : KernelFamily::Matern52;
    const double gamma = testutil::log_uniform(rng, 0.05, 5.0);
    const double sigma2 = testutil::log_uniform(rng, 0.1, 10.0);
    const double s0sq = testutil::log_uniform(rng, 1e-4, 1.0);
    const Eigen::VectorXd grid = testutil::random_grid(n, rng);
    const Eigen::VectorXd y = testutil::random_normal_vec(n, rng);
    const Eigen::VectorXd v = testutil::random_normal_vec(n, rng);

    const auto rep = ssm_build(f, gamma, sigma2, grid);
    const Eigen::MatrixXd sig = dense_cov(f, gamma, sigma2, grid);
    Eigen::MatrixXd sig_tilde = sig;
    sig_tilde.diagonal().array() += s0sq;

    INFO("trial " << trial << " n=" << n << " family=" << to_string(f) << " gamma=" << gamma
                  << " sigma2=" << sigma2 << " s0sq=" << s0sq);
    CHECK(kf_loglik(rep, y, s0sq) ==
          Approx(oracle::dense_gp_loglik(sig_tilde, y)).margin(1e-8));
    CHECK(kf_logdet(rep, s0sq) == Approx(oracle::dense_logdet(sig_tilde)).margin(1e-8));
    CHECK(testutil::max_abs_diff(kf_whiten(rep, v, s0sq), oracle::dense_whiten(sig_tilde, v)) <
          1e-8);
    CHECK(testutil::max_abs_diff(kf_color(rep, v, s0sq), oracle::dense_color(sig_tilde, v)) <
          1e-8);
    CHECK(testutil::max_abs_diff(smoother_mean(rep, y, s0sq),
                                 oracle::dense_posterior_mean(sig, s0sq, y)) < 1e-8);
    // Round trips.
    CHECK(testutil::max_abs_diff(kf_whiten(rep, kf_color(rep, v, s0sq), s0sq), v) < 1e-10);
    CHECK(testutil::max_abs_diff(kf_color(rep, kf_whiten(rep, v, s0sq), s0sq), v) < 1e-10);
  }
}

TEST_CASE("predictive variances never drop below the nugget") {
  golf::RngStream rng(5);
  const Eigen::VectorXd grid = testutil::random_grid(40, rng);
  const Eigen::VectorXd y = testutil::random_normal_vec(40, rng);
  for (auto f : {KernelFamily::Exponential, KernelFamily::Matern52}) {
    const auto rep = ssm_build(f, 0.5, 2.0, grid);
    const auto trace = filter_trace(rep, y, 0.03);
    CHECK(trace.q.minCoeff() >= 0.03);
    CHECK(trace.q[0] == Approx(2.0 + 0.03));
  }
}

TEST_CASE("smoother mean vanishes as the noise dominates") {
  golf::RngStream rng(8);
  const Eigen::VectorXd grid = testutil::random_grid(15, rng);
  const Eigen::VectorXd y = testutil::random_normal_vec(15, rng);
  const auto rep = ssm_build(KernelFamily::Matern52, 1.0, 1.0, grid);
  CHECK(smoother_mean(rep, y, 1e12).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("backward sampling matches the dense conditional law") {
  golf::RngStream rng(99);
  const int n = 5;
  const Eigen::VectorXd grid = testutil::random_grid(n, rng, 0.3);
  const Eigen::VectorXd y = testutil::random_normal_vec(n, rng);
  for (auto f : {KernelFamily::Exponential, KernelFamily::Matern52}) {
    const double sigma2 = 1.4, s0sq = 0.2;
    const auto rep = ssm_build(f, 0.8, sigma2, grid);
    const Eigen::MatrixXd sig = dense_cov(f, 0.8, sigma2, grid);
    Eigen::MatrixXd sig_tilde = sig;
    sig_tilde.diagonal().array() += s0sq;
    const auto ref = oracle::dense_gp_posterior(sig, sig, sig_tilde, y);

    const int ndraw = 100000;
    Eigen::MatrixXd draws(ndraw, n);
    golf::RngStream draw_rng(derive_seed(1234, 1));
    for (int k = 0; k < ndraw; ++k) draws.row(k) = backward_sample(rep, y, s0sq, draw_rng);

    const Eigen::VectorXd emp_mean = draws.colwise().mean();
    Eigen::MatrixXd centered = draws.rowwise() - emp_mean.transpose();
    const Eigen::MatrixXd emp_cov = centered.transpose() * centered / (ndraw - 1);

    const double sd_scale = std::sqrt(ref.cov.diagonal().maxCoeff());
    CHECK(testutil::max_abs_diff(emp_mean, ref.mean) < 0.015 * std::max(sd_scale, 1e-3));
    CHECK(testutil::max_abs_diff(emp_cov, ref.cov) < 0.02 * ref.cov.diagonal().maxCoeff());
  }
}

TEST_CASE("input validation") {
  Eigen::VectorXd grid(3);
  grid << 0.0, 0.5, 1.0;
  CHECK_THROWS_AS(ssm_build(KernelFamily::Gaussian, 1.0, 1.0, grid), invalid_parameter);
  CHECK_THROWS_AS(ssm_build(KernelFamily::Matern52, -1.0, 1.0, grid), invalid_parameter);
  CHECK_THROWS_AS(ssm_build(KernelFamily::Matern52, 1.0, 0.0, grid), invalid_parameter);
  Eigen::VectorXd bad = grid;
  bad[2] = 0.5;
  CHECK_THROWS_AS(ssm_build(KernelFamily::Matern52, 1.0, 1.0, bad), invalid_parameter);

  const auto rep = ssm_build(KernelFamily::Matern52, 1.0, 1.0, grid);
  const Eigen::VectorXd y = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(kf_loglik(rep, y, 0.0), invalid_parameter);
  CHECK_THROWS_AS(kf_loglik(rep, y, -0.1), invalid_parameter);
  CHECK_THROWS_AS(kf_loglik(rep, Eigen::VectorXd::Zero(4), 0.1), invalid_parameter);
  Eigen::VectorXd ynan = y;
  ynan[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(kf_loglik(rep, ynan, 0.1), invalid_parameter);
}

TEST_CASE("single-point grid") {
  Eigen::VectorXd grid(1);
  grid << 0.7;
  const auto rep = ssm_build(KernelFamily::Matern52, 1.0, 2.0, grid);
  Eigen::VectorXd y(1);
  y << 0.5;
  const double q = 2.0 + 0.3;
  CHECK(kf_loglik(rep, y, 0.3) ==
        Approx(-0.5 * (std::log(2.0 * M_PI * q) + 0.25 / q)).epsilon(1e-13));
  CHECK(kf_logdet(rep, 0.3) == Approx(std::log(q)).epsilon(1e-13));
}

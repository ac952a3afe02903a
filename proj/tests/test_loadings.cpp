#include <catch2/catch_amalgamated.hpp>

#include "golf/kernels.hpp"
#include "golf/loadings.hpp"
#include "test_util.hpp"

using namespace golf;
using Catch::Approx;

namespace {

Eigen::MatrixXd row_corr(int n, double gamma, golf::RngStream& rng) {
  KernelSpec spec;
  spec.family = KernelFamily::Matern52;
  spec.range = Eigen::VectorXd::Constant(1, gamma);
  return corr_matrix(spec, testutil::random_grid(n, rng, 0.15));
}

}  // namespace

TEST_CASE("eigenvector loadings") {
  golf::RngStream rng(31);
  const Eigen::MatrixXd r = row_corr(12, 0.4, rng);
  for (int d : {1, 3, 12}) {
    const Loadings l = compute_loadings(r, d);
    REQUIRE(l.d() == d);
    CHECK(testutil::max_abs_diff(l.a.transpose() * l.a, Eigen::MatrixXd::Identity(d, d)) < 1e-10);
    for (int k = 0; k < d; ++k) {
      CHECK((r * l.a.col(k) - l.lambda[k] * l.a.col(k)).cwiseAbs().maxCoeff() < 1e-8);
      if (k > 0) CHECK(l.lambda[k] <= l.lambda[k - 1] + 1e-12);
      // Sign convention: dominant entry positive.
      Eigen::Index arg;
      l.a.col(k).cwiseAbs().maxCoeff(&arg);
      CHECK(l.a(arg, k) > 0.0);
    }
    CHECK(l.lambda.minCoeff() > -1e-10);
  }
  SECTION("trace is preserved by the full spectrum") {
    const Loadings l = compute_loadings(r, 12);
    CHECK(l.lambda.sum() == Approx(12.0).epsilon(1e-10));
  }
  SECTION("invalid inputs") {
    CHECK_THROWS_AS(compute_loadings(r, 0), invalid_parameter);
    CHECK_THROWS_AS(compute_loadings(r, 13), invalid_parameter);
    Eigen::MatrixXd asym = r;
    asym(0, 1) += 1e-3;
    CHECK_THROWS_AS(compute_loadings(asym, 2), invalid_parameter);
  }
}

TEST_CASE("d selection by cumulative eigenvalue fraction") {
  Eigen::VectorXd lam(4);
  lam << 6.0, 3.0, 0.9, 0.1;
  CHECK(select_d(lam, 0.5) == 1);
  CHECK(select_d(lam, 0.6) == 1);
  CHECK(select_d(lam, 0.61) == 2);
  CHECK(select_d(lam, 0.9) == 2);
  CHECK(select_d(lam, 0.99) == 3);
  CHECK(select_d(lam, 1.0) == 4);
  CHECK_THROWS_AS(select_d(lam, 0.0), invalid_parameter);
  CHECK_THROWS_AS(select_d(lam, 1.5), invalid_parameter);
}

TEST_CASE("projection round trips") {
  golf::RngStream rng(47);
  const Eigen::MatrixXd r = row_corr(10, 0.5, rng);
  const Loadings l = compute_loadings(r, 4);
  const Eigen::MatrixXd y = testutil::random_normal_mat(10, 7, rng);

  const Eigen::MatrixXd z = project(l, y);
  REQUIRE(z.rows() == 4);
  REQUIRE(z.cols() == 7);
  CHECK(testutil::max_abs_diff(z, l.a.transpose() * y) < 1e-12);
  CHECK(testutil::max_abs_diff(unproject(l, z), l.a * z) < 1e-12);

  // Residual projection kills the loading directions and is idempotent.
  const Eigen::MatrixXd res = residual_project(l, y);
  CHECK(project(l, res).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(testutil::max_abs_diff(residual_project(l, res), res) < 1e-10);

  // Projection of a full basis preserves the Frobenius norm.
  const Loadings lf = compute_loadings(r, 10);
  CHECK(project(lf, y).squaredNorm() == Approx(y.squaredNorm()).epsilon(1e-12));
}

TEST_CASE("kronecker loadings match the materialized product") {
  golf::RngStream rng(53);
  const int n11 = 4, n12 = 5, d1 = 3, d2 = 2;
  const Eigen::MatrixXd r1 = row_corr(n11, 0.6, rng);
  const Eigen::MatrixXd r2 = row_corr(n12, 0.3, rng);
  const Loadings l = kronecker_loadings(r1, d1, r2, d2);
  REQUIRE(l.n1() == n11 * n12);
  REQUIRE(l.d() == d1 * d2);

  const Eigen::MatrixXd a = l.materialize();
  CHECK(testutil::max_abs_diff(a.transpose() * a, Eigen::MatrixXd::Identity(d1 * d2, d1 * d2)) <
        1e-10);

  // Columns are eigenvectors of the Kronecker-structured row correlation,
  // with eigenvalue the product of the block eigenvalues.
  Eigen::MatrixXd rk(n11 * n12, n11 * n12);
  for (int i1 = 0; i1 < n11; ++i1)
    for (int i2 = 0; i2 < n12; ++i2)
      for (int j1 = 0; j1 < n11; ++j1)
        for (int j2 = 0; j2 < n12; ++j2)
          rk(i1 * n12 + i2, j1 * n12 + j2) = r1(i1, j1) * r2(i2, j2);
  for (int c = 0; c < l.d(); ++c) {
    const double lam = l.implied_lambda(c);
    CHECK((rk * a.col(c) - lam * a.col(c)).cwiseAbs().maxCoeff() < 1e-8);
  }

  // Blockwise projection equals the dense product.
  const Eigen::MatrixXd y = testutil::random_normal_mat(n11 * n12, 6, rng);
  CHECK(testutil::max_abs_diff(project(l, y), a.transpose() * y) < 1e-10);
  const Eigen::MatrixXd z = testutil::random_normal_mat(d1 * d2, 6, rng);
  CHECK(testutil::max_abs_diff(unproject(l, z), a * z) < 1e-10);
  CHECK(testutil::max_abs_diff(residual_project(l, y), y - a * a.transpose() * y) < 1e-10);
}

TEST_CASE("loadings size checks") {
  golf::RngStream rng(61);
  const Eigen::MatrixXd r = row_corr(6, 0.5, rng);
  const Loadings l = compute_loadings(r, 2);
  CHECK_THROWS_AS(project(l, testutil::random_normal_mat(5, 3, rng)), invalid_parameter);
  CHECK_THROWS_AS(unproject(l, testutil::random_normal_mat(3, 3, rng)), invalid_parameter);
}

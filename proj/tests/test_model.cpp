#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "golf/model.hpp"
#include "golf/oracle.hpp"
#include "test_util.hpp"

using namespace golf;
using Catch::Approx;

namespace {

Eigen::MatrixXd random_orthogonal(int n, RngStream& rng) {
  const Eigen::MatrixXd g = testutil::random_normal_mat(n, n, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
}

Loadings plain_loadings(const Eigen::MatrixXd& a) {
  Loadings l;
  l.structure = Loadings::Structure::Plain;
  l.a = a;
  l.lambda = Eigen::VectorXd::Ones(a.cols());
  return l;
}

std::vector<Eigen::MatrixXd> sigma_list(KernelFamily fam, const Eigen::VectorXd& x,
                                        const Eigen::VectorXd& beta, const Eigen::VectorXd& eta,
                                        const Eigen::VectorXd& scale, double s0sq) {
  std::vector<Eigen::MatrixXd> out;
  for (Eigen::Index l = 0; l < beta.size(); ++l) {
    KernelSpec ks;
    ks.family = fam;
    ks.range = Eigen::VectorXd::Constant(1, 1.0 / beta[l]);
    out.push_back((s0sq * scale[l] / eta[l]) * corr_matrix(ks, x));
  }
  return out;
}

struct MomentAcc {
  Eigen::VectorXd sum;
  Eigen::MatrixXd sum2;
  long n = 0;
  explicit MomentAcc(Eigen::Index k)
      : sum(Eigen::VectorXd::Zero(k)), sum2(Eigen::MatrixXd::Zero(k, k)) {}
  void add(const Eigen::VectorXd& v) {
    sum += v;
    sum2 += v * v.transpose();
    ++n;
  }
  Eigen::VectorXd mean() const { return sum / static_cast<double>(n); }
  Eigen::MatrixXd cov() const {
    const Eigen::VectorXd m = mean();
    return (sum2 - static_cast<double>(n) * m * m.transpose()) / static_cast<double>(n - 1);
  }
};

// Largest standardized deviation of MC moments from exact Gaussian moments.
double max_z_mean(const MomentAcc& acc, const oracle::GaussianMoments& exact) {
  const Eigen::VectorXd m = acc.mean();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double se = std::sqrt(std::max(exact.cov(i, i), 0.0) / acc.n) + 1e-14;
    worst = std::max(worst, std::abs(m[i] - exact.mean[i]) / se);
  }
  return worst;
}

double max_z_cov(const MomentAcc& acc, const oracle::GaussianMoments& exact) {
  const Eigen::MatrixXd c = acc.cov();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double se =
          std::sqrt((exact.cov(i, i) * exact.cov(j, j) + exact.cov(i, j) * exact.cov(i, j)) /
                    acc.n) +
          1e-14;
      worst = std::max(worst, std::abs(c(i, j) - exact.cov(i, j)) / se);
    }
  return worst;
}

Eigen::VectorXd vec_of(const Eigen::MatrixXd& m) {
  return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
}

}  // namespace

TEST_CASE("marginal likelihood matches the dense joint and projected forms") {
  RngStream rng(derive_seed(7101, 0, 0, 0));
  for (int trial = 0; trial < 40; ++trial) {
    const int n1 = 2 + static_cast<int>(rng.uniform() * 5);
    const int n2 = 2 + static_cast<int>(rng.uniform() * 7);
    const int d = 1 + static_cast<int>(rng.uniform() * n1);
    const KernelFamily fam = trial % 2 ? KernelFamily::Exponential : KernelFamily::Matern52;
    const Eigen::VectorXd x = testutil::random_grid(n2, rng, 0.2);
    Eigen::VectorXd beta(d), eta(d);
    for (int l = 0; l < d; ++l) {
      beta[l] = testutil::log_uniform(rng, 0.2, 5.0);
      eta[l] = testutil::log_uniform(rng, 0.05, 20.0);
    }
    const Eigen::VectorXd scale = Eigen::VectorXd::Ones(d);
    const double s0sq = testutil::log_uniform(rng, 1e-3, 2.0);
    const Eigen::MatrixXd a_full = random_orthogonal(n1, rng);
    const Eigen::MatrixXd a = a_full.leftCols(d);
    const Eigen::MatrixXd y = 2.0 * testutil::random_normal_mat(n1, n2, rng);
    const Eigen::MatrixXd m = testutil::random_normal_mat(n1, n2, rng);

    const double ll_fast =
        marginal_loglik(y, m, plain_loadings(a), fam, x, beta, eta, scale, s0sq);
    const auto sig = sigma_list(fam, x, beta, eta, scale, s0sq);
    const double ll_joint = oracle::dense_joint_loglik(y - m, a, sig, s0sq);
    const double ll_proj = oracle::dense_projected_loglik(y - m, a_full, d, sig, s0sq);

    INFO("trial " << trial << " n1=" << n1 << " n2=" << n2 << " d=" << d);
    CHECK(ll_fast == Approx(ll_joint).margin(1e-7 * std::max(1.0, std::abs(ll_joint))));
    CHECK(ll_proj == Approx(ll_joint).margin(1e-7 * std::max(1.0, std::abs(ll_joint))));
  }
}

TEST_CASE("complement block") {
  SECTION("closed form") {
    const double v = complement_loglik(3.0, 5, 2, 6, 0.7);
    CHECK(v == Approx(-3.0 / 1.4 - 0.5 * 18.0 * std::log(2.0 * M_PI * 0.7)).epsilon(1e-14));
  }
  SECTION("complete basis contributes nothing") {
    CHECK(complement_loglik(1e-9, 4, 4, 10, 0.3) == 0.0);
  }
  SECTION("small negative mass is clamped") {
    const double v = complement_loglik(-1e-12, 5, 2, 6, 0.7);
    CHECK(v == Approx(-0.5 * 18.0 * std::log(2.0 * M_PI * 0.7)).epsilon(1e-14));
  }
  SECTION("d beyond n1 rejected") {
    CHECK_THROWS_AS(complement_loglik(1.0, 3, 4, 5, 1.0), invalid_parameter);
  }
}

TEST_CASE("factor posterior mean matches dense conditioning") {
  RngStream rng(derive_seed(7102, 0, 0, 0));
  const int n2 = 7;
  const Eigen::VectorXd x = testutil::random_grid(n2, rng, 0.3);
  const double beta = 1.3, eta = 0.6, scale = 2.0, s0sq = 0.4;
  const Eigen::VectorXd y = testutil::random_normal_vec(n2, rng);
  const Eigen::VectorXd fast =
      posterior_factor_mean(KernelFamily::Matern52, x, y, beta, eta, scale, s0sq);
  KernelSpec ks;
  ks.family = KernelFamily::Matern52;
  ks.range = Eigen::VectorXd::Constant(1, 1.0 / beta);
  const Eigen::MatrixXd sig = (s0sq * scale / eta) * corr_matrix(ks, x);
  Eigen::MatrixXd syy = sig;
  syy.diagonal().array() += s0sq;
  const auto post = oracle::dense_gp_posterior(sig, sig, syy, y);
  CHECK(testutil::max_abs_diff(fast, post.mean) < 1e-9);
}

TEST_CASE("mean model construction and evaluation") {
  const int n1 = 5, n2 = 6;
  Eigen::MatrixXd h1(n1, 2), h2(n2, 2);
  for (int i = 0; i < n1; ++i) h1.row(i) << 1.0, i / double(n1 - 1);
  for (int j = 0; j < n2; ++j) h2.row(j) << 1.0, j / double(n2 - 1);

  SECTION("zero mean") {
    const MeanModel m = make_mean_model(MeanKind::Zero);
    CHECK(mean_matrix(m, {}, {}, n1, n2).norm() == 0.0);
  }
  SECTION("row and column parts add") {
    const MeanModel m = make_mean_model(MeanKind::Mixed, h1, h2);
    const Eigen::MatrixXd b1 = Eigen::MatrixXd::Random(2, n2);
    const Eigen::MatrixXd b2 = Eigen::MatrixXd::Random(2, n1);
    const Eigen::MatrixXd got = mean_matrix(m, b1, b2, n1, n2);
    CHECK(testutil::max_abs_diff(got, h1 * b1 + (h2 * b2).transpose()) < 1e-14);
  }
  SECTION("rank-deficient basis rejected") {
    Eigen::MatrixXd bad(n1, 2);
    bad.col(0).setOnes();
    bad.col(1).setOnes();
    CHECK_THROWS_AS(make_mean_model(MeanKind::RowTrend, bad), invalid_parameter);
  }
  SECTION("wide basis rejected") {
    CHECK_THROWS_AS(make_mean_model(MeanKind::RowTrend, Eigen::MatrixXd::Random(2, 3)),
                    invalid_parameter);
  }
  SECTION("shape mismatches rejected") {
    const MeanModel m = make_mean_model(MeanKind::RowTrend, h1);
    CHECK_THROWS_AS(mean_matrix(m, Eigen::MatrixXd::Zero(3, n2), {}, n1, n2), invalid_parameter);
  }
}

TEST_CASE("prior densities") {
  SECTION("kernel and nugget prior closed form") {
    PriorSpec p;
    p.jr_c1 = -0.5;
    p.jr_c2 = 0.5;
    p.jr_c3 = 2.0;
    p.jr_exp_coef = 0.5;
    const double got = log_prior_jr(p, 1.2, 0.7);
    CHECK(got == Approx(-0.5 * std::log(0.5 * 1.2 + 0.7) - 2.0 * (0.5 * 1.2 + 0.7)).epsilon(1e-14));
  }
  SECTION("separate decay coefficient") {
    PriorSpec p;
    p.jr_c1 = -0.5;
    p.jr_c2 = 0.5;
    p.jr_c3 = 2.0;
    p.jr_exp_coef = -0.5;
    const double got = log_prior_jr(p, 1.2, 0.7);
    CHECK(got ==
          Approx(-0.5 * std::log(0.5 * 1.2 + 0.7) - 2.0 * (-0.5 * 1.2 + 0.7)).epsilon(1e-14));
  }
  SECTION("loadings range prior closed form") {
    PriorSpec p;
    const double got = log_prior_beta0(p, Eigen::VectorXd::Constant(1, 2.0));
    CHECK(got == Approx(-0.5 * std::log(2.0) - 0.5).epsilon(1e-14));
  }
  SECTION("non-positive parameters rejected") {
    PriorSpec p;
    CHECK_THROWS_AS(log_prior_jr(p, -1.0, 0.5), invalid_parameter);
    CHECK_THROWS_AS(log_prior_jr(p, 1.0, 0.0), invalid_parameter);
    CHECK_THROWS_AS(log_prior_beta0(p, Eigen::VectorXd::Constant(1, 0.0)), invalid_parameter);
  }
  SECTION("mean pairwise distance") {
    Eigen::VectorXd x(3);
    x << 0.0, 1.0, 3.0;
    CHECK(mean_pairwise_distance(x) == Approx(2.0).epsilon(1e-14));
    RngStream rng(derive_seed(7103, 0, 0, 0));
    const Eigen::VectorXd g = testutil::random_grid(17, rng);
    double brute = 0.0;
    int pairs = 0;
    for (int i = 0; i < 17; ++i)
      for (int j = i + 1; j < 17; ++j) {
        brute += g[j] - g[i];
        ++pairs;
      }
    CHECK(mean_pairwise_distance(g) == Approx(brute / pairs).epsilon(1e-12));
  }
  SECTION("defaults") {
    Eigen::VectorXd x(3);
    x << 0.0, 1.0, 3.0;
    const PriorSpec p = default_priors(x, 1);
    CHECK(p.jr_c1 == Approx(-0.5));
    CHECK(p.jr_c2 == Approx(0.5));
    CHECK(p.jr_c3 == Approx(2.0));
    CHECK(p.jr_exp_coef == Approx(p.jr_c2));
  }
}

namespace {

struct BTestSetup {
  int n1 = 4, n2 = 5, d = 2;
  KernelFamily fam = KernelFamily::Matern52;
  Eigen::VectorXd x, beta, eta, scale;
  double s0sq = 0.3;
  Eigen::MatrixXd a, y, h1, h2;
  std::vector<Eigen::MatrixXd> sig;

  explicit BTestSetup(RngStream& rng) {
    x = testutil::random_grid(n2, rng, 0.25);
    beta = Eigen::VectorXd(d);
    beta << 1.1, 0.6;
    eta = Eigen::VectorXd(d);
    eta << 0.4, 1.7;
    scale = Eigen::VectorXd::Ones(d);
    a = random_orthogonal(n1, rng).leftCols(d);
    y = 1.5 * testutil::random_normal_mat(n1, n2, rng);
    h1 = Eigen::MatrixXd(n1, 2);
    for (int i = 0; i < n1; ++i) h1.row(i) << 1.0, i / double(n1 - 1);
    h2 = Eigen::MatrixXd(n2, 2);
    for (int j = 0; j < n2; ++j) h2.row(j) << 1.0, x[j];
    sig = sigma_list(fam, x, beta, eta, scale, s0sq);
  }
};

}  // namespace

TEST_CASE("row-trend coefficient draws follow their transformation law") {
  RngStream rng(derive_seed(7104, 0, 0, 0));
  BTestSetup s(rng);
  const MeanModel mm = make_mean_model(MeanKind::RowTrend, s.h1);
  const Loadings lo = plain_loadings(s.a);

  const auto exact = oracle::dense_b1_moments(s.y, s.h1, s.a, s.sig, s.s0sq);

  SECTION("monte carlo moments") {
    MomentAcc acc(exact.mean.size());
    RngStream draws(derive_seed(7104, 1, 0, 0));
    for (int r = 0; r < 200000; ++r) {
      const Eigen::MatrixXd b1 =
          sample_b1(s.y, mm, lo, s.fam, s.x, s.beta, s.eta, s.scale, s.s0sq, draws);
      acc.add(vec_of(b1));
    }
    CHECK(max_z_mean(acc, exact) < 5.5);
    CHECK(max_z_cov(acc, exact) < 5.5);
  }
  SECTION("law is invariant to loading sign flips") {
    Eigen::MatrixXd a2 = s.a;
    a2.col(1) *= -1.0;
    const auto flipped = oracle::dense_b1_moments(s.y, s.h1, a2, s.sig, s.s0sq);
    CHECK(testutil::max_abs_diff(flipped.mean, exact.mean) < 1e-12);
    CHECK(testutil::max_abs_diff(flipped.cov, exact.cov) < 1e-12);
  }
  SECTION("draws collapse to the least squares fit as variances vanish") {
    RngStream draws(derive_seed(7104, 2, 0, 0));
    const Eigen::VectorXd tiny = Eigen::VectorXd::Constant(s.d, 1e-12);
    const Eigen::MatrixXd b1 =
        sample_b1(s.y, mm, lo, s.fam, s.x, s.beta, s.eta, tiny, 1e-16, draws);
    const Eigen::MatrixXd ols = mm.t1 * s.y;
    CHECK(testutil::max_abs_diff(b1, ols) < 1e-6);
  }
}

TEST_CASE("column-trend coefficient draws follow the exact posterior") {
  RngStream rng(derive_seed(7105, 0, 0, 0));
  BTestSetup s(rng);
  const MeanModel mm = make_mean_model(MeanKind::ColTrend, {}, s.h2);
  const Loadings lo = plain_loadings(s.a);

  // Flat-prior conditional computed from first principles.
  const Eigen::MatrixXd design = oracle::dense_mean_design({}, s.h2, s.n1, s.n2);
  const Eigen::MatrixXd cov = oracle::factor_model_cov(s.a, s.sig, s.s0sq);
  const auto exact = oracle::dense_coef_posterior(design, cov, vec_of(s.y));

  SECTION("structured law agrees with first principles") {
    const auto law = oracle::dense_b2_moments(s.y, s.h2, s.a, s.sig, s.s0sq);
    CHECK(testutil::max_abs_diff(law.mean, exact.mean) < 1e-10);
    CHECK(testutil::max_abs_diff(law.cov, exact.cov) < 1e-10);
  }
  SECTION("monte carlo moments") {
    MomentAcc acc(design.cols());
    RngStream draws(derive_seed(7105, 1, 0, 0));
    for (int r = 0; r < 200000; ++r) {
      const Eigen::MatrixXd b2 =
          sample_b2(s.y, mm, lo, s.fam, s.x, s.beta, s.eta, s.scale, s.s0sq, draws);
      acc.add(vec_of(b2));
    }
    CHECK(max_z_mean(acc, exact) < 5.5);
    CHECK(max_z_cov(acc, exact) < 5.5);
  }
}

TEST_CASE("mixed trend draws follow the two-stage law") {
  // h1 and h2 both carry an intercept: the hard overlapping-span case the
  // two-stage construction is designed for.
  RngStream rng(derive_seed(7106, 0, 0, 0));
  BTestSetup s(rng);
  const MeanModel mm = make_mean_model(MeanKind::Mixed, s.h1, s.h2);
  const Loadings lo = plain_loadings(s.a);

  SECTION("projected factor noise is idempotent in the weighted metric") {
    for (int l = 0; l < s.d; ++l) {
      Eigen::MatrixXd st = s.sig[l];
      st.diagonal().array() += s.s0sq;
      const Eigen::MatrixXd sinv = st.llt().solve(Eigen::MatrixXd::Identity(s.n2, s.n2));
      const Eigen::MatrixXd gl_inv =
          (s.h2.transpose() * sinv * s.h2)
              .llt()
              .solve(Eigen::MatrixXd::Identity(2, 2));
      const Eigen::MatrixXd pl =
          Eigen::MatrixXd::Identity(s.n2, s.n2) - s.h2 * gl_inv * s.h2.transpose() * sinv;
      const Eigen::MatrixXd q = pl.transpose() * sinv * pl;
      CHECK(testutil::max_abs_diff(q * st * q, q) < 1e-8);
    }
  }
  SECTION("monte carlo joint moments") {
    const auto exact = oracle::dense_mixed_b_moments(s.y, s.h1, s.h2, s.a, s.sig, s.s0sq);
    MomentAcc acc(exact.mean.size());
    RngStream draws(derive_seed(7106, 1, 0, 0));
    Eigen::VectorXd stacked(exact.mean.size());
    for (int r = 0; r < 150000; ++r) {
      const Eigen::MatrixXd b1 =
          sample_b1_mixed(s.y, mm, lo, s.fam, s.x, s.beta, s.eta, s.scale, s.s0sq, draws);
      const Eigen::MatrixXd b2 = sample_b2(s.y - s.h1 * b1, mm, lo, s.fam, s.x, s.beta, s.eta,
                                           s.scale, s.s0sq, draws);
      stacked << vec_of(b1), vec_of(b2);
      acc.add(stacked);
    }
    CHECK(max_z_mean(acc, exact) < 5.5);
    CHECK(max_z_cov(acc, exact) < 5.5);
  }
}

TEST_CASE("coefficient draws are reproducible") {
  RngStream rng(derive_seed(7107, 0, 0, 0));
  BTestSetup s(rng);
  const MeanModel mm = make_mean_model(MeanKind::RowTrend, s.h1);
  const Loadings lo = plain_loadings(s.a);
  RngStream r1(derive_seed(42, 1, 2, 3)), r2(derive_seed(42, 1, 2, 3));
  const Eigen::MatrixXd d1 = sample_b1(s.y, mm, lo, s.fam, s.x, s.beta, s.eta, s.scale, s.s0sq, r1);
  const Eigen::MatrixXd d2 = sample_b1(s.y, mm, lo, s.fam, s.x, s.beta, s.eta, s.scale, s.s0sq, r2);
  CHECK((d1 - d2).norm() == 0.0);
}

TEST_CASE("noise variance draws target the exact conditional") {
  RngStream rng(derive_seed(7108, 0, 0, 0));
  const int n1 = 4, n2 = 6, d = 2;
  const KernelFamily fam = KernelFamily::Exponential;
  const Eigen::VectorXd x = testutil::random_grid(n2, rng, 0.3);
  Eigen::VectorXd beta(d), eta(d);
  beta << 0.9, 2.2;
  eta << 0.5, 3.0;
  const Eigen::VectorXd scale = Eigen::VectorXd::Ones(d);
  const Eigen::MatrixXd a = random_orthogonal(n1, rng).leftCols(d);
  const Eigen::MatrixXd y = testutil::random_normal_mat(n1, n2, rng);
  const Eigen::MatrixXd ytilde = a.transpose() * y;
  const double frob2 = squared_frobenius(y);

  // Dense rate: sum_l ytilde_l' (scale K / eta + I)^{-1} ytilde_l + excess.
  double s_dense = 0.0;
  for (int l = 0; l < d; ++l) {
    KernelSpec ks;
    ks.family = fam;
    ks.range = Eigen::VectorXd::Constant(1, 1.0 / beta[l]);
    Eigen::MatrixXd c = (scale[l] / eta[l]) * corr_matrix(ks, x);
    c.diagonal().array() += 1.0;
    const Eigen::VectorXd yl = ytilde.row(l).transpose();
    s_dense += yl.dot(c.llt().solve(yl));
  }
  s_dense += frob2 - ytilde.squaredNorm();

  const double shape = 0.5 * n1 * n2;
  const double rate = 0.5 * s_dense;
  RngStream draws(derive_seed(7108, 1, 0, 0));
  KahanSum sum;
  const int nrep = 100000;
  for (int r = 0; r < nrep; ++r) {
    const double v = sample_sigma0_sq(ytilde, frob2, n1, n2, fam, x, beta, eta, scale, draws);
    REQUIRE(v > 0.0);
    sum.add(v);
  }
  const double exact_mean = rate / (shape - 1.0);
  const double exact_sd = exact_mean / std::sqrt(shape - 2.0);
  CHECK(std::abs(sum.value() / nrep - exact_mean) < 5.0 * exact_sd / std::sqrt(double(nrep)));
}

TEST_CASE("metropolis block") {
  SECTION("standard normal target is explored") {
    RngStream rng(derive_seed(7109, 0, 0, 0));
    const auto target = [](const Eigen::VectorXd& v) { return -0.5 * v.squaredNorm(); };
    Eigen::VectorXd cur(2);
    cur << 3.0, -2.0;
    double cur_t = target(cur);
    long accepted = 0;
    const int iters = 30000;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(2), sum2 = Eigen::VectorXd::Zero(2);
    for (int i = 0; i < iters; ++i) {
      const auto res = metropolis_block(cur, cur_t, target, 1.5, rng);
      cur = res.log_params;
      cur_t = res.log_target;
      accepted += res.accepted;
      if (i >= 5000) {
        sum += cur;
        sum2 += cur.cwiseProduct(cur);
      }
    }
    const double frac = accepted / double(iters);
    CHECK(frac > 0.15);
    CHECK(frac < 0.75);
    const double kept = iters - 5000;
    for (int k = 0; k < 2; ++k) {
      CHECK(std::abs(sum[k] / kept) < 0.1);
      CHECK(sum2[k] / kept == Approx(1.0).margin(0.15));
    }
  }
  SECTION("invalid proposals are rejected in place") {
    RngStream rng(derive_seed(7110, 0, 0, 0));
    const auto target = [](const Eigen::VectorXd& v) -> double {
      if (v[0] > 0.0) throw invalid_parameter("out of domain");
      return -0.5 * v.squaredNorm();
    };
    Eigen::VectorXd cur(1);
    cur << -0.05;
    double cur_t = target(cur);
    long accepted = 0;
    for (int i = 0; i < 2000; ++i) {
      const auto res = metropolis_block(cur, cur_t, target, 0.4, rng);
      cur = res.log_params;
      cur_t = res.log_target;
      accepted += res.accepted;
      REQUIRE(cur[0] <= 0.0);
    }
    CHECK(accepted > 100);
  }
  SECTION("identical seeds give identical paths") {
    const auto target = [](const Eigen::VectorXd& v) { return -0.5 * v.squaredNorm(); };
    RngStream r1(derive_seed(7111, 0, 0, 0)), r2(derive_seed(7111, 0, 0, 0));
    Eigen::VectorXd c1 = Eigen::VectorXd::Zero(3), c2 = Eigen::VectorXd::Zero(3);
    double t1 = target(c1), t2 = target(c2);
    for (int i = 0; i < 200; ++i) {
      const auto a = metropolis_block(c1, t1, target, 0.8, r1);
      const auto b = metropolis_block(c2, t2, target, 0.8, r2);
      c1 = a.log_params;
      t1 = a.log_target;
      c2 = b.log_params;
      t2 = b.log_target;
      REQUIRE((c1 - c2).norm() == 0.0);
    }
  }
}

TEST_CASE("factor parameter guards") {
  Eigen::VectorXd x(3);
  x << 0.0, 0.5, 1.2;
  const Eigen::VectorXd y = Eigen::VectorXd::Ones(3);
  CHECK_THROWS_AS(factor_loglik(KernelFamily::Exponential, x, y, 0.0, 1.0, 1.0, 0.5),
                  invalid_parameter);
  CHECK_THROWS_AS(factor_loglik(KernelFamily::Exponential, x, y, 1.0, -1.0, 1.0, 0.5),
                  invalid_parameter);
  CHECK_THROWS_AS(factor_loglik(KernelFamily::Exponential, x, y, 1.0, 1.0, 0.0, 0.5),
                  invalid_parameter);
  const Eigen::MatrixXd yt = Eigen::MatrixXd::Ones(2, 3);
  CHECK_THROWS_AS(marginal_loglik_projected(yt, 10.0, 4, KernelFamily::Exponential, x,
                                            Eigen::VectorXd::Ones(2), Eigen::VectorXd::Ones(2),
                                            Eigen::VectorXd::Ones(2), 0.0),
                  invalid_parameter);
  CHECK_THROWS_AS(marginal_loglik_projected(yt, 10.0, 4, KernelFamily::Exponential, x,
                                            Eigen::VectorXd::Ones(3), Eigen::VectorXd::Ones(2),
                                            Eigen::VectorXd::Ones(2), 0.5),
                  invalid_parameter);
}

#pragma once

// Dense, brute-force reference implementations and experiment generators.
// Everything here is O(n^3) Cholesky/eigen algebra with no clever structure,
// kept separate from the fast paths so it can be audited on its own.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "golf/errors.hpp"
#include "golf/kernels.hpp"
#include "golf/lattice.hpp"
#include "golf/rng.hpp"
#include "golf/sampler.hpp"
#include "golf/util.hpp"

namespace golf::oracle {

// Cholesky with absolute diagonal jitter escalating 1e-10 -> 1e-6.
inline Eigen::MatrixXd dense_chol_lower(Eigen::MatrixXd cov) {
  cov = 0.5 * (cov + cov.transpose()).eval();
  double jitter = 0.0;
  for (;;) {
    Eigen::LLT<Eigen::MatrixXd> llt(
        jitter == 0.0 ? cov
                      : (cov + jitter * Eigen::MatrixXd::Identity(cov.rows(), cov.cols())).eval());
    if (llt.info() == Eigen::Success) return llt.matrixL();
    if (jitter == 0.0)
      jitter = 1e-10;
    else if (jitter < 1e-6)
      jitter *= 10.0;
    else
      throw numeric_error("dense cholesky failed with jitter up to 1e-6");
  }
}

inline double dense_logdet(const Eigen::MatrixXd& cov) {
  const Eigen::MatrixXd l = dense_chol_lower(cov);
  double s = 0.0;
  for (Eigen::Index i = 0; i < l.rows(); ++i) s += 2.0 * std::log(l(i, i));
  return s;
}

inline Eigen::VectorXd dense_whiten(const Eigen::MatrixXd& cov, const Eigen::VectorXd& v) {
  const Eigen::MatrixXd l = dense_chol_lower(cov);
  return l.triangularView<Eigen::Lower>().solve(v);
}

inline Eigen::VectorXd dense_color(const Eigen::MatrixXd& cov, const Eigen::VectorXd& v) {
  const Eigen::MatrixXd l = dense_chol_lower(cov);
  return l.triangularView<Eigen::Lower>() * v;
}

// log N(y; 0, cov).
inline double dense_gp_loglik(const Eigen::MatrixXd& cov, const Eigen::VectorXd& y) {
  if (y.size() != cov.rows()) throw invalid_parameter("dense_gp_loglik: size mismatch");
  const Eigen::MatrixXd l = dense_chol_lower(cov);
  const Eigen::VectorXd e = l.triangularView<Eigen::Lower>().solve(y);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < l.rows(); ++i) logdet += 2.0 * std::log(l(i, i));
  return -0.5 * (y.size() * std::log(2.0 * M_PI) + logdet + e.squaredNorm());
}

struct GaussianMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Moments of z | y under joint normality with Cov(z)=czz, Cov(z,y)=czy, Cov(y)=cyy.
inline GaussianMoments dense_gp_posterior(const Eigen::MatrixXd& czz, const Eigen::MatrixXd& czy,
                                          const Eigen::MatrixXd& cyy, const Eigen::VectorXd& y) {
  if (y.size() == 0) return {Eigen::VectorXd::Zero(czz.rows()), czz};
  const Eigen::MatrixXd l = dense_chol_lower(cyy);
  const Eigen::MatrixXd li_cyz = l.triangularView<Eigen::Lower>().solve(czy.transpose());
  const Eigen::VectorXd li_y = l.triangularView<Eigen::Lower>().solve(y);
  GaussianMoments out;
  out.mean = li_cyz.transpose() * li_y;
  out.cov = czz - li_cyz.transpose() * li_cyz;
  out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
  return out;
}

// E[z | y] for y = z + noise, z ~ N(0, sig): sig (sig + s0sq I)^{-1} y.
inline Eigen::VectorXd dense_posterior_mean(const Eigen::MatrixXd& sig, double s0sq,
                                            const Eigen::VectorXd& y) {
  Eigen::MatrixXd cyy = sig;
  cyy.diagonal().array() += s0sq;
  const Eigen::MatrixXd l = dense_chol_lower(cyy);
  Eigen::VectorXd t = l.triangularView<Eigen::Lower>().solve(y);
  t = l.transpose().triangularView<Eigen::Upper>().solve(t);
  return sig * t;
}

// Covariance of vec(Y - M) (column-major) for the orthogonal-factor model:
// column j of Y - M is A z(x_j) + eps_j.
inline Eigen::MatrixXd factor_model_cov(const Eigen::MatrixXd& a,
                                        const std::vector<Eigen::MatrixXd>& sigma_l,
                                        double s0sq) {
  const Eigen::Index n1 = a.rows(), d = a.cols();
  if (static_cast<Eigen::Index>(sigma_l.size()) != d)
    throw invalid_parameter("factor_model_cov: one covariance per factor required");
  const Eigen::Index n2 = sigma_l.empty() ? 0 : sigma_l[0].rows();
  const Eigen::Index n = n1 * n2;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index l = 0; l < d; ++l)
    for (Eigen::Index j = 0; j < n2; ++j)
      for (Eigen::Index jp = 0; jp < n2; ++jp) {
        const double s = sigma_l[l](j, jp);
        if (s == 0.0) continue;
        for (Eigen::Index i = 0; i < n1; ++i)
          for (Eigen::Index ip = 0; ip < n1; ++ip)
            cov(j * n1 + i, jp * n1 + ip) += a(i, l) * a(ip, l) * s;
      }
  cov.diagonal().array() += s0sq;
  return cov;
}

// Joint log density of the full matrix under the factor model, evaluated on
// the materialized N x N covariance.
inline double dense_joint_loglik(const Eigen::MatrixXd& yc, const Eigen::MatrixXd& a,
                                 const std::vector<Eigen::MatrixXd>& sigma_l, double s0sq) {
  const Eigen::MatrixXd cov = factor_model_cov(a, sigma_l, s0sq);
  const Eigen::Map<const Eigen::VectorXd> v(yc.data(), yc.size());
  return dense_gp_loglik(cov, v);
}

// Projected-likelihood decomposition evaluated densely with an explicit
// orthogonal completion: a_full must be n1 x n1 orthogonal whose first d
// columns are the loadings.
inline double dense_projected_loglik(const Eigen::MatrixXd& yc, const Eigen::MatrixXd& a_full,
                                     Eigen::Index d,
                                     const std::vector<Eigen::MatrixXd>& sigma_l, double s0sq) {
  const Eigen::Index n1 = yc.rows(), n2 = yc.cols();
  if (a_full.rows() != n1 || a_full.cols() != n1)
    throw invalid_parameter("dense_projected_loglik: a_full must be square");
  double ll = 0.0;
  for (Eigen::Index l = 0; l < n1; ++l) {
    const Eigen::VectorXd yt = yc.transpose() * a_full.col(l);
    if (l < d) {
      Eigen::MatrixXd st = sigma_l[l];
      st.diagonal().array() += s0sq;
      ll += dense_gp_loglik(st, yt);
    } else {
      ll += -0.5 * (n2 * std::log(2.0 * M_PI * s0sq) + yt.squaredNorm() / s0sq);
    }
  }
  return ll;
}

// ---------------------------------------------------------------------------
// Dense mean-coefficient posteriors
// ---------------------------------------------------------------------------

// Design matrix mapping stacked trend coefficients to vec(M), column-major
// throughout. Row part: M += h1 B1 with b = vec(B1) (q1 x n2). Column part:
// M += (h2 B2)^T with b = vec(B2) (q2 x n1). Pass an empty matrix to drop a
// part; with both present the row block comes first.
inline Eigen::MatrixXd dense_mean_design(const Eigen::MatrixXd& h1, const Eigen::MatrixXd& h2,
                                         Eigen::Index n1, Eigen::Index n2) {
  const Eigen::Index q1 = h1.cols(), q2 = h2.cols();
  if (h1.size() > 0 && h1.rows() != n1)
    throw invalid_parameter("dense_mean_design: h1 must have n1 rows");
  if (h2.size() > 0 && h2.rows() != n2)
    throw invalid_parameter("dense_mean_design: h2 must have n2 rows");
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n1 * n2, q1 * n2 + q2 * n1);
  for (Eigen::Index j = 0; j < n2; ++j)
    for (Eigen::Index i = 0; i < n1; ++i) {
      const Eigen::Index row = j * n1 + i;
      for (Eigen::Index r = 0; r < q1; ++r) d(row, j * q1 + r) = h1(i, r);
      for (Eigen::Index r = 0; r < q2; ++r) d(row, q1 * n2 + i * q2 + r) = h2(j, r);
    }
  return d;
}

// Posterior of coefficients b under y ~ N(D b, cov) with a flat prior,
// requiring D to have full column rank.
inline GaussianMoments dense_coef_posterior(const Eigen::MatrixXd& design,
                                            const Eigen::MatrixXd& cov,
                                            const Eigen::VectorXd& y) {
  const Eigen::MatrixXd l = dense_chol_lower(cov);
  const Eigen::MatrixXd dw = l.triangularView<Eigen::Lower>().solve(design);
  const Eigen::VectorXd yw = l.triangularView<Eigen::Lower>().solve(y);
  const Eigen::MatrixXd s = dw.transpose() * dw;
  Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (s + s.transpose()));
  if (llt.info() != Eigen::Success)
    throw numeric_error("dense_coef_posterior: design is rank deficient against cov");
  GaussianMoments out;
  out.mean = llt.solve(dw.transpose() * yw);
  out.cov = llt.solve(Eigen::MatrixXd::Identity(s.rows(), s.cols()));
  out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
  return out;
}

namespace detail {

inline std::vector<Eigen::MatrixXd> nugget_inverses(const std::vector<Eigen::MatrixXd>& sigma_l,
                                                    double s0sq) {
  std::vector<Eigen::MatrixXd> out;
  for (const auto& s : sigma_l) {
    Eigen::MatrixXd st = s;
    st.diagonal().array() += s0sq;
    out.push_back(st.llt().solve(Eigen::MatrixXd::Identity(st.rows(), st.cols())));
  }
  return out;
}

}  // namespace detail

// Law of the row-coefficient draw: center (h1^T h1)^{-1} h1^T y, per-factor
// noise with the nugget-augmented factor covariance mapped through w a_l, and
// white complement noise through w (I - a a^T) w^T, w = (h1^T h1)^{-1} h1^T.
// Moments are over vec(B1) with B1 of shape q1 x n2. sigma_l carry no nugget.
inline GaussianMoments dense_b1_moments(const Eigen::MatrixXd& y, const Eigen::MatrixXd& h1,
                                        const Eigen::MatrixXd& a,
                                        const std::vector<Eigen::MatrixXd>& sigma_l,
                                        double s0sq) {
  const Eigen::Index n1 = y.rows(), n2 = y.cols(), q1 = h1.cols(), d = a.cols();
  const Eigen::MatrixXd w =
      (h1.transpose() * h1).llt().solve(Eigen::MatrixXd::Identity(q1, q1)) * h1.transpose();
  GaussianMoments out;
  const Eigen::MatrixXd center = w * y;
  out.mean = Eigen::Map<const Eigen::VectorXd>(center.data(), center.size());
  out.cov = Eigen::MatrixXd::Zero(q1 * n2, q1 * n2);
  for (Eigen::Index l = 0; l < d; ++l) {
    Eigen::MatrixXd st = sigma_l[l];
    st.diagonal().array() += s0sq;
    const Eigen::VectorXd u = w * a.col(l);
    for (Eigen::Index j = 0; j < n2; ++j)
      for (Eigen::Index jp = 0; jp < n2; ++jp)
        for (Eigen::Index r = 0; r < q1; ++r)
          for (Eigen::Index rp = 0; rp < q1; ++rp)
            out.cov(j * q1 + r, jp * q1 + rp) += st(j, jp) * u[r] * u[rp];
  }
  const Eigen::MatrixXd pc = Eigen::MatrixXd::Identity(n1, n1) - a * a.transpose();
  const Eigen::MatrixXd wcw = w * pc * w.transpose();
  for (Eigen::Index j = 0; j < n2; ++j)
    for (Eigen::Index r = 0; r < q1; ++r)
      for (Eigen::Index rp = 0; rp < q1; ++rp)
        out.cov(j * q1 + r, j * q1 + rp) += s0sq * wcw(r, rp);
  return out;
}

// Law of the column-coefficient draw: per-factor generalized least squares
// against the nugget-augmented factor covariance plus an ordinary
// least-squares complement; coincides with the flat-prior conditional of B2.
// Moments are over vec(B2) with B2 of shape q2 x n1. sigma_l carry no nugget.
inline GaussianMoments dense_b2_moments(const Eigen::MatrixXd& y, const Eigen::MatrixXd& h2,
                                        const Eigen::MatrixXd& a,
                                        const std::vector<Eigen::MatrixXd>& sigma_l,
                                        double s0sq) {
  const Eigen::Index n1 = y.rows(), q2 = h2.cols(), d = a.cols();
  const auto sinv = detail::nugget_inverses(sigma_l, s0sq);
  const Eigen::MatrixXd gram_inv =
      (h2.transpose() * h2).llt().solve(Eigen::MatrixXd::Identity(q2, q2));
  const Eigen::MatrixXd pc = Eigen::MatrixXd::Identity(n1, n1) - a * a.transpose();
  Eigen::MatrixXd mean = gram_inv * h2.transpose() * y.transpose() * pc;
  GaussianMoments out;
  out.cov = Eigen::MatrixXd::Zero(q2 * n1, q2 * n1);
  for (Eigen::Index l = 0; l < d; ++l) {
    const Eigen::MatrixXd gl = h2.transpose() * sinv[l] * h2;
    const Eigen::MatrixXd gl_inv = gl.llt().solve(Eigen::MatrixXd::Identity(q2, q2));
    mean += gl_inv * h2.transpose() * sinv[l] * y.transpose() * a.col(l) * a.col(l).transpose();
    for (Eigen::Index i = 0; i < n1; ++i)
      for (Eigen::Index ip = 0; ip < n1; ++ip)
        out.cov.block(i * q2, ip * q2, q2, q2) += a(i, l) * a(ip, l) * gl_inv;
  }
  for (Eigen::Index i = 0; i < n1; ++i)
    for (Eigen::Index ip = 0; ip < n1; ++ip)
      out.cov.block(i * q2, ip * q2, q2, q2) += s0sq * pc(i, ip) * gram_inv;
  out.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), mean.size());
  return out;
}

// Joint law of the two-stage mixed draw: B1 first with the column-basis span
// projected out of its noise, then B2 conditionally on the row residual.
// Moments are over [vec(B1); vec(B2)]. sigma_l carry no nugget.
inline GaussianMoments dense_mixed_b_moments(const Eigen::MatrixXd& y, const Eigen::MatrixXd& h1,
                                             const Eigen::MatrixXd& h2, const Eigen::MatrixXd& a,
                                             const std::vector<Eigen::MatrixXd>& sigma_l,
                                             double s0sq) {
  const Eigen::Index n1 = y.rows(), n2 = y.cols(), q1 = h1.cols(), q2 = h2.cols(), d = a.cols();
  const auto sinv = detail::nugget_inverses(sigma_l, s0sq);
  const Eigen::MatrixXd w =
      (h1.transpose() * h1).llt().solve(Eigen::MatrixXd::Identity(q1, q1)) * h1.transpose();
  const Eigen::MatrixXd gram2_inv =
      (h2.transpose() * h2).llt().solve(Eigen::MatrixXd::Identity(q2, q2));
  const Eigen::MatrixXd p0 =
      Eigen::MatrixXd::Identity(n2, n2) - h2 * gram2_inv * h2.transpose();
  const Eigen::MatrixXd pc = Eigen::MatrixXd::Identity(n1, n1) - a * a.transpose();

  // Stage one: vec(B1).
  const Eigen::Index k1 = q1 * n2, k2 = q2 * n1;
  Eigen::MatrixXd c1 = Eigen::MatrixXd::Zero(k1, k1);
  std::vector<Eigen::MatrixXd> gl_inv(d);
  for (Eigen::Index l = 0; l < d; ++l) {
    const Eigen::MatrixXd gl = h2.transpose() * sinv[l] * h2;
    gl_inv[l] = gl.llt().solve(Eigen::MatrixXd::Identity(q2, q2));
    const Eigen::MatrixXd pl =
        Eigen::MatrixXd::Identity(n2, n2) - h2 * gl_inv[l] * h2.transpose() * sinv[l];
    const Eigen::MatrixXd q1l = pl.transpose() * sinv[l] * pl;
    const Eigen::VectorXd u = w * a.col(l);
    for (Eigen::Index j = 0; j < n2; ++j)
      for (Eigen::Index jp = 0; jp < n2; ++jp)
        for (Eigen::Index r = 0; r < q1; ++r)
          for (Eigen::Index rp = 0; rp < q1; ++rp)
            c1(j * q1 + r, jp * q1 + rp) += q1l(j, jp) * u[r] * u[rp];
  }
  const Eigen::MatrixXd wcw = w * pc * w.transpose();
  for (Eigen::Index j = 0; j < n2; ++j)
    for (Eigen::Index jp = 0; jp < n2; ++jp)
      for (Eigen::Index r = 0; r < q1; ++r)
        for (Eigen::Index rp = 0; rp < q1; ++rp)
          c1(j * q1 + r, jp * q1 + rp) += s0sq * p0(j, jp) * wcw(r, rp);
  const Eigen::MatrixXd center1 = w * y;
  const Eigen::VectorXd m1 = Eigen::Map<const Eigen::VectorXd>(center1.data(), center1.size());

  // Stage two: B2 given B1 is the column draw on the residual y - h1 B1; its
  // conditional covariance does not depend on B1 and its conditional mean is
  // affine in vec(B1) with slope built column by column.
  const auto stage2_center = [&](const Eigen::MatrixXd& r) {
    Eigen::MatrixXd c = gram2_inv * h2.transpose() * r.transpose() * pc;
    for (Eigen::Index l = 0; l < d; ++l)
      c += gl_inv[l] * h2.transpose() * sinv[l] * r.transpose() * a.col(l) *
           a.col(l).transpose();
    return c;
  };
  Eigen::MatrixXd slope(k2, k1);
  for (Eigen::Index c = 0; c < k1; ++c) {
    Eigen::MatrixXd e1 = Eigen::MatrixXd::Zero(q1, n2);
    e1(c % q1, c / q1) = 1.0;
    const Eigen::MatrixXd img = stage2_center(-h1 * e1);
    slope.col(c) = Eigen::Map<const Eigen::VectorXd>(img.data(), img.size());
  }
  const Eigen::MatrixXd base2 = stage2_center(y);
  const Eigen::VectorXd m2 =
      Eigen::Map<const Eigen::VectorXd>(base2.data(), base2.size()) + slope * m1;
  Eigen::MatrixXd c2_cond = Eigen::MatrixXd::Zero(k2, k2);
  for (Eigen::Index l = 0; l < d; ++l)
    for (Eigen::Index i = 0; i < n1; ++i)
      for (Eigen::Index ip = 0; ip < n1; ++ip)
        c2_cond.block(i * q2, ip * q2, q2, q2) += a(i, l) * a(ip, l) * gl_inv[l];
  for (Eigen::Index i = 0; i < n1; ++i)
    for (Eigen::Index ip = 0; ip < n1; ++ip)
      c2_cond.block(i * q2, ip * q2, q2, q2) += s0sq * pc(i, ip) * gram2_inv;

  GaussianMoments out;
  out.mean = Eigen::VectorXd(k1 + k2);
  out.mean << m1, m2;
  out.cov = Eigen::MatrixXd(k1 + k2, k1 + k2);
  out.cov.topLeftCorner(k1, k1) = c1;
  out.cov.topRightCorner(k1, k2) = c1 * slope.transpose();
  out.cov.bottomLeftCorner(k2, k1) = slope * c1;
  out.cov.bottomRightCorner(k2, k2) = c2_cond + slope * c1 * slope.transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

struct SimSpec {
  int n1 = 25, n2 = 25;
  int n11 = 0, n12 = 0;  // nonzero: Kronecker row grid (n11 * n12 == n1)
  int kron_d1 = -1, kron_d2 = -1;  // loadings truncation written with the data; -1 = full
  KernelFamily family_s = KernelFamily::Matern52;
  KernelFamily family_x = KernelFamily::Matern52;
  double gamma0 = 1.0;
  double gamma0_2 = -1.0;  // second row coordinate (Kronecker); -1 = gamma0
  enum class GammaRule { Constant, InverseIndex };
  GammaRule gamma_rule = GammaRule::Constant;
  double gamma_x = 1.0 / 3.0;
  int d_true = -1;  // -1 = n1
  enum class FactorVariance { EigenScaled, Unit };
  FactorVariance variance = FactorVariance::EigenScaled;
  double sigma2 = 1.0;  // total signal variance for EigenScaled
  double noise_sd = 0.1;
  enum class Missing { None, Random, CenterDisk };
  Missing missing = Missing::Random;
  double missing_param = 0.5;  // fraction (Random) or normalized radius (CenterDisk)
  enum class Mean { Zero, Row, Col, Mixed };
  Mean mean = Mean::Zero;
  double mean_scale = 1.0;  // sd of the true basis coefficients
  std::uint64_t seed = 1;
};

struct SimData {
  LatticeData data;
  Eigen::MatrixXd truth;        // complete noisy field
  Eigen::MatrixXd latent_mean;  // M + A Z (noise-free)
  Eigen::MatrixXd m_true;       // mean component alone
};

inline Eigen::VectorXd linspace01(int n) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
  return v;
}

namespace detail {

inline void eigen_descending(const Eigen::MatrixXd& r, Eigen::MatrixXd& vectors,
                             Eigen::VectorXd& values) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r);
  if (es.info() != Eigen::Success) throw numeric_error("simulate: eigendecomposition failed");
  const Eigen::Index m = r.rows();
  vectors.resize(m, m);
  values.resize(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    vectors.col(k) = es.eigenvectors().col(m - 1 - k);
    values[k] = es.eigenvalues()[m - 1 - k];
  }
}

}  // namespace detail

inline SimData simulate(const SimSpec& spec) {
  if (spec.n1 < 1 || spec.n2 < 1) throw invalid_parameter("simulate: grid must be non-empty");
  const bool kron = spec.n11 > 0 || spec.n12 > 0;
  if (kron && spec.n11 * spec.n12 != spec.n1)
    throw invalid_parameter("simulate: n11 * n12 must equal n1");
  if (!(spec.noise_sd > 0.0)) throw invalid_parameter("simulate: noise sd must be > 0");

  SimData out;
  // Coordinates.
  Eigen::MatrixXd coords_s;
  if (kron) {
    const Eigen::VectorXd u1 = linspace01(spec.n11), u2 = linspace01(spec.n12);
    coords_s.resize(spec.n1, 2);
    for (int i1 = 0; i1 < spec.n11; ++i1)
      for (int i2 = 0; i2 < spec.n12; ++i2) {
        coords_s(i1 * spec.n12 + i2, 0) = u1[i1];
        coords_s(i1 * spec.n12 + i2, 1) = u2[i2];
      }
  } else {
    coords_s = linspace01(spec.n1);
  }
  const Eigen::VectorXd x = linspace01(spec.n2);

  // Loadings and their eigenvalues.
  const int d = spec.d_true <= 0 ? spec.n1 : spec.d_true;
  if (d > spec.n1) throw invalid_parameter("simulate: d_true exceeds n1");
  Eigen::MatrixXd a;
  Eigen::VectorXd lam;
  if (kron) {
    KernelSpec ks1{spec.family_s, Eigen::VectorXd::Constant(1, spec.gamma0)};
    const double g2 = spec.gamma0_2 > 0 ? spec.gamma0_2 : spec.gamma0;
    KernelSpec ks2{spec.family_s, Eigen::VectorXd::Constant(1, g2)};
    Eigen::MatrixXd v1, v2;
    Eigen::VectorXd e1, e2;
    detail::eigen_descending(corr_matrix(ks1, linspace01(spec.n11)), v1, e1);
    detail::eigen_descending(corr_matrix(ks2, linspace01(spec.n12)), v2, e2);
    a.resize(spec.n1, spec.n11 * spec.n12);
    lam.resize(spec.n11 * spec.n12);
    for (int c1 = 0; c1 < spec.n11; ++c1)
      for (int c2 = 0; c2 < spec.n12; ++c2) {
        const int c = c1 * spec.n12 + c2;
        lam[c] = e1[c1] * e2[c2];
        for (int r1 = 0; r1 < spec.n11; ++r1)
          for (int r2 = 0; r2 < spec.n12; ++r2)
            a(r1 * spec.n12 + r2, c) = v1(r1, c1) * v2(r2, c2);
      }
    // Keep the d leading columns by eigenvalue product.
    std::vector<int> order(lam.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int u, int v) { return lam[u] > lam[v]; });
    Eigen::MatrixXd asel(spec.n1, d);
    Eigen::VectorXd lsel(d);
    for (int k = 0; k < d; ++k) {
      asel.col(k) = a.col(order[k]);
      lsel[k] = lam[order[k]];
    }
    a = asel;
    lam = lsel;
  } else {
    KernelSpec ks{spec.family_s, Eigen::VectorXd::Constant(1, spec.gamma0)};
    Eigen::MatrixXd v;
    Eigen::VectorXd e;
    detail::eigen_descending(corr_matrix(ks, coords_s), v, e);
    a = v.leftCols(d);
    lam = e.head(d);
  }

  // Factor draws.
  RngStream rz(derive_seed(spec.seed, 101));
  Eigen::MatrixXd z(d, spec.n2);
  for (int l = 0; l < d; ++l) {
    const double gx = spec.gamma_rule == SimSpec::GammaRule::Constant
                          ? spec.gamma_x
                          : 1.0 / static_cast<double>(l + 1);
    KernelSpec kx{spec.family_x, Eigen::VectorXd::Constant(1, gx)};
    const double var_l = spec.variance == SimSpec::FactorVariance::EigenScaled
                             ? spec.sigma2 * std::max(lam[l], 0.0)
                             : 1.0;
    Eigen::VectorXd eps(spec.n2);
    for (int j = 0; j < spec.n2; ++j) eps[j] = rz.normal();
    if (var_l <= 0.0) {
      z.row(l).setZero();
      continue;
    }
    const Eigen::MatrixXd cov = var_l * corr_matrix(kx, x);
    z.row(l) = dense_color(cov, eps).transpose();
  }

  // Mean component.
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(spec.n1, spec.n2);
  if (spec.mean != SimSpec::Mean::Zero && spec.mean_scale > 0.0) {
    RngStream rb(derive_seed(spec.seed, 102));
    Eigen::MatrixXd h1(spec.n1, 2), h2(spec.n2, 2);
    h1.col(0).setOnes();
    h1.col(1) = coords_s.col(0);
    h2.col(0).setOnes();
    h2.col(1) = x;
    if (spec.mean == SimSpec::Mean::Row || spec.mean == SimSpec::Mean::Mixed) {
      Eigen::MatrixXd b1(2, spec.n2);
      for (int j = 0; j < spec.n2; ++j)
        for (int r = 0; r < 2; ++r) b1(r, j) = spec.mean_scale * rb.normal();
      m += h1 * b1;
    }
    if (spec.mean == SimSpec::Mean::Col || spec.mean == SimSpec::Mean::Mixed) {
      Eigen::MatrixXd b2(2, spec.n1);
      for (int i = 0; i < spec.n1; ++i)
        for (int r = 0; r < 2; ++r) b2(r, i) = spec.mean_scale * rb.normal();
      m += (h2 * b2).transpose();
    }
  }

  // Field and noise.
  out.latent_mean = m + a * z;
  out.m_true = m;
  RngStream re(derive_seed(spec.seed, 103));
  out.truth = out.latent_mean;
  for (int j = 0; j < spec.n2; ++j)
    for (int i = 0; i < spec.n1; ++i) out.truth(i, j) += spec.noise_sd * re.normal();

  // Mask.
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> obs(spec.n1, spec.n2);
  obs.setConstant(true);
  if (spec.missing == SimSpec::Missing::Random) {
    if (!(spec.missing_param >= 0.0 && spec.missing_param < 1.0))
      throw invalid_parameter("simulate: missing fraction must be in [0, 1)");
    const std::int64_t n = static_cast<std::int64_t>(spec.n1) * spec.n2;
    const std::int64_t k = std::llround(spec.missing_param * static_cast<double>(n));
    std::vector<std::int64_t> idx(n);
    for (std::int64_t i = 0; i < n; ++i) idx[i] = i;
    RngStream rm(derive_seed(spec.seed, 104));
    for (std::int64_t i = n - 1; i > 0; --i) {
      const std::int64_t j = static_cast<std::int64_t>(rm.next_u64() % (i + 1));
      std::swap(idx[i], idx[j]);
    }
    for (std::int64_t i = 0; i < k; ++i)
      obs(idx[i] % spec.n1, idx[i] / spec.n1) = false;
  } else if (spec.missing == SimSpec::Missing::CenterDisk) {
    const double r2 = spec.missing_param * spec.missing_param;
    const double c1 = 0.5 * (spec.n1 - 1), c2 = 0.5 * (spec.n2 - 1);
    for (int j = 0; j < spec.n2; ++j)
      for (int i = 0; i < spec.n1; ++i) {
        const double u = (i - c1) / (0.5 * spec.n1);
        const double v = (j - c2) / (0.5 * spec.n2);
        if (u * u + v * v <= r2) obs(i, j) = false;
      }
  }

  out.data.y = out.truth;
  out.data.observed = obs;
  for (int j = 0; j < spec.n2; ++j)
    for (int i = 0; i < spec.n1; ++i)
      if (!obs(i, j)) out.data.y(i, j) = std::numeric_limits<double>::quiet_NaN();
  out.data.coords_s = coords_s;
  out.data.coords_x = x;
  if (kron) {
    KronInfo ki;
    ki.n11 = spec.n11;
    ki.n12 = spec.n12;
    ki.d1 = spec.kron_d1 > 0 ? spec.kron_d1 : spec.n11;
    ki.d2 = spec.kron_d2 > 0 ? spec.kron_d2 : spec.n12;
    out.data.kron = ki;
  }
  out.data.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Held-out metrics
// ---------------------------------------------------------------------------

struct Metrics {
  double rmse = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
  double length = std::numeric_limits<double>::quiet_NaN();
  std::int64_t cells = 0;
};

// Root mean squared error, central-interval coverage and mean interval length
// over held-out (unobserved) cells. Interval membership is strict.
inline Metrics compute_metrics(const Eigen::MatrixXd& mean, const Eigen::MatrixXd* lo,
                               const Eigen::MatrixXd* hi, const Eigen::MatrixXd& truth,
                               const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>& observed) {
  if (mean.rows() != truth.rows() || mean.cols() != truth.cols())
    throw invalid_parameter("compute_metrics: shape mismatch");
  Metrics m;
  KahanSum se, cov, len;
  std::int64_t k = 0;
  for (Eigen::Index j = 0; j < truth.cols(); ++j)
    for (Eigen::Index i = 0; i < truth.rows(); ++i) {
      if (observed(i, j)) continue;
      ++k;
      const double e = mean(i, j) - truth(i, j);
      se.add(e * e);
      if (lo && hi) {
        cov.add((truth(i, j) > (*lo)(i, j) && truth(i, j) < (*hi)(i, j)) ? 1.0 : 0.0);
        len.add((*hi)(i, j) - (*lo)(i, j));
      }
    }
  m.cells = k;
  if (k == 0) return m;
  m.rmse = std::sqrt(se.value() / k);
  if (lo && hi) {
    m.coverage = cov.value() / k;
    m.length = len.value() / k;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Fast-vs-dense equivalence suite
// ---------------------------------------------------------------------------

// One line of the equivalence report: worst observed gap for an operation
// against its tolerance. NaN gaps are sticky so a poisoned comparison can
// never look like a pass.
struct OpCheck {
  const char* op;
  double tol;
  double max_err = 0.0;

  void update(double e) {
    if (std::isnan(e) || e > max_err) max_err = e;
  }
  bool pass() const { return std::isfinite(max_err) && max_err < tol; }
};

struct EquivalenceReport {
  std::uint64_t seed = 0;
  int instances = 0;
  std::vector<OpCheck> checks;

  bool all_pass() const {
    if (checks.empty()) return false;
    for (const OpCheck& c : checks)
      if (!c.pass()) return false;
    return true;
  }
};

// Compares every fast-path operation against its dense counterpart on
// randomized small instances: random grids, kernels, factor counts and
// parameters, with the marginal likelihood checked through the full factor
// model and the per-factor filter ops checked elementwise.
// flip_transition_noise negates the state innovation covariances after each
// state-space build; this deliberate corruption must make the suite fail, so
// a passing run certifies that the comparisons have teeth.
inline EquivalenceReport equivalence_suite(std::uint64_t seed, int instances,
                                           bool flip_transition_noise = false) {
  if (instances < 1) throw invalid_parameter("equivalence suite: need at least one instance");
  EquivalenceReport rep;
  rep.seed = seed;
  rep.instances = instances;
  rep.checks = {{"marginal_loglik", 1e-6, 0.0},
                {"factor_loglik", 1e-8, 0.0},
                {"logdet", 1e-8, 0.0},
                {"whiten", 1e-8, 0.0},
                {"posterior_mean", 1e-8, 0.0}};
  OpCheck& c_marg = rep.checks[0];
  OpCheck& c_ll = rep.checks[1];
  OpCheck& c_det = rep.checks[2];
  OpCheck& c_wht = rep.checks[3];
  OpCheck& c_pm = rep.checks[4];

  RngStream rng(derive_seed(seed, 9001, 0, 0));
  const auto log_uniform = [&](double lo, double hi) {
    return lo * std::exp(rng.uniform() * std::log(hi / lo));
  };
  for (int t = 0; t < instances; ++t) {
    const int n1 = 2 + static_cast<int>(rng.uniform() * 7.0);   // 2..8
    const int n2 = 4 + static_cast<int>(rng.uniform() * 27.0);  // 4..30
    const int d = 1 + static_cast<int>(rng.uniform() * n1);
    const KernelFamily fam = t % 2 ? KernelFamily::Exponential : KernelFamily::Matern52;

    Eigen::VectorXd x(n2);
    double pos = 0.0;
    for (int j = 0; j < n2; ++j) {
      pos += 0.02 + 0.2 * rng.uniform();
      x[j] = pos;
    }
    Eigen::VectorXd beta(d), eta(d), scale(d);
    for (int l = 0; l < d; ++l) {
      beta[l] = log_uniform(0.2, 5.0);
      eta[l] = log_uniform(0.05, 20.0);
      scale[l] = log_uniform(0.5, 2.0);
    }
    const double s0sq = log_uniform(1e-3, 2.0);

    Eigen::MatrixXd gauss(n1, n1);
    for (Eigen::Index j = 0; j < gauss.cols(); ++j)
      for (Eigen::Index i = 0; i < gauss.rows(); ++i) gauss(i, j) = rng.normal();
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
    const Eigen::MatrixXd a =
        (qr.householderQ() * Eigen::MatrixXd::Identity(n1, n1)).leftCols(d);
    Loadings loadings;
    loadings.structure = Loadings::Structure::Plain;
    loadings.a = a;
    loadings.lambda = Eigen::VectorXd::Ones(d);

    Eigen::MatrixXd yc(n1, n2);
    for (Eigen::Index j = 0; j < yc.cols(); ++j)
      for (Eigen::Index i = 0; i < yc.rows(); ++i) yc(i, j) = 2.0 * rng.normal();

    // Model-level marginal likelihood against the assembled dense covariance.
    std::vector<Eigen::MatrixXd> sig;
    for (int l = 0; l < d; ++l) {
      KernelSpec ks;
      ks.family = fam;
      ks.range = Eigen::VectorXd::Constant(1, 1.0 / beta[l]);
      sig.push_back((s0sq * scale[l] / eta[l]) * corr_matrix(ks, x));
    }
    const Eigen::MatrixXd zero_mean = Eigen::MatrixXd::Zero(n1, n2);
    const double ll_fast =
        marginal_loglik(yc, zero_mean, loadings, fam, x, beta, eta, scale, s0sq);
    const double ll_dense = dense_joint_loglik(yc, a, sig, s0sq);
    c_marg.update(std::abs(ll_fast - ll_dense));

    // Per-factor filter operations, elementwise where vectors come back.
    for (int l = 0; l < d; ++l) {
      StateSpaceRep ssm = factor_ssm(fam, x, beta[l], eta[l], scale[l], s0sq);
      if (flip_transition_noise)
        std::visit([](auto& core) {
          for (auto& wj : core.w) wj = -wj;
        }, ssm.core);
      Eigen::MatrixXd cov = sig[static_cast<std::size_t>(l)];
      cov.diagonal().array() += s0sq;
      const Eigen::VectorXd yt = yc.transpose() * a.col(l);
      c_ll.update(std::abs(kf_loglik(ssm, yt, s0sq) - dense_gp_loglik(cov, yt)));
      c_det.update(std::abs(kf_logdet(ssm, s0sq) - dense_logdet(cov)));
      c_wht.update((kf_whiten(ssm, yt, s0sq) - dense_whiten(cov, yt)).cwiseAbs().maxCoeff());
      c_pm.update((smoother_mean(ssm, yt, s0sq) -
                   dense_posterior_mean(sig[static_cast<std::size_t>(l)], s0sq, yt))
                      .cwiseAbs()
                      .maxCoeff());
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Dense-likelihood reference sampler
// ---------------------------------------------------------------------------

// The blocked sampler with every density and conditional draw computed by
// dense Cholesky algebra instead of Kalman recursions. Block structure,
// stream derivation, priors, and proposal scales mirror mcmc_run exactly, so
// matched seeds give chains that differ only through the likelihood and draw
// implementations. Zero-mean and plain row structure only; small problems.
inline Chain dense_mcmc_run(const McmcConfig& config_in, const LatticeData& data) {
  data.validate();
  config_in.validate();
  if (config_in.mean != MeanKind::Zero)
    throw config_error("dense mcmc: zero-mean model only");
  if (data.kron) throw config_error("dense mcmc: plain row structure only");
  if (config_in.iterations % config_in.thinning != 0 && config_in.iterations > 0)
    throw config_error("dense mcmc: iterations must be a multiple of the thinning interval");

  const int n1 = data.n1(), n2 = data.n2();
  McmcConfig config = config_in;
  if (!(config.prop_sd_beta0 > 0.0)) config.prop_sd_beta0 = 40.0 / n1;
  if (!(config.prop_sd_factor > 0.0)) config.prop_sd_factor = 40.0 / n2;

  golf::detail::RowStructure rstruct = golf::detail::make_row_structure(config, data);
  const int d = rstruct.d;
  const int p1 = rstruct.p1();
  config.d = d;
  const PriorSpec priors = config.priors ? *config.priors : default_priors(data.coords_x, 1);
  config.priors = priors;
  const Eigen::VectorXd& x = data.coords_x;
  const bool shared = config.shared_kernel;
  const int blocks = shared ? 1 : d;

  const std::vector<std::int64_t> missing_idx = golf::detail::missing_indices(data);
  const auto nu = static_cast<std::int64_t>(missing_idx.size());
  const std::uint64_t obs_hash0 = golf::detail::observed_hash(data.y, data.observed);

  SamplerState st;
  st.iteration = 0;
  st.y = golf::detail::initial_imputation(data);
  st.log_beta0 = Eigen::VectorXd::Constant(p1, config.init_log_beta0);
  st.log_beta = Eigen::VectorXd::Constant(blocks, config.init_log_beta);
  st.log_eta = Eigen::VectorXd::Constant(blocks, config.init_log_eta);
  if (config.init_sigma0_sq > 0.0) {
    st.sigma0_sq = config.init_sigma0_sq;
  } else {
    const double v = golf::detail::observed_variance(data);
    if (!(v > 0.0))
      throw data_error("dense mcmc: observed cells have zero variance; set init_sigma0_sq");
    st.sigma0_sq = 0.1 * v;
  }
  config.init_sigma0_sq = st.sigma0_sq;

  // K(1/beta) scaled to the unit-noise form: scale * K / eta + I.
  const auto unit_cov = [&](double beta, double eta, double scale) {
    const KernelSpec ks{config.family_x, Eigen::VectorXd::Constant(1, 1.0 / beta)};
    Eigen::MatrixXd c = (scale / eta) * corr_matrix(ks, x);
    c.diagonal().array() += 1.0;
    return c;
  };
  const auto dense_marginal = [&](const Eigen::MatrixXd& yt, double frob2v,
                                  const Eigen::VectorXd& bv, const Eigen::VectorXd& ev,
                                  const Eigen::VectorXd& sc, double s0sq) {
    KahanSum ll;
    for (int l = 0; l < d; ++l)
      ll.add(dense_gp_loglik(s0sq * unit_cov(bv[l], ev[l], sc[l]), yt.row(l).transpose()));
    ll.add(complement_loglik(frob2v - squared_frobenius(yt), n1, d, n2, s0sq));
    return ll.value();
  };

  Loadings loadings =
      golf::detail::row_loadings(rstruct, config.family_s, st.log_beta0.array().exp().matrix());
  Eigen::VectorXd scale =
      shared ? golf::detail::loading_lambdas(loadings) : Eigen::VectorXd::Ones(d);
  double frob2 = squared_frobenius(st.y);
  Eigen::MatrixXd ytilde = project(loadings, st.y);

  const auto beta_vec = [&]() -> Eigen::VectorXd {
    if (shared) return Eigen::VectorXd::Constant(d, std::exp(st.log_beta[0]));
    return st.log_beta.array().exp().matrix();
  };
  const auto eta_vec = [&]() -> Eigen::VectorXd {
    if (shared) return Eigen::VectorXd::Constant(d, std::exp(st.log_eta[0]));
    return st.log_eta.array().exp().matrix();
  };

  const std::int64_t planned_rows = config.iterations / config.thinning;
  const std::int64_t burn = static_cast<std::int64_t>(
      std::floor(config.burn_in * static_cast<double>(planned_rows)));
  if (nu > 0 && planned_rows * nu > config.imputed_budget)
    throw config_error("dense mcmc: draws exceed the raw-storage budget");

  Chain chain;
  chain.config = config;
  chain.n1 = n1;
  chain.n2 = n2;
  chain.d = d;
  chain.kernel_blocks = blocks;
  chain.missing_idx = missing_idx;
  chain.beta0.resize(planned_rows, p1);
  chain.beta.resize(planned_rows, blocks);
  chain.eta.resize(planned_rows, blocks);
  chain.sigma0_sq.resize(planned_rows);
  chain.imputed.resize(planned_rows, nu);
  chain.latent_sum = Eigen::MatrixXd::Zero(n1, n2);
  chain.accept_kernel.assign(static_cast<std::size_t>(blocks), 0);

  for (std::int64_t t = 1; t <= config.iterations; ++t) {
    if (!config.fix_kernel_params) {
      if (shared) {
        RngStream rs(derive_seed(config.seed, static_cast<std::uint64_t>(t), 1, 0));
        Eigen::VectorXd cur(p1 + 2);
        cur.head(p1) = st.log_beta0;
        cur[p1] = st.log_beta[0];
        cur[p1 + 1] = st.log_eta[0];
        Eigen::VectorXd sds(p1 + 2);
        sds.head(p1).setConstant(config.prop_sd_beta0);
        sds[p1] = config.prop_sd_factor;
        sds[p1 + 1] = config.prop_sd_factor;
        Loadings prop_load;
        Eigen::VectorXd prop_scale;
        Eigen::MatrixXd prop_yt;
        const auto target = [&](const Eigen::VectorXd& v) {
          const Eigen::VectorXd b0 = v.head(p1).array().exp().matrix();
          const double bb = std::exp(v[p1]);
          const double ee = std::exp(v[p1 + 1]);
          prop_load = golf::detail::row_loadings(rstruct, config.family_s, b0);
          prop_scale = golf::detail::loading_lambdas(prop_load);
          if (!(prop_scale.minCoeff() > 0.0))
            throw invalid_parameter("dense mcmc: non-positive eigenvalue");
          prop_yt = project(prop_load, st.y);
          return dense_marginal(prop_yt, frob2, Eigen::VectorXd::Constant(d, bb),
                                Eigen::VectorXd::Constant(d, ee), prop_scale, st.sigma0_sq) +
                 log_prior_jr(priors, bb, ee) + log_prior_beta0(priors, b0) + v.sum();
        };
        const double cur_target =
            dense_marginal(ytilde, frob2, beta_vec(), eta_vec(), scale, st.sigma0_sq) +
            log_prior_jr(priors, std::exp(st.log_beta[0]), std::exp(st.log_eta[0])) +
            log_prior_beta0(priors, st.log_beta0.array().exp().matrix()) + cur.sum();
        const MetropolisResult res = metropolis_block(cur, cur_target, target, sds, rs);
        if (res.accepted) {
          st.log_beta0 = res.log_params.head(p1);
          st.log_beta[0] = res.log_params[p1];
          st.log_eta[0] = res.log_params[p1 + 1];
          loadings = std::move(prop_load);
          scale = std::move(prop_scale);
          ytilde = std::move(prop_yt);
          ++chain.accept_kernel[0];
        }
      } else {
        for (int l = 0; l < d; ++l) {
          RngStream rs(derive_seed(config.seed, static_cast<std::uint64_t>(t), 1,
                                   static_cast<std::uint64_t>(l)));
          Eigen::VectorXd cur(2);
          cur << st.log_beta[l], st.log_eta[l];
          const auto target = [&](const Eigen::VectorXd& v) {
            const double bb = std::exp(v[0]);
            const double ee = std::exp(v[1]);
            return dense_gp_loglik(st.sigma0_sq * unit_cov(bb, ee, scale[l]),
                                   ytilde.row(l).transpose()) +
                   log_prior_jr(priors, bb, ee) + v[0] + v[1];
          };
          const double cur_target = target(cur);
          const MetropolisResult res =
              metropolis_block(cur, cur_target, target, config.prop_sd_factor, rs);
          if (res.accepted) {
            st.log_beta[l] = res.log_params[0];
            st.log_eta[l] = res.log_params[1];
            ++chain.accept_kernel[static_cast<std::size_t>(l)];
          }
        }

        {
          RngStream rs(derive_seed(config.seed, static_cast<std::uint64_t>(t), 2, 0));
          Loadings prop_load;
          Eigen::MatrixXd prop_yt;
          const Eigen::VectorXd bv = beta_vec(), ev = eta_vec();
          const auto target = [&](const Eigen::VectorXd& v) {
            const Eigen::VectorXd b0 = v.array().exp().matrix();
            prop_load = golf::detail::row_loadings(rstruct, config.family_s, b0);
            prop_yt = project(prop_load, st.y);
            return dense_marginal(prop_yt, frob2, bv, ev, scale, st.sigma0_sq) +
                   log_prior_beta0(priors, b0) + v.sum();
          };
          const double cur_target =
              dense_marginal(ytilde, frob2, bv, ev, scale, st.sigma0_sq) +
              log_prior_beta0(priors, st.log_beta0.array().exp().matrix()) +
              st.log_beta0.sum();
          const MetropolisResult res =
              metropolis_block(st.log_beta0, cur_target, target, config.prop_sd_beta0, rs);
          if (res.accepted) {
            st.log_beta0 = res.log_params;
            loadings = std::move(prop_load);
            ytilde = std::move(prop_yt);
            ++chain.accept_beta0;
          }
        }
      }
    }

    if (!config.fix_sigma0) {
      RngStream rs(derive_seed(config.seed, static_cast<std::uint64_t>(t), 3, 0));
      const Eigen::VectorXd bv = beta_vec(), ev = eta_vec();
      KahanSum s;
      for (int l = 0; l < d; ++l)
        s.add(dense_whiten(unit_cov(bv[l], ev[l], scale[l]), ytilde.row(l).transpose())
                  .squaredNorm());
      s.add(std::max(frob2 - squared_frobenius(ytilde), 0.0));
      st.sigma0_sq = rs.inv_gamma(0.5 * static_cast<double>(n1) * static_cast<double>(n2),
                                  0.5 * s.value());
    }

    Eigen::MatrixXd z(d, n2);
    const Eigen::VectorXd bv = beta_vec(), ev = eta_vec();
    for (int l = 0; l < d; ++l) {
      RngStream rs(derive_seed(config.seed, static_cast<std::uint64_t>(t), 5,
                               static_cast<std::uint64_t>(l)));
      const Eigen::MatrixXd sig =
          (st.sigma0_sq * scale[l] / ev[l]) *
          corr_matrix(KernelSpec{config.family_x, Eigen::VectorXd::Constant(1, 1.0 / bv[l])}, x);
      Eigen::MatrixXd sigt = sig;
      sigt.diagonal().array() += st.sigma0_sq;
      const GaussianMoments post =
          dense_gp_posterior(sig, sig, sigt, ytilde.row(l).transpose());
      Eigen::VectorXd eps(n2);
      for (Eigen::Index i = 0; i < n2; ++i) eps[i] = rs.normal();
      z.row(l) = (post.mean + dense_chol_lower(post.cov) * eps).transpose();
    }
    const Eigen::MatrixXd az = unproject(loadings, z);
    if (nu > 0) {
      RngStream rs(derive_seed(config.seed, static_cast<std::uint64_t>(t), 5,
                               static_cast<std::uint64_t>(d)));
      const double sd0 = std::sqrt(st.sigma0_sq);
      for (const std::int64_t idx : missing_idx) {
        const Eigen::Index i = idx % n1;
        const Eigen::Index j = idx / n1;
        st.y(i, j) = az(i, j) + sd0 * rs.normal();
      }
      frob2 = squared_frobenius(st.y);
      ytilde = project(loadings, st.y);
    }

    if (config.check_observed &&
        golf::detail::observed_hash(st.y, data.observed) != obs_hash0)
      throw data_error("dense mcmc iteration " + std::to_string(t) +
                       ": observed cells were modified");
    if (!(st.sigma0_sq > 0.0) || !st.y.allFinite())
      throw numeric_error("dense mcmc iteration " + std::to_string(t) + ": non-finite state");

    st.iteration = t;

    if (t % config.thinning == 0) {
      const std::int64_t g = t / config.thinning - 1;
      chain.beta0.row(g) = st.log_beta0.array().exp().matrix().transpose();
      chain.beta.row(g) = st.log_beta.array().exp().matrix().transpose();
      chain.eta.row(g) = st.log_eta.array().exp().matrix().transpose();
      chain.sigma0_sq[g] = st.sigma0_sq;
      for (std::int64_t k = 0; k < nu; ++k)
        chain.imputed(g, k) = st.y(missing_idx[static_cast<std::size_t>(k)] % n1,
                                   missing_idx[static_cast<std::size_t>(k)] / n1);
      if (g >= burn) {
        ++chain.post_rows;
        chain.latent_sum += az;
      }
    }
  }

  chain.trials = config.iterations;
  chain.state = std::move(st);
  return chain;
}

}  // namespace golf::oracle

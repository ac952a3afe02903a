#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "golf/errors.hpp"
#include "golf/kernels.hpp"
#include "golf/loadings.hpp"
#include "golf/rng.hpp"
#include "golf/statespace.hpp"
#include "golf/util.hpp"

namespace golf {

// ---------------------------------------------------------------------------
// Mean structure
// ---------------------------------------------------------------------------

enum class MeanKind { Zero, RowTrend, ColTrend, Mixed };

inline std::string to_string(MeanKind k) {
  switch (k) {
    case MeanKind::Zero: return "zero";
    case MeanKind::RowTrend: return "row";
    case MeanKind::ColTrend: return "col";
    case MeanKind::Mixed: return "mixed";
  }
  return "?";
}

inline MeanKind mean_kind_from_string(const std::string& s) {
  if (s == "zero") return MeanKind::Zero;
  if (s == "row") return MeanKind::RowTrend;
  if (s == "col") return MeanKind::ColTrend;
  if (s == "mixed") return MeanKind::Mixed;
  throw config_error("unknown mean kind '" + s + "'");
}

// Row basis h1 (n1 x q1) acts as M = h1 B1; column basis h2 (n2 x q2) acts as
// M = (h2 B2)^T. Projection helpers are cached at construction.
struct MeanModel {
  MeanKind kind = MeanKind::Zero;
  Eigen::MatrixXd h1, h2;
  Eigen::MatrixXd t1, t2;  // (H^T H)^{-1} H^T
  Eigen::MatrixXd l_h2;    // square root of (h2^T h2)^{-1}

  int q1() const { return static_cast<int>(h1.cols()); }
  int q2() const { return static_cast<int>(h2.cols()); }
  bool uses_h1() const { return kind == MeanKind::RowTrend || kind == MeanKind::Mixed; }
  bool uses_h2() const { return kind == MeanKind::ColTrend || kind == MeanKind::Mixed; }
};

namespace detail {

inline void check_basis(const Eigen::MatrixXd& h, const char* name) {
  if (h.cols() < 1 || h.rows() <= h.cols())
    throw invalid_parameter(std::string("mean basis ") + name +
                            " must be tall (q < n) with at least one column");
  if (!h.allFinite())
    throw invalid_parameter(std::string("mean basis ") + name + " has non-finite entries");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(h);
  if (qr.rank() < h.cols())
    throw invalid_parameter(std::string("mean basis ") + name + " is rank deficient");
}

}  // namespace detail

inline MeanModel make_mean_model(MeanKind kind, Eigen::MatrixXd h1 = {},
                                 Eigen::MatrixXd h2 = {}) {
  MeanModel m;
  m.kind = kind;
  if (kind == MeanKind::RowTrend || kind == MeanKind::Mixed) {
    detail::check_basis(h1, "h1");
    m.h1 = std::move(h1);
    const Eigen::MatrixXd gram = m.h1.transpose() * m.h1;
    m.t1 = gram.llt().solve(m.h1.transpose());
  }
  if (kind == MeanKind::ColTrend || kind == MeanKind::Mixed) {
    detail::check_basis(h2, "h2");
    m.h2 = std::move(h2);
    const Eigen::MatrixXd gram = m.h2.transpose() * m.h2;
    m.t2 = gram.llt().solve(m.h2.transpose());
    const Eigen::MatrixXd inv = gram.llt().solve(
        Eigen::MatrixXd::Identity(m.h2.cols(), m.h2.cols()));
    Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (inv + inv.transpose()));
    if (llt.info() != Eigen::Success)
      throw numeric_error("mean basis h2: gram inverse not positive definite");
    m.l_h2 = llt.matrixL();
  }
  return m;
}

inline Eigen::MatrixXd mean_matrix(const MeanModel& m, const Eigen::MatrixXd& b1,
                                   const Eigen::MatrixXd& b2, int n1, int n2) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n1, n2);
  if (m.uses_h1()) {
    if (b1.rows() != m.q1() || b1.cols() != n2)
      throw invalid_parameter("mean_matrix: b1 shape mismatch");
    out += m.h1 * b1;
  }
  if (m.uses_h2()) {
    if (b2.rows() != m.q2() || b2.cols() != n1)
      throw invalid_parameter("mean_matrix: b2 shape mismatch");
    out += (m.h2 * b2).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Priors
// ---------------------------------------------------------------------------

// Kernel/nugget prior: (sum_i (c2 b_i + eta))^{c1} * exp(-c3 sum_i (e b_i + eta))
// with e = jr_exp_coef. Loadings ranges get the (improper) inverse gamma with
// shape beta0_shape and rate beta0_rate, implemented as the unnormalized density.
struct PriorSpec {
  double jr_c1 = -0.5;
  double jr_c2 = 0.5;
  double jr_c3 = 1.0;
  double jr_exp_coef = 0.5;
  double beta0_shape = -0.5;
  double beta0_rate = 1.0;
};

// Mean pairwise distance of a sorted grid in O(n).
inline double mean_pairwise_distance(const Eigen::VectorXd& x_sorted) {
  const Eigen::Index n = x_sorted.size();
  if (n < 2) return 1.0;
  KahanSum s;
  for (Eigen::Index j = 0; j < n; ++j)
    s.add(x_sorted[j] * (2.0 * static_cast<double>(j) - static_cast<double>(n) + 1.0));
  return s.value() / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

inline PriorSpec default_priors(const Eigen::VectorXd& x_sorted, int p2 = 1) {
  PriorSpec p;
  p.jr_c1 = 0.5 - p2;
  p.jr_c2 = 0.5;
  p.jr_c3 = mean_pairwise_distance(x_sorted);
  p.jr_exp_coef = p.jr_c2;
  return p;
}

inline double log_prior_jr(const PriorSpec& p, const Eigen::VectorXd& beta, double eta) {
  double lin = 0.0, decay = 0.0;
  for (Eigen::Index i = 0; i < beta.size(); ++i) {
    if (!(beta[i] > 0.0)) throw invalid_parameter("log_prior_jr: beta must be > 0");
    lin += p.jr_c2 * beta[i] + eta;
    decay += p.jr_exp_coef * beta[i] + eta;
  }
  if (!(eta > 0.0)) throw invalid_parameter("log_prior_jr: eta must be > 0");
  if (!(lin > 0.0)) return -std::numeric_limits<double>::infinity();
  return p.jr_c1 * std::log(lin) - p.jr_c3 * decay;
}

inline double log_prior_jr(const PriorSpec& p, double beta, double eta) {
  return log_prior_jr(p, Eigen::VectorXd::Constant(1, beta), eta);
}

inline double log_prior_beta0(const PriorSpec& p, const Eigen::VectorXd& beta0) {
  double lp = 0.0;
  for (Eigen::Index i = 0; i < beta0.size(); ++i) {
    if (!(beta0[i] > 0.0)) throw invalid_parameter("log_prior_beta0: beta0 must be > 0");
    lp += -(p.beta0_shape + 1.0) * std::log(beta0[i]) - p.beta0_rate / beta0[i];
  }
  return lp;
}

// ---------------------------------------------------------------------------
// Marginal likelihood
// ---------------------------------------------------------------------------

// State-space form of one factor under the nugget parameterization:
// Cov(ytilde_l) = s0sq (scale K / eta + I), so the signal variance is
// s0sq * scale / eta.
inline StateSpaceRep factor_ssm(KernelFamily family, const Eigen::VectorXd& x, double beta,
                                double eta, double scale, double s0sq) {
  if (!(beta > 0.0) || !std::isfinite(beta))
    throw invalid_parameter("factor: beta must be finite and > 0");
  if (!(eta > 0.0) || !std::isfinite(eta))
    throw invalid_parameter("factor: eta must be finite and > 0");
  if (!(scale > 0.0) || !std::isfinite(scale))
    throw invalid_parameter("factor: eigenvalue scale must be finite and > 0");
  return ssm_build(family, 1.0 / beta, s0sq * scale / eta, x);
}

inline double factor_loglik(KernelFamily family, const Eigen::VectorXd& x,
                            const Eigen::VectorXd& ytilde, double beta, double eta, double scale,
                            double s0sq) {
  return kf_loglik(factor_ssm(family, x, beta, eta, scale, s0sq), ytilde, s0sq);
}

// Log density of the n1 - d complement projections given only their squared
// mass: excess2 = |Y - M|_F^2 - sum_l |ytilde_l|^2 >= 0.
inline double complement_loglik(double excess2, Eigen::Index n1, Eigen::Index d, Eigen::Index n2,
                                double s0sq) {
  if (d > n1) throw invalid_parameter("complement_loglik: d exceeds n1");
  excess2 = std::max(excess2, 0.0);
  if (d == n1) return 0.0;
  return -0.5 * excess2 / s0sq -
         0.5 * static_cast<double>((n1 - d) * n2) * std::log(2.0 * M_PI * s0sq);
}

// Marginal likelihood from cached projections: ytilde = A^T (Y - M) and the
// total squared residual mass |Y - M|_F^2.
inline double marginal_loglik_projected(const Eigen::MatrixXd& ytilde, double frob2_total,
                                        Eigen::Index n1, KernelFamily family,
                                        const Eigen::VectorXd& x, const Eigen::VectorXd& beta,
                                        const Eigen::VectorXd& eta, const Eigen::VectorXd& scale,
                                        double s0sq) {
  const Eigen::Index d = ytilde.rows();
  if (beta.size() != d || eta.size() != d || scale.size() != d)
    throw invalid_parameter("marginal_loglik: parameter vectors must have length d");
  if (!(s0sq > 0.0) || !std::isfinite(s0sq))
    throw invalid_parameter("marginal_loglik: noise variance must be finite and > 0");
  std::vector<double> part(d);
  parallel_for(d, [&](std::int64_t l) {
    part[l] = factor_loglik(family, x, ytilde.row(l).transpose(), beta[l], eta[l], scale[l], s0sq);
  });
  KahanSum ll;
  for (double v : part) ll.add(v);
  const double excess2 = frob2_total - squared_frobenius(ytilde);
  ll.add(complement_loglik(excess2, n1, d, ytilde.cols(), s0sq));
  return ll.value();
}

inline double marginal_loglik(const Eigen::MatrixXd& y, const Eigen::MatrixXd& m,
                              const Loadings& loadings, KernelFamily family,
                              const Eigen::VectorXd& x, const Eigen::VectorXd& beta,
                              const Eigen::VectorXd& eta, const Eigen::VectorXd& scale,
                              double s0sq) {
  if (y.rows() != m.rows() || y.cols() != m.cols())
    throw invalid_parameter("marginal_loglik: mean/data shape mismatch");
  const Eigen::MatrixXd yc = y - m;
  if (!yc.allFinite()) throw invalid_parameter("marginal_loglik: non-finite data");
  const Eigen::MatrixXd ytilde = project(loadings, yc);
  return marginal_loglik_projected(ytilde, squared_frobenius(yc), y.rows(), family, x, beta, eta,
                                   scale, s0sq);
}

// ---------------------------------------------------------------------------
// Factor posteriors
// ---------------------------------------------------------------------------

inline Eigen::VectorXd posterior_factor_mean(KernelFamily family, const Eigen::VectorXd& x,
                                             const Eigen::VectorXd& ytilde, double beta,
                                             double eta, double scale, double s0sq) {
  return smoother_mean(factor_ssm(family, x, beta, eta, scale, s0sq), ytilde, s0sq);
}

inline Eigen::VectorXd posterior_factor_draw(KernelFamily family, const Eigen::VectorXd& x,
                                             const Eigen::VectorXd& ytilde, double beta,
                                             double eta, double scale, double s0sq,
                                             RngStream& rng) {
  return backward_sample(factor_ssm(family, x, beta, eta, scale, s0sq), ytilde, s0sq, rng);
}

// ---------------------------------------------------------------------------
// Exact mean-coefficient samplers
// ---------------------------------------------------------------------------

namespace detail {

inline Eigen::MatrixXd std_normal_mat(Eigen::Index r, Eigen::Index c, RngStream& rng) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.normal();
  return m;
}

}  // namespace detail

// Row-trend coefficients: B1 | Y exactly, for M = h1 B1.
inline Eigen::MatrixXd sample_b1(const Eigen::MatrixXd& y, const MeanModel& mm,
                                 const Loadings& loadings, KernelFamily family,
                                 const Eigen::VectorXd& x, const Eigen::VectorXd& beta,
                                 const Eigen::VectorXd& eta, const Eigen::VectorXd& scale,
                                 double s0sq, RngStream& rng) {
  const Eigen::Index d = loadings.d(), n2 = y.cols();
  // Column l of bt is a draw from N(0, Cov(ytilde_l)).
  Eigen::MatrixXd bt(d, n2);  // stored transposed: row l
  for (Eigen::Index l = 0; l < d; ++l) {
    const auto rep = factor_ssm(family, x, beta[l], eta[l], scale[l], s0sq);
    Eigen::VectorXd z(n2);
    for (Eigen::Index j = 0; j < n2; ++j) z[j] = rng.normal();
    bt.row(l) = kf_color(rep, z, s0sq).transpose();
  }
  const Eigen::MatrixXd z01 = detail::std_normal_mat(y.rows(), n2, rng);
  return mm.t1 * (y + unproject(loadings, bt) +
                  std::sqrt(s0sq) * residual_project(loadings, z01));
}

// Column-trend coefficients: B2 | Y exactly, for M = (h2 B2)^T. Pass the
// partial residual as y when a row trend is also present.
inline Eigen::MatrixXd sample_b2(const Eigen::MatrixXd& y, const MeanModel& mm,
                                 const Loadings& loadings, KernelFamily family,
                                 const Eigen::VectorXd& x, const Eigen::VectorXd& beta,
                                 const Eigen::VectorXd& eta, const Eigen::VectorXd& scale,
                                 double s0sq, RngStream& rng) {
  const Eigen::Index d = loadings.d(), n1 = y.rows(), q2 = mm.q2();
  const Eigen::MatrixXd ytilde = project(loadings, y);
  Eigen::MatrixXd mu(q2, d);   // generalized least squares coefficient per factor
  Eigen::MatrixXd noise(d, q2);  // row l: draw from N(0, (h2^T Sigma_l^{-1} h2)^{-1})
  for (Eigen::Index l = 0; l < d; ++l) {
    const auto rep = factor_ssm(family, x, beta[l], eta[l], scale[l], s0sq);
    Eigen::MatrixXd wh(y.cols(), q2);
    for (Eigen::Index c = 0; c < q2; ++c) wh.col(c) = kf_whiten(rep, mm.h2.col(c), s0sq);
    const Eigen::VectorXd wy = kf_whiten(rep, ytilde.row(l).transpose(), s0sq);
    const Eigen::MatrixXd gram = wh.transpose() * wh;
    Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (gram + gram.transpose()));
    if (llt.info() != Eigen::Success)
      throw numeric_error("sample_b2: whitened basis gram is rank deficient");
    mu.col(l) = llt.solve(wh.transpose() * wy);
    Eigen::VectorXd z(q2);
    for (Eigen::Index c = 0; c < q2; ++c) z[c] = rng.normal();
    noise.row(l) = llt.matrixU().solve(z).transpose();
  }
  // sum_l (mu_l + noise_l) a_l^T: a rank-1 stack over the loading columns,
  // applied through the structure-aware unproject.
  Eigen::MatrixXd b2 =
      unproject(loadings, mu.transpose() + noise).transpose();
  // Complement directions.
  b2 += mm.t2 * residual_project(loadings, y).transpose();
  const Eigen::MatrixXd z02 = detail::std_normal_mat(q2, n1, rng);
  b2 += std::sqrt(s0sq) * mm.l_h2 *
        (residual_project(loadings, z02.transpose())).transpose();
  return b2;
}

// Row-trend coefficients in the mixed model: the column-basis span is removed
// from the factor-direction noise (projector P_l) and from the complement
// noise (projector P0).
inline Eigen::MatrixXd sample_b1_mixed(const Eigen::MatrixXd& y, const MeanModel& mm,
                                       const Loadings& loadings, KernelFamily family,
                                       const Eigen::VectorXd& x, const Eigen::VectorXd& beta,
                                       const Eigen::VectorXd& eta, const Eigen::VectorXd& scale,
                                       double s0sq, RngStream& rng) {
  const Eigen::Index d = loadings.d(), n2 = y.cols(), q2 = mm.q2();
  Eigen::MatrixXd ut(d, n2);  // row l: draw from N(0, P_l^T Sigma_l^{-1} P_l)
  for (Eigen::Index l = 0; l < d; ++l) {
    const auto rep = factor_ssm(family, x, beta[l], eta[l], scale[l], s0sq);
    // Sigma_l^{-1} v = (v - smoother_mean(v)) / s0sq.
    Eigen::MatrixXd sh2(n2, q2);
    for (Eigen::Index c = 0; c < q2; ++c)
      sh2.col(c) = (mm.h2.col(c) - smoother_mean(rep, mm.h2.col(c), s0sq)) / s0sq;
    const Eigen::MatrixXd gram = mm.h2.transpose() * sh2;
    Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (gram + gram.transpose()));
    if (llt.info() != Eigen::Success)
      throw numeric_error("sample_b1_mixed: h2 information matrix is rank deficient");
    Eigen::VectorXd z(n2);
    for (Eigen::Index j = 0; j < n2; ++j) z[j] = rng.normal();
    const Eigen::VectorXd w = kf_color(rep, z, s0sq);
    const Eigen::VectorXd v = (w - smoother_mean(rep, w, s0sq)) / s0sq;
    ut.row(l) = (v - sh2 * llt.solve(mm.h2.transpose() * v)).transpose();
  }
  const Eigen::MatrixXd z01 = detail::std_normal_mat(y.rows(), n2, rng);
  Eigen::MatrixXd res = residual_project(loadings, z01);
  res -= (res * mm.h2) * mm.t2;  // right-multiply by P0 = I - h2 (h2^T h2)^{-1} h2^T
  return mm.t1 * (y + unproject(loadings, ut) + std::sqrt(s0sq) * res);
}

// Gibbs draw of the noise variance under the reference prior 1/s0sq.
inline double sample_sigma0_sq(const Eigen::MatrixXd& ytilde, double frob2_total,
                               Eigen::Index n1, Eigen::Index n2, KernelFamily family,
                               const Eigen::VectorXd& x, const Eigen::VectorXd& beta,
                               const Eigen::VectorXd& eta, const Eigen::VectorXd& scale,
                               RngStream& rng) {
  const Eigen::Index d = ytilde.rows();
  std::vector<double> part(d);
  parallel_for(d, [&](std::int64_t l) {
    // Unit-noise whitening gives ytilde^T (scale K / eta + I)^{-1} ytilde.
    const auto rep = ssm_build(family, 1.0 / beta[l], scale[l] / eta[l], x);
    part[l] = kf_whiten(rep, ytilde.row(l).transpose(), 1.0).squaredNorm();
  });
  KahanSum s;
  for (double v : part) s.add(v);
  s.add(std::max(frob2_total - squared_frobenius(ytilde), 0.0));
  const double rate = 0.5 * s.value();
  if (!(rate > 1e-300)) throw numeric_error("sample_sigma0_sq: degenerate quadratic form");
  return rng.inv_gamma(0.5 * static_cast<double>(n1) * static_cast<double>(n2), rate);
}

// ---------------------------------------------------------------------------
// Random-walk Metropolis on log parameters
// ---------------------------------------------------------------------------

struct MetropolisResult {
  Eigen::VectorXd log_params;
  double log_target;
  bool accepted = false;
};

// One symmetric Gaussian step. The target is over log parameters and must
// already include any Jacobian terms; non-finite proposals are rejected.
// Per-coordinate proposal scales allow blocks mixing parameters of different
// posterior widths.
inline MetropolisResult metropolis_block(
    const Eigen::VectorXd& cur, double cur_target,
    const std::function<double(const Eigen::VectorXd&)>& log_target,
    const Eigen::VectorXd& prop_sd, RngStream& rng) {
  if (prop_sd.size() != cur.size())
    throw invalid_parameter("metropolis_block: proposal scale dimension mismatch");
  Eigen::VectorXd prop(cur.size());
  for (Eigen::Index i = 0; i < cur.size(); ++i) prop[i] = cur[i] + prop_sd[i] * rng.normal();
  double t;
  try {
    t = log_target(prop);
  } catch (const invalid_parameter&) {
    t = -std::numeric_limits<double>::infinity();
  } catch (const numeric_error&) {
    t = -std::numeric_limits<double>::infinity();
  }
  const double u = rng.uniform();
  if (std::isfinite(t) && std::log(u) < t - cur_target) return {prop, t, true};
  return {cur, cur_target, false};
}

inline MetropolisResult metropolis_block(
    const Eigen::VectorXd& cur, double cur_target,
    const std::function<double(const Eigen::VectorXd&)>& log_target, double prop_sd,
    RngStream& rng) {
  return metropolis_block(cur, cur_target, log_target,
                          Eigen::VectorXd::Constant(cur.size(), prop_sd), rng);
}

}  // namespace golf

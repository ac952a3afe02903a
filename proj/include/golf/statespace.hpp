#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <variant>
#include <vector>

#include "golf/errors.hpp"
#include "golf/kernels.hpp"
#include "golf/rng.hpp"
#include "golf/util.hpp"

namespace golf {

namespace detail {

// Stationary Gauss-Markov representation of a one-dimensional kernel on an
// ordered grid: state theta_j with theta_1 ~ N(0, W0),
// theta_{j+1} = G[j] theta_j + w_j, w_j ~ N(0, W[j]), signal z_j = theta_j(0).
template <int D>
struct SsmCore {
  using Mat = Eigen::Matrix<double, D, D>;
  using Vec = Eigen::Matrix<double, D, 1>;

  Eigen::VectorXd grid;
  double sigma2 = 1.0;  // marginal signal variance
  Mat w0;
  std::vector<Mat> g;  // g[j]: step j -> j+1 (0-based), size n-1
  std::vector<Mat> w;
};

inline SsmCore<1> build_exponential(double gamma, double sigma2, const Eigen::VectorXd& grid) {
  SsmCore<1> c;
  c.grid = grid;
  c.sigma2 = sigma2;
  c.w0(0, 0) = sigma2;
  const Eigen::Index n = grid.size();
  c.g.resize(n - 1);
  c.w.resize(n - 1);
  for (Eigen::Index j = 0; j + 1 < n; ++j) {
    const double rho = std::exp(-(grid[j + 1] - grid[j]) / gamma);
    c.g[j](0, 0) = rho;
    c.w[j](0, 0) = sigma2 * (1.0 - rho * rho);
  }
  return c;
}

// Matern 5/2: companion state (z, z', z''), triple eigenvalue -kappa with
// kappa = sqrt(5)/gamma. exp(A dt) in closed form from the nilpotent part.
inline SsmCore<3> build_matern52(double gamma, double sigma2, const Eigen::VectorXd& grid) {
  SsmCore<3> c;
  c.grid = grid;
  c.sigma2 = sigma2;
  const double k = std::sqrt(5.0) / gamma;
  const double k2 = k * k;
  Eigen::Matrix3d w0;
  w0 << 1.0, 0.0, -k2 / 3.0,
        0.0, k2 / 3.0, 0.0,
        -k2 / 3.0, 0.0, k2 * k2;
  c.w0 = sigma2 * w0;
  Eigen::Matrix3d b;  // A + kappa I, nilpotent of order 3
  b << k, 1.0, 0.0,
       0.0, k, 1.0,
       -k2 * k, -3.0 * k2, -2.0 * k;
  const Eigen::Matrix3d b2 = b * b;
  const Eigen::Index n = grid.size();
  c.g.resize(n - 1);
  c.w.resize(n - 1);
  for (Eigen::Index j = 0; j + 1 < n; ++j) {
    const double dt = grid[j + 1] - grid[j];
    const Eigen::Matrix3d gj =
        std::exp(-k * dt) * (Eigen::Matrix3d::Identity() + dt * b + (0.5 * dt * dt) * b2);
    c.g[j] = gj;
    Eigen::Matrix3d wj = c.w0 - gj * c.w0 * gj.transpose();
    c.w[j] = 0.5 * (wj + wj.transpose());
  }
  return c;
}

// Forward Kalman pass. Innovation means/variances are always produced; state
// moments only when store_states is set (smoother and backward sampler).
template <int D>
struct FilterPass {
  double loglik = 0.0;
  Eigen::VectorXd f, q;  // one-step-ahead predictive mean / variance of y_j
  std::vector<typename SsmCore<D>::Vec> m, a;
  std::vector<typename SsmCore<D>::Mat> p, r;
};

template <int D>
FilterPass<D> run_filter(const SsmCore<D>& c, const Eigen::VectorXd& y, double s0sq,
                         bool store_states) {
  using Vec = typename SsmCore<D>::Vec;
  using Mat = typename SsmCore<D>::Mat;
  const Eigen::Index n = c.grid.size();
  FilterPass<D> out;
  out.f.resize(n);
  out.q.resize(n);
  if (store_states) {
    out.m.resize(n);
    out.a.resize(n);
    out.p.resize(n);
    out.r.resize(n);
  }
  Vec m = Vec::Zero();
  Mat p = c.w0;
  KahanSum ll;
  for (Eigen::Index j = 0; j < n; ++j) {
    Vec a;
    Mat r;
    if (j == 0) {
      a = Vec::Zero();
      r = c.w0;
    } else {
      a = c.g[j - 1] * m;
      r = c.g[j - 1] * p * c.g[j - 1].transpose() + c.w[j - 1];
      r = 0.5 * (r + r.transpose()).eval();
    }
    const double f = a(0);
    const double q = r(0, 0) + s0sq;
    out.f[j] = f;
    out.q[j] = q;
    const double v = y[j] - f;
    ll.add(-0.5 * (std::log(2.0 * M_PI * q) + v * v / q));
    const Vec gain = r.col(0) / q;
    m = a + gain * v;
    p = r - gain * r.row(0);
    p = 0.5 * (p + p.transpose()).eval();
    if (store_states) {
      out.a[j] = a;
      out.r[j] = r;
      out.m[j] = m;
      out.p[j] = p;
    }
  }
  out.loglik = ll.value();
  return out;
}

template <int D>
Eigen::VectorXd color_impl(const SsmCore<D>& c, const Eigen::VectorXd& v, double s0sq) {
  using Vec = typename SsmCore<D>::Vec;
  using Mat = typename SsmCore<D>::Mat;
  const Eigen::Index n = c.grid.size();
  Eigen::VectorXd y(n);
  Vec m = Vec::Zero();
  Mat p = c.w0;
  for (Eigen::Index j = 0; j < n; ++j) {
    Vec a;
    Mat r;
    if (j == 0) {
      a = Vec::Zero();
      r = c.w0;
    } else {
      a = c.g[j - 1] * m;
      r = c.g[j - 1] * p * c.g[j - 1].transpose() + c.w[j - 1];
      r = 0.5 * (r + r.transpose()).eval();
    }
    const double q = r(0, 0) + s0sq;
    y[j] = a(0) + std::sqrt(q) * v[j];
    const Vec gain = r.col(0) / q;
    m = a + gain * (y[j] - a(0));
    p = r - gain * r.row(0);
    p = 0.5 * (p + p.transpose()).eval();
  }
  return y;
}

template <int D>
Eigen::VectorXd smoother_mean_impl(const SsmCore<D>& c, const Eigen::VectorXd& y, double s0sq) {
  using Vec = typename SsmCore<D>::Vec;
  using Mat = typename SsmCore<D>::Mat;
  const Eigen::Index n = c.grid.size();
  const FilterPass<D> fp = run_filter(c, y, s0sq, true);
  Eigen::VectorXd z(n);
  Vec ms = fp.m[n - 1];
  z[n - 1] = ms(0);
  for (Eigen::Index j = n - 2; j >= 0; --j) {
    // J = P_j G_j^T R_{j+1}^{-1}; jt holds J^T.
    const Mat jt = fp.r[j + 1].ldlt().solve(c.g[j] * fp.p[j]);
    ms = fp.m[j] + jt.transpose() * (ms - fp.a[j + 1]);
    z[j] = ms(0);
  }
  return z;
}

// Square root of a conditional state covariance. These matrices are PSD by
// construction but brush rank deficiency whenever the data pin the state
// (long ranges, tiny signal variance), and the residual roundoff can leave
// negative eigenvalues far larger than any jitter scaled to the near-zero
// result. Clamping the spectrum at zero is exact for the degenerate
// directions and costs nothing at state dimension <= 3.
template <typename Mat>
Mat psd_sqrt(Mat s) {
  s = 0.5 * (s + s.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Mat> es(s);
  if (es.info() != Eigen::Success)
    throw numeric_error("state covariance eigendecomposition failed");
  auto vals = es.eigenvalues().eval();
  for (Eigen::Index i = 0; i < vals.size(); ++i)
    vals(i) = vals(i) > 0.0 ? std::sqrt(vals(i)) : 0.0;
  return es.eigenvectors() * vals.asDiagonal();
}

template <int D>
Eigen::VectorXd backward_sample_impl(const SsmCore<D>& c, const Eigen::VectorXd& y, double s0sq,
                                     RngStream& rng) {
  using Vec = typename SsmCore<D>::Vec;
  using Mat = typename SsmCore<D>::Mat;
  const Eigen::Index n = c.grid.size();
  const FilterPass<D> fp = run_filter(c, y, s0sq, true);
  Eigen::VectorXd z(n);
  Vec draw;
  {
    Vec eps;
    for (int i = 0; i < D; ++i) eps(i) = rng.normal();
    draw = fp.m[n - 1] + psd_sqrt<Mat>(fp.p[n - 1]) * eps;
  }
  z[n - 1] = draw(0);
  for (Eigen::Index j = n - 2; j >= 0; --j) {
    const auto ldlt = fp.r[j + 1].ldlt();
    const Mat jt = ldlt.solve(c.g[j] * fp.p[j]);  // J^T
    const Vec mean = fp.m[j] + jt.transpose() * (draw - fp.a[j + 1]);
    Mat cov = fp.p[j] - jt.transpose() * fp.r[j + 1] * jt;
    Vec eps;
    for (int i = 0; i < D; ++i) eps(i) = rng.normal();
    draw = mean + psd_sqrt<Mat>(cov) * eps;
    z[j] = draw(0);
  }
  return z;
}

}  // namespace detail

// Runtime wrapper over the fixed-dimension cores.
struct StateSpaceRep {
  KernelFamily family = KernelFamily::Exponential;
  double gamma = 1.0;
  double sigma2 = 1.0;
  std::variant<detail::SsmCore<1>, detail::SsmCore<3>> core;

  Eigen::Index n() const {
    return std::visit([](const auto& c) { return c.grid.size(); }, core);
  }
};

inline void check_grid(const Eigen::VectorXd& grid) {
  if (grid.size() < 1) throw invalid_parameter("ssm_build: empty grid");
  if (!grid.allFinite()) throw invalid_parameter("ssm_build: non-finite grid point");
  for (Eigen::Index j = 0; j + 1 < grid.size(); ++j)
    if (!(grid[j] < grid[j + 1]))
      throw invalid_parameter("ssm_build: grid must be strictly increasing");
}

inline StateSpaceRep ssm_build(KernelFamily family, double gamma, double sigma2,
                               const Eigen::VectorXd& grid) {
  if (!(gamma > 0.0) || !std::isfinite(gamma))
    throw invalid_parameter("ssm_build: range must be finite and > 0");
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2))
    throw invalid_parameter("ssm_build: variance must be finite and > 0");
  check_grid(grid);
  StateSpaceRep rep;
  rep.family = family;
  rep.gamma = gamma;
  rep.sigma2 = sigma2;
  switch (family) {
    case KernelFamily::Exponential:
      rep.core = detail::build_exponential(gamma, sigma2, grid);
      break;
    case KernelFamily::Matern52:
      rep.core = detail::build_matern52(gamma, sigma2, grid);
      break;
    default:
      throw invalid_parameter("ssm_build: kernel family has no state-space form");
  }
  return rep;
}

inline void check_noise(double s0sq) {
  if (!(s0sq > 0.0) || !std::isfinite(s0sq))
    throw invalid_parameter("state-space op: noise variance must be finite and > 0");
}

inline void check_vec(const StateSpaceRep& rep, const Eigen::VectorXd& y) {
  if (y.size() != rep.n()) throw invalid_parameter("state-space op: length mismatch");
  if (!y.allFinite()) throw invalid_parameter("state-space op: non-finite input");
}

// log N(y; 0, sigma2 K + s0sq I) in O(n).
inline double kf_loglik(const StateSpaceRep& rep, const Eigen::VectorXd& y, double s0sq) {
  check_noise(s0sq);
  check_vec(rep, y);
  return std::visit(
      [&](const auto& c) { return detail::run_filter(c, y, s0sq, false).loglik; }, rep.core);
}

// log det(sigma2 K + s0sq I) = sum_j log Q_j; needs no data.
inline double kf_logdet(const StateSpaceRep& rep, double s0sq) {
  check_noise(s0sq);
  return std::visit(
      [&](const auto& c) {
        const Eigen::VectorXd zero = Eigen::VectorXd::Zero(c.grid.size());
        const auto fp = detail::run_filter(c, zero, s0sq, false);
        KahanSum s;
        for (Eigen::Index j = 0; j < fp.q.size(); ++j) s.add(std::log(fp.q[j]));
        return s.value();
      },
      rep.core);
}

// e = L^{-1} v for the innovations factor L L^T = sigma2 K + s0sq I.
inline Eigen::VectorXd kf_whiten(const StateSpaceRep& rep, const Eigen::VectorXd& v, double s0sq) {
  check_noise(s0sq);
  check_vec(rep, v);
  return std::visit(
      [&](const auto& c) {
        const auto fp = detail::run_filter(c, v, s0sq, false);
        Eigen::VectorXd e(fp.f.size());
        for (Eigen::Index j = 0; j < e.size(); ++j) e[j] = (v[j] - fp.f[j]) / std::sqrt(fp.q[j]);
        return e;
      },
      rep.core);
}

// y = L v; exact inverse of kf_whiten (the filter is rerun on the values
// being generated, so the map is linear and triangular).
inline Eigen::VectorXd kf_color(const StateSpaceRep& rep, const Eigen::VectorXd& v, double s0sq) {
  check_noise(s0sq);
  check_vec(rep, v);
  return std::visit([&](const auto& c) { return detail::color_impl(c, v, s0sq); }, rep.core);
}

// E[z | y] = sigma2 K (sigma2 K + s0sq I)^{-1} y via forward filter + RTS pass.
inline Eigen::VectorXd smoother_mean(const StateSpaceRep& rep, const Eigen::VectorXd& y,
                                     double s0sq) {
  check_noise(s0sq);
  check_vec(rep, y);
  return std::visit([&](const auto& c) { return detail::smoother_mean_impl(c, y, s0sq); },
                    rep.core);
}

// Joint draw of z | y (forward filter, backward sampling).
inline Eigen::VectorXd backward_sample(const StateSpaceRep& rep, const Eigen::VectorXd& y,
                                       double s0sq, RngStream& rng) {
  check_noise(s0sq);
  check_vec(rep, y);
  return std::visit(
      [&](const auto& c) { return detail::backward_sample_impl(c, y, s0sq, rng); }, rep.core);
}

// Diagnostic view of the forward pass with dynamic-size state moments.
struct FilterTrace {
  double loglik = 0.0;
  Eigen::VectorXd f, q;
  Eigen::MatrixXd state_mean;               // state_dim x n, filtered
  std::vector<Eigen::MatrixXd> state_cov;   // filtered covariances
};

inline FilterTrace filter_trace(const StateSpaceRep& rep, const Eigen::VectorXd& y, double s0sq) {
  check_noise(s0sq);
  check_vec(rep, y);
  return std::visit(
      [&](const auto& c) {
        const auto fp = detail::run_filter(c, y, s0sq, true);
        FilterTrace t;
        t.loglik = fp.loglik;
        t.f = fp.f;
        t.q = fp.q;
        const Eigen::Index n = fp.f.size();
        const Eigen::Index d = fp.m.empty() ? 0 : fp.m[0].size();
        t.state_mean.resize(d, n);
        t.state_cov.resize(n);
        for (Eigen::Index j = 0; j < n; ++j) {
          t.state_mean.col(j) = fp.m[j];
          t.state_cov[j] = fp.p[j];
        }
        return t;
      },
      rep.core);
}

}  // namespace golf

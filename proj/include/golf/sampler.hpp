#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "golf/errors.hpp"
#include "golf/kernels.hpp"
#include "golf/lattice.hpp"
#include "golf/loadings.hpp"
#include "golf/model.hpp"
#include "golf/rng.hpp"
#include "golf/statespace.hpp"
#include "golf/util.hpp"

namespace golf {

// ---------------------------------------------------------------------------
// Quantiles
// ---------------------------------------------------------------------------

// Linear-interpolation sample quantile with plotting position h = (n-1)p.
// Sorts the buffer in place.
inline double quantile_type7(std::vector<double>& values, double p) {
  if (values.empty()) throw invalid_parameter("quantile: empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw invalid_parameter("quantile: p outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * p;
  const auto k = static_cast<std::size_t>(std::floor(h));
  if (k + 1 >= values.size()) return values.back();
  return values[k] + (h - std::floor(h)) * (values[k + 1] - values[k]);
}

// Five-marker streaming quantile estimate (the P-squared update rule). Used
// when storing every imputation draw would exceed the memory budget; accuracy
// is approximate, which is documented where the sketch is enabled.
class P2Quantile {
 public:
  explicit P2Quantile(double p = 0.5) : p_(p) {
    if (!(p > 0.0 && p < 1.0)) throw invalid_parameter("P2Quantile: p outside (0, 1)");
  }

  void add(double x) {
    if (count_ < 5) {
      q_[count_++] = x;
      if (count_ == 5) {
        std::sort(q_, q_ + 5);
        for (int i = 0; i < 5; ++i) pos_[i] = i + 1;
        want_[0] = 1.0;
        want_[1] = 1.0 + 2.0 * p_;
        want_[2] = 1.0 + 4.0 * p_;
        want_[3] = 3.0 + 2.0 * p_;
        want_[4] = 5.0;
        inc_[0] = 0.0;
        inc_[1] = p_ / 2.0;
        inc_[2] = p_;
        inc_[3] = (1.0 + p_) / 2.0;
        inc_[4] = 1.0;
      }
      return;
    }
    int k = 0;
    if (x < q_[0]) {
      q_[0] = x;
      k = 0;
    } else if (x >= q_[4]) {
      q_[4] = x;
      k = 3;
    } else {
      while (k < 3 && x >= q_[k + 1]) ++k;
    }
    ++count_;
    for (int i = k + 1; i < 5; ++i) pos_[i] += 1.0;
    for (int i = 0; i < 5; ++i) want_[i] += inc_[i];
    for (int i = 1; i <= 3; ++i) {
      const double off = want_[i] - pos_[i];
      if ((off >= 1.0 && pos_[i + 1] - pos_[i] > 1.0) ||
          (off <= -1.0 && pos_[i - 1] - pos_[i] < -1.0)) {
        const double s = off >= 0.0 ? 1.0 : -1.0;
        double cand = parabolic(i, s);
        if (!(q_[i - 1] < cand && cand < q_[i + 1])) cand = linear(i, s);
        q_[i] = cand;
        pos_[i] += s;
      }
    }
  }

  std::int64_t count() const { return count_; }

  double value() const {
    if (count_ == 0) throw invalid_parameter("P2Quantile: no observations");
    if (count_ >= 5) return q_[2];
    std::vector<double> buf(q_, q_ + count_);
    return quantile_type7(buf, p_);
  }

  // Marker-state access for persistence. restore() rebuilds the exact
  // estimator state, so a saved sketch continues bit-identically.
  double prob() const { return p_; }
  const double* marker_heights() const { return q_; }
  const double* marker_positions() const { return pos_; }
  const double* marker_targets() const { return want_; }
  static P2Quantile restore(double p, std::int64_t count, const double* q,
                            const double* pos, const double* want) {
    P2Quantile s(p);
    s.count_ = count;
    std::copy(q, q + 5, s.q_);
    std::copy(pos, pos + 5, s.pos_);
    std::copy(want, want + 5, s.want_);
    if (count >= 5) {
      s.inc_[0] = 0.0;
      s.inc_[1] = p / 2.0;
      s.inc_[2] = p;
      s.inc_[3] = (1.0 + p) / 2.0;
      s.inc_[4] = 1.0;
    }
    return s;
  }

 private:
  double parabolic(int i, double s) const {
    return q_[i] + s / (pos_[i + 1] - pos_[i - 1]) *
                       ((pos_[i] - pos_[i - 1] + s) * (q_[i + 1] - q_[i]) /
                            (pos_[i + 1] - pos_[i]) +
                        (pos_[i + 1] - pos_[i] - s) * (q_[i] - q_[i - 1]) /
                            (pos_[i] - pos_[i - 1]));
  }
  double linear(int i, double s) const {
    const int j = i + static_cast<int>(s);
    return q_[i] + s * (q_[j] - q_[i]) / (pos_[j] - pos_[i]);
  }

  double p_;
  std::int64_t count_ = 0;
  double q_[5] = {0, 0, 0, 0, 0};
  double pos_[5] = {1, 2, 3, 4, 5};
  double want_[5] = {1, 2, 3, 4, 5};
  double inc_[5] = {0, 0.25, 0.5, 0.75, 1};
};

// ---------------------------------------------------------------------------
// Configuration and state
// ---------------------------------------------------------------------------

struct McmcConfig {
  std::int64_t iterations = 1000;  // 0 is allowed: the chain then holds only the initial state
  double burn_in = 0.2;            // fraction of stored draws discarded by summaries
  std::int64_t thinning = 1;       // keep every k-th iteration
  double prop_sd_beta0 = 0.0;      // <= 0: 40 / n1
  double prop_sd_factor = 0.0;     // <= 0: 40 / n2
  int d = 0;                       // <= 0: smallest d holding eigen_fraction of the spectrum
  double eigen_fraction = 0.99;
  int kron_d1 = 0, kron_d2 = 0;    // Kronecker rows: <= 0 defers to the data, then the fraction
  KernelFamily family_s = KernelFamily::Matern52;  // row-correlation kernel (loadings)
  KernelFamily family_x = KernelFamily::Matern52;  // factor kernel; needs a state-space form
  MeanKind mean = MeanKind::Zero;
  Eigen::MatrixXd h1, h2;          // empty: intercept + linear trend in the coordinate
  bool shared_kernel = false;      // one (beta, eta) pair for all factors, scaled by eigenvalues
  std::uint64_t seed = 1;
  std::optional<PriorSpec> priors; // unset: defaults computed from coords_x
  double init_log_beta0 = 3.0;
  double init_log_beta = 0.0;
  double init_log_eta = 0.0;
  double init_sigma0_sq = 0.0;     // <= 0: 0.1 * variance of the observed cells
  std::int64_t imputed_budget = 50'000'000;  // stored doubles before switching to sketches
  bool store_coefficients = true;  // keep the mean-coefficient trace
  bool fix_kernel_params = false;  // test hook: skip the kernel Metropolis blocks
  bool fix_sigma0 = false;         // test hook: skip the noise-variance draw
  bool check_observed = true;      // re-hash observed cells every iteration

  void validate() const {
    if (iterations < 0) throw config_error("mcmc config: iterations must be >= 0");
    if (thinning < 1) throw config_error("mcmc config: thinning must be >= 1");
    if (!(burn_in >= 0.0 && burn_in < 1.0))
      throw config_error("mcmc config: burn-in fraction must be in [0, 1)");
    if (!(eigen_fraction > 0.0 && eigen_fraction <= 1.0))
      throw config_error("mcmc config: eigenvalue fraction must be in (0, 1]");
    if (imputed_budget < 0) throw config_error("mcmc config: imputed budget must be >= 0");
    if (!std::isfinite(init_log_beta0) || !std::isfinite(init_log_beta) ||
        !std::isfinite(init_log_eta))
      throw config_error("mcmc config: non-finite initial log parameters");
  }
};

// Everything needed to continue a chain: parameters on the log scale, the
// mean coefficients, and the data matrix with current imputations.
struct SamplerState {
  std::int64_t iteration = 0;  // completed iterations
  Eigen::MatrixXd y;           // n1 x n2, observed cells fixed, missing cells imputed
  Eigen::VectorXd log_beta0;   // p1 (Kronecker rows: 2)
  Eigen::VectorXd log_beta;    // d entries, or 1 when the kernel is shared
  Eigen::VectorXd log_eta;
  double sigma0_sq = 1.0;
  Eigen::MatrixXd b1, b2;      // q1 x n2 / q2 x n1; empty when the mean omits them
};

struct Chain {
  McmcConfig config;  // echo with resolved defaults (d, proposal scales, init variance)
  int n1 = 0, n2 = 0, d = 0;
  int kernel_blocks = 0;  // Metropolis blocks for kernels: d (distinct) or 1 (shared)
  std::vector<std::int64_t> missing_idx;  // column-major linear indices of unobserved cells
  std::int64_t rows_before = 0;           // stored rows that precede this segment (resume)

  // Traces, one row per stored draw of this segment; parameters on the
  // natural (positive) scale.
  Eigen::MatrixXd beta0;  // rows x p1
  Eigen::MatrixXd beta;   // rows x kernel_blocks
  Eigen::MatrixXd eta;    // rows x kernel_blocks
  Eigen::VectorXd sigma0_sq;
  Eigen::MatrixXd b1, b2;  // rows x (q1 n2) / rows x (q2 n1), column-major layout per row

  // Imputation draws at the missing cells, or their streaming summaries when
  // the raw draws would exceed the memory budget.
  bool sketch = false;
  Eigen::MatrixXd imputed;     // rows x N_u (raw mode)
  Eigen::VectorXd sketch_sum;  // N_u, post-burn-in running sums (sketch mode)
  std::vector<P2Quantile> sketch_lo, sketch_hi;

  // Post-burn-in accumulation of the noise-free field M + A Z.
  Eigen::MatrixXd latent_sum;
  std::int64_t post_rows = 0;

  std::vector<std::int64_t> accept_kernel;  // per kernel block
  std::int64_t accept_beta0 = 0;            // separate loadings block (distinct mode)
  std::int64_t trials = 0;                  // iterations run in this segment

  // Wall-clock seconds per block: kernel Metropolis, loadings Metropolis,
  // noise variance, trend coefficients, factor draws + imputation, and
  // bookkeeping (hash checks, recording). Reported in run summaries only.
  std::array<double, 6> seconds{};

  SamplerState state;

  std::int64_t rows() const { return sigma0_sq.size(); }
  std::int64_t planned_rows() const { return config.iterations / config.thinning; }
  std::int64_t burn_rows() const {
    return static_cast<std::int64_t>(std::floor(config.burn_in *
                                                static_cast<double>(planned_rows())));
  }

  double beta0_accept_rate() const {
    return trials > 0 ? static_cast<double>(accept_beta0) / static_cast<double>(trials)
                      : std::numeric_limits<double>::quiet_NaN();
  }
  Eigen::VectorXd kernel_accept_rates() const {
    Eigen::VectorXd r(static_cast<Eigen::Index>(accept_kernel.size()));
    for (std::size_t i = 0; i < accept_kernel.size(); ++i)
      r[static_cast<Eigen::Index>(i)] =
          trials > 0 ? static_cast<double>(accept_kernel[i]) / static_cast<double>(trials)
                     : std::numeric_limits<double>::quiet_NaN();
    return r;
  }

  // Concatenates a continuation segment produced by resuming from `state`.
  void append(const Chain& next) {
    if (sketch || next.sketch)
      throw config_error("chain append: sketched segments cannot be merged");
    if (next.rows_before != rows_before + rows())
      throw config_error("chain append: segments are not contiguous");
    if (next.n1 != n1 || next.n2 != n2 || next.d != d || next.kernel_blocks != kernel_blocks ||
        next.missing_idx != missing_idx)
      throw config_error("chain append: segment shapes do not match");
    const auto stack = [](Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
      if (b.rows() == 0) return;
      const Eigen::Index r = a.rows();
      a.conservativeResize(r + b.rows(), b.cols());
      a.bottomRows(b.rows()) = b;
    };
    stack(beta0, next.beta0);
    stack(beta, next.beta);
    stack(eta, next.eta);
    stack(b1, next.b1);
    stack(b2, next.b2);
    stack(imputed, next.imputed);
    const Eigen::Index r = sigma0_sq.size();
    sigma0_sq.conservativeResize(r + next.sigma0_sq.size());
    sigma0_sq.tail(next.sigma0_sq.size()) = next.sigma0_sq;
    latent_sum += next.latent_sum;
    post_rows += next.post_rows;
    if (accept_kernel.size() != next.accept_kernel.size())
      throw config_error("chain append: kernel block counts differ");
    for (std::size_t i = 0; i < accept_kernel.size(); ++i)
      accept_kernel[i] += next.accept_kernel[i];
    accept_beta0 += next.accept_beta0;
    trials += next.trials;
    for (std::size_t i = 0; i < seconds.size(); ++i) seconds[i] += next.seconds[i];
    state = next.state;
    config = next.config;
  }
};

struct Prediction {
  Eigen::MatrixXd mean;          // observed cells: the observation itself
  Eigen::MatrixXd lower, upper;  // empty unless has_intervals
  bool has_intervals = false;
  Eigen::MatrixXd latent_mean;   // posterior mean of M + A Z; empty without post-burn-in draws
  std::int64_t draws = 0;        // post-burn-in draws behind the summaries
};

// ---------------------------------------------------------------------------
// Internal helpers
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t observed_hash(
    const Eigen::MatrixXd& y,
    const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>& observed) {
  std::uint64_t h = 1469598103934665603ULL;
  for (Eigen::Index j = 0; j < y.cols(); ++j)
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      if (!observed(i, j)) continue;
      std::uint64_t bits;
      const double v = y(i, j);
      std::memcpy(&bits, &v, sizeof bits);
      h ^= bits;
      h *= 1099511628211ULL;
    }
  return h;
}

// Missing cells start at the mean of their row's observed cells; rows with
// nothing observed fall back to the global observed mean.
inline Eigen::MatrixXd initial_imputation(const LatticeData& data) {
  Eigen::MatrixXd y = data.y;
  KahanSum gsum;
  std::int64_t gcount = 0;
  for (Eigen::Index j = 0; j < y.cols(); ++j)
    for (Eigen::Index i = 0; i < y.rows(); ++i)
      if (data.observed(i, j)) {
        gsum.add(y(i, j));
        ++gcount;
      }
  if (gcount == 0) throw data_error("mcmc: no observed cells");
  const double gmean = gsum.value() / static_cast<double>(gcount);
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    KahanSum rsum;
    std::int64_t rcount = 0;
    for (Eigen::Index j = 0; j < y.cols(); ++j)
      if (data.observed(i, j)) {
        rsum.add(y(i, j));
        ++rcount;
      }
    const double fill = rcount > 0 ? rsum.value() / static_cast<double>(rcount) : gmean;
    for (Eigen::Index j = 0; j < y.cols(); ++j)
      if (!data.observed(i, j)) y(i, j) = fill;
  }
  return y;
}

inline double observed_variance(const LatticeData& data) {
  KahanSum s, s2;
  std::int64_t n = 0;
  for (Eigen::Index j = 0; j < data.y.cols(); ++j)
    for (Eigen::Index i = 0; i < data.y.rows(); ++i)
      if (data.observed(i, j)) {
        s.add(data.y(i, j));
        ++n;
      }
  const double mean = s.value() / static_cast<double>(n);
  for (Eigen::Index j = 0; j < data.y.cols(); ++j)
    for (Eigen::Index i = 0; i < data.y.rows(); ++i)
      if (data.observed(i, j)) {
        const double cdev = data.y(i, j) - mean;
        s2.add(cdev * cdev);
      }
  return s2.value() / static_cast<double>(n);
}

// Row-side correlation structure: either plain coordinates or the two
// Kronecker block grids, with the resolved factor count.
struct RowStructure {
  bool kron = false;
  Eigen::MatrixXd coords;        // plain rows
  Eigen::VectorXd grid1, grid2;  // Kronecker blocks
  int d = 0;                     // total factor count (kron: d1 * d2)
  int d1 = 0, d2 = 0;
  int p1() const { return kron ? 2 : static_cast<int>(coords.cols()); }
};

inline Loadings row_loadings(const RowStructure& rs, KernelFamily family,
                             const Eigen::VectorXd& beta0) {
  if (beta0.size() != rs.p1())
    throw invalid_parameter("loadings: beta0 dimension mismatch");
  for (Eigen::Index i = 0; i < beta0.size(); ++i)
    if (!(beta0[i] > 0.0) || !std::isfinite(beta0[i]))
      throw invalid_parameter("loadings: beta0 must be finite and > 0");
  if (rs.kron) {
    const KernelSpec k1{family, Eigen::VectorXd::Constant(1, 1.0 / beta0[0])};
    const KernelSpec k2{family, Eigen::VectorXd::Constant(1, 1.0 / beta0[1])};
    return kronecker_loadings(corr_matrix(k1, rs.grid1), rs.d1,
                              corr_matrix(k2, rs.grid2), rs.d2);
  }
  const KernelSpec ks{family, beta0.cwiseInverse()};
  return compute_loadings(corr_matrix(ks, rs.coords), rs.d);
}

inline Eigen::VectorXd loading_lambdas(const Loadings& l) {
  Eigen::VectorXd lam(l.d());
  for (int k = 0; k < l.d(); ++k) lam[k] = l.implied_lambda(k);
  return lam;
}

// Resolves the factor count (and Kronecker block counts) once, at the
// initial loadings range; d stays fixed for the whole chain.
inline RowStructure make_row_structure(const McmcConfig& config, const LatticeData& data) {
  RowStructure rs;
  if (data.kron) {
    const KronInfo& ki = *data.kron;
    if (ki.n11 < 1 || ki.n12 < 1 || ki.n11 * ki.n12 != data.n1())
      throw data_error("mcmc: Kronecker block sizes do not factor the row count");
    if (data.coords_s.cols() != 2)
      throw data_error("mcmc: Kronecker rows need two coordinate columns");
    rs.kron = true;
    rs.grid1.resize(ki.n11);
    rs.grid2.resize(ki.n12);
    for (int i = 0; i < ki.n11; ++i) rs.grid1[i] = data.coords_s(i * ki.n12, 0);
    for (int i = 0; i < ki.n12; ++i) rs.grid2[i] = data.coords_s(i, 1);
    const double b0 = std::exp(config.init_log_beta0);
    const KernelSpec ks{config.family_s, Eigen::VectorXd::Constant(1, 1.0 / b0)};
    const auto resolve = [&](int from_config, int from_data, const Eigen::VectorXd& grid) {
      if (from_config > 0) return from_config;
      if (from_data > 0) return from_data;
      Eigen::MatrixXd vecs;
      Eigen::VectorXd vals;
      detail::eigen_descending(corr_matrix(ks, grid), vecs, vals);
      return select_d(vals, config.eigen_fraction);
    };
    rs.d1 = resolve(config.kron_d1, ki.d1, rs.grid1);
    rs.d2 = resolve(config.kron_d2, ki.d2, rs.grid2);
    if (rs.d1 > ki.n11 || rs.d2 > ki.n12)
      throw config_error("mcmc: Kronecker factor counts exceed the block sizes");
    rs.d = rs.d1 * rs.d2;
  } else {
    rs.coords = data.coords_s;
    if (config.d > 0) {
      if (config.d > data.n1()) throw config_error("mcmc: d exceeds the row count");
      rs.d = config.d;
    } else {
      const Eigen::VectorXd b0 =
          Eigen::VectorXd::Constant(rs.coords.cols(), std::exp(config.init_log_beta0));
      const KernelSpec ks{config.family_s, b0.cwiseInverse()};
      Eigen::MatrixXd vecs;
      Eigen::VectorXd vals;
      detail::eigen_descending(corr_matrix(ks, rs.coords), vecs, vals);
      rs.d = select_d(vals, config.eigen_fraction);
    }
  }
  return rs;
}

inline MeanModel make_mean(const McmcConfig& config, const LatticeData& data) {
  if (config.mean == MeanKind::Zero) return MeanModel{};
  Eigen::MatrixXd h1 = config.h1, h2 = config.h2;
  const bool wants1 = config.mean == MeanKind::RowTrend || config.mean == MeanKind::Mixed;
  const bool wants2 = config.mean == MeanKind::ColTrend || config.mean == MeanKind::Mixed;
  if (wants1) {
    if (h1.size() == 0) {
      h1.resize(data.n1(), 2);
      h1.col(0).setOnes();
      h1.col(1) = data.coords_s.col(0);
    } else if (h1.rows() != data.n1()) {
      throw config_error("mcmc: h1 row count does not match the data");
    }
  }
  if (wants2) {
    if (h2.size() == 0) {
      h2.resize(data.n2(), 2);
      h2.col(0).setOnes();
      h2.col(1) = data.coords_x;
    } else if (h2.rows() != data.n2()) {
      throw config_error("mcmc: h2 row count does not match the data");
    }
  }
  return make_mean_model(config.mean, std::move(h1), std::move(h2));
}

inline std::vector<std::int64_t> missing_indices(const LatticeData& data) {
  std::vector<std::int64_t> idx;
  for (Eigen::Index j = 0; j < data.y.cols(); ++j)
    for (Eigen::Index i = 0; i < data.y.rows(); ++i)
      if (!data.observed(i, j)) idx.push_back(static_cast<std::int64_t>(j) * data.n1() + i);
  return idx;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// The MCMC
// ---------------------------------------------------------------------------

// One pass of the blocked sampler per iteration:
//   (1) per-factor Metropolis on (log beta_l, log eta_l), or one merged block
//       on (log beta0, log beta, log eta) when the kernel is shared,
//   (2) Metropolis on log beta0 (distinct kernels), recomputing the loadings
//       per proposal; projections refresh when a move is accepted,
//   (3) Gibbs draw of the noise variance,
//   (4) exact mean-coefficient draw for the configured trend, then mean and
//       projection refresh,
//   (5) factor draws and regeneration of the missing cells only,
//   (6) projection refresh for the next iteration.
// Every random draw comes from a stream derived from (seed, iteration, block,
// sub-block), so parallel and serial execution produce identical chains and a
// resumed run continues the exact sequence.
inline Chain mcmc_run(const McmcConfig& config_in, const LatticeData& data,
                      const SamplerState* resume = nullptr) {
  data.validate();
  config_in.validate();
  const int n1 = data.n1(), n2 = data.n2();
  if (config_in.family_x == KernelFamily::Gaussian)
    throw config_error("mcmc: factor kernel needs a state-space form (exponential or matern52)");
  if (config_in.iterations % config_in.thinning != 0 && config_in.iterations > 0)
    throw config_error("mcmc: iterations must be a multiple of the thinning interval");

  McmcConfig config = config_in;
  if (!(config.prop_sd_beta0 > 0.0)) config.prop_sd_beta0 = 40.0 / n1;
  if (!(config.prop_sd_factor > 0.0)) config.prop_sd_factor = 40.0 / n2;

  detail::RowStructure rstruct = detail::make_row_structure(config, data);
  const int d = rstruct.d;
  const int p1 = rstruct.p1();
  config.d = d;
  if (rstruct.kron) {
    config.kron_d1 = rstruct.d1;
    config.kron_d2 = rstruct.d2;
  }

  const PriorSpec priors = config.priors ? *config.priors : default_priors(data.coords_x, 1);
  config.priors = priors;
  const Eigen::VectorXd& x = data.coords_x;
  const KernelFamily fam_x = config.family_x;
  const bool shared = config.shared_kernel;
  const int blocks = shared ? 1 : d;

  const std::vector<std::int64_t> missing_idx = detail::missing_indices(data);
  const std::int64_t nu = static_cast<std::int64_t>(missing_idx.size());

  const MeanModel mm = detail::make_mean(config, data);
  const std::uint64_t obs_hash0 = detail::observed_hash(data.y, data.observed);

  // Initial state.
  SamplerState st;
  if (resume) {
    st = *resume;
    if (st.y.rows() != n1 || st.y.cols() != n2)
      throw config_error("mcmc resume: state matrix shape mismatch");
    if (st.log_beta0.size() != p1 || st.log_beta.size() != blocks ||
        st.log_eta.size() != blocks)
      throw config_error("mcmc resume: state parameter dimensions mismatch");
    if (!(st.sigma0_sq > 0.0) || !std::isfinite(st.sigma0_sq))
      throw config_error("mcmc resume: state noise variance invalid");
    if (st.iteration < 0 || st.iteration > config.iterations)
      throw config_error("mcmc resume: completed iterations exceed the requested total");
    if (st.iteration % config.thinning != 0)
      throw config_error("mcmc resume: stored state is not aligned with the thinning interval");
    if (!st.y.allFinite()) throw config_error("mcmc resume: non-finite state matrix");
    if (detail::observed_hash(st.y, data.observed) != obs_hash0)
      throw data_error("mcmc resume: observed cells of the state do not match the data");
    if (mm.uses_h1() && (st.b1.rows() != mm.q1() || st.b1.cols() != n2))
      throw config_error("mcmc resume: b1 shape mismatch");
    if (mm.uses_h2() && (st.b2.rows() != mm.q2() || st.b2.cols() != n1))
      throw config_error("mcmc resume: b2 shape mismatch");
  } else {
    st.iteration = 0;
    st.y = detail::initial_imputation(data);
    st.log_beta0 = Eigen::VectorXd::Constant(p1, config.init_log_beta0);
    st.log_beta = Eigen::VectorXd::Constant(blocks, config.init_log_beta);
    st.log_eta = Eigen::VectorXd::Constant(blocks, config.init_log_eta);
    if (config.init_sigma0_sq > 0.0) {
      st.sigma0_sq = config.init_sigma0_sq;
    } else {
      const double v = detail::observed_variance(data);
      if (!(v > 0.0))
        throw data_error("mcmc: observed cells have zero variance; set init_sigma0_sq");
      st.sigma0_sq = 0.1 * v;
    }
    if (mm.uses_h1()) st.b1 = Eigen::MatrixXd::Zero(mm.q1(), n2);
    if (mm.uses_h2()) st.b2 = Eigen::MatrixXd::Zero(mm.q2(), n1);
  }
  config.init_sigma0_sq = resume ? config.init_sigma0_sq : st.sigma0_sq;

  // Derived state. yc, frob2, ytilde are pure functions of (y, m, loadings)
  // and are refreshed whenever one of those changes.
  Loadings loadings =
      detail::row_loadings(rstruct, config.family_s, st.log_beta0.array().exp().matrix());
  Eigen::VectorXd scale =
      shared ? detail::loading_lambdas(loadings) : Eigen::VectorXd::Ones(d);
  if (shared && !(scale.minCoeff() > 0.0))
    throw numeric_error("mcmc: row correlation eigenvalues are not positive at the start");
  Eigen::MatrixXd m = mean_matrix(mm, st.b1, st.b2, n1, n2);
  Eigen::MatrixXd yc = st.y - m;
  double frob2 = squared_frobenius(yc);
  Eigen::MatrixXd ytilde = project(loadings, yc);

  const auto beta_vec = [&]() -> Eigen::VectorXd {
    if (shared) return Eigen::VectorXd::Constant(d, std::exp(st.log_beta[0]));
    return st.log_beta.array().exp().matrix();
  };
  const auto eta_vec = [&]() -> Eigen::VectorXd {
    if (shared) return Eigen::VectorXd::Constant(d, std::exp(st.log_eta[0]));
    return st.log_eta.array().exp().matrix();
  };

  // Storage plan.
  const std::int64_t planned_rows = config.iterations / config.thinning;
  const std::int64_t burn = static_cast<std::int64_t>(
      std::floor(config.burn_in * static_cast<double>(planned_rows)));
  const bool sketch = nu > 0 && planned_rows * nu > config.imputed_budget;
  if (sketch && resume)
    throw config_error("mcmc: resume is not supported once draws are sketched; "
                       "raise imputed_budget or start over");

  Chain chain;
  chain.config = config;
  chain.n1 = n1;
  chain.n2 = n2;
  chain.d = d;
  chain.kernel_blocks = blocks;
  chain.missing_idx = missing_idx;
  chain.rows_before = st.iteration / config.thinning;
  const std::int64_t seg_rows = planned_rows - chain.rows_before;
  if (seg_rows < 0) throw config_error("mcmc resume: nothing left to run");
  chain.beta0.resize(seg_rows, p1);
  chain.beta.resize(seg_rows, blocks);
  chain.eta.resize(seg_rows, blocks);
  chain.sigma0_sq.resize(seg_rows);
  if (config.store_coefficients && mm.uses_h1()) chain.b1.resize(seg_rows, mm.q1() * n2);
  if (config.store_coefficients && mm.uses_h2()) chain.b2.resize(seg_rows, mm.q2() * n1);
  chain.sketch = sketch;
  if (sketch) {
    chain.sketch_sum = Eigen::VectorXd::Zero(nu);
    chain.sketch_lo.assign(static_cast<std::size_t>(nu), P2Quantile(0.025));
    chain.sketch_hi.assign(static_cast<std::size_t>(nu), P2Quantile(0.975));
  } else {
    chain.imputed.resize(seg_rows, nu);
  }
  chain.latent_sum = Eigen::MatrixXd::Zero(n1, n2);
  chain.accept_kernel.assign(static_cast<std::size_t>(blocks), 0);

  const std::int64_t t0 = st.iteration;
  auto mark = std::chrono::steady_clock::now();
  const auto lap = [&](int k) {
    const auto now = std::chrono::steady_clock::now();
    chain.seconds[static_cast<std::size_t>(k)] +=
        std::chrono::duration<double>(now - mark).count();
    mark = now;
  };
  for (std::int64_t t = t0 + 1; t <= config.iterations; ++t) {
    mark = std::chrono::steady_clock::now();
    const auto guarded = [&](const char* step, const auto& body) {
      try {
        body();
      } catch (const data_error&) {
        throw;
      } catch (const std::exception& e) {
        throw numeric_error("mcmc iteration " + std::to_string(t) + ", " + step + ": " +
                            e.what());
      }
    };

    if (!config.fix_kernel_params) {
      if (shared) {
        // Merged block: the loadings range, the shared factor range, and the
        // shared nugget move together because the eigenvalues couple them.
        guarded("kernel block", [&] {
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
            prop_load = detail::row_loadings(rstruct, config.family_s, b0);
            prop_scale = detail::loading_lambdas(prop_load);
            prop_yt = project(prop_load, yc);
            return marginal_loglik_projected(prop_yt, frob2, n1, fam_x, x,
                                             Eigen::VectorXd::Constant(d, bb),
                                             Eigen::VectorXd::Constant(d, ee), prop_scale,
                                             st.sigma0_sq) +
                   log_prior_jr(priors, bb, ee) + log_prior_beta0(priors, b0) + v.sum();
          };
          const double cur_target =
              marginal_loglik_projected(ytilde, frob2, n1, fam_x, x, beta_vec(), eta_vec(),
                                        scale, st.sigma0_sq) +
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
        });
        lap(0);
      } else {
        guarded("factor kernel block", [&] {
          std::vector<char> acc(static_cast<std::size_t>(d), 0);
          parallel_for(d, [&](std::int64_t l) {
            RngStream rs(derive_seed(config.seed, static_cast<std::uint64_t>(t), 1,
                                     static_cast<std::uint64_t>(l)));
            Eigen::VectorXd cur(2);
            cur << st.log_beta[l], st.log_eta[l];
            const auto target = [&](const Eigen::VectorXd& v) {
              const double bb = std::exp(v[0]);
              const double ee = std::exp(v[1]);
              return factor_loglik(fam_x, x, ytilde.row(l).transpose(), bb, ee, scale[l],
                                   st.sigma0_sq) +
                     log_prior_jr(priors, bb, ee) + v[0] + v[1];
            };
            const double cur_target = target(cur);
            const MetropolisResult res =
                metropolis_block(cur, cur_target, target, config.prop_sd_factor, rs);
            if (res.accepted) {
              st.log_beta[l] = res.log_params[0];
              st.log_eta[l] = res.log_params[1];
              acc[static_cast<std::size_t>(l)] = 1;
            }
          });
          for (int l = 0; l < d; ++l) chain.accept_kernel[static_cast<std::size_t>(l)] += acc[l];
        });
        lap(0);

        guarded("loadings kernel block", [&] {
          RngStream rs(derive_seed(config.seed, static_cast<std::uint64_t>(t), 2, 0));
          Loadings prop_load;
          Eigen::MatrixXd prop_yt;
          const Eigen::VectorXd bv = beta_vec(), ev = eta_vec();
          const auto target = [&](const Eigen::VectorXd& v) {
            const Eigen::VectorXd b0 = v.array().exp().matrix();
            prop_load = detail::row_loadings(rstruct, config.family_s, b0);
            prop_yt = project(prop_load, yc);
            return marginal_loglik_projected(prop_yt, frob2, n1, fam_x, x, bv, ev, scale,
                                             st.sigma0_sq) +
                   log_prior_beta0(priors, b0) + v.sum();
          };
          const double cur_target =
              marginal_loglik_projected(ytilde, frob2, n1, fam_x, x, bv, ev, scale,
                                        st.sigma0_sq) +
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
        });
        lap(1);
      }
    }

    if (!config.fix_sigma0) {
      guarded("noise variance draw", [&] {
        RngStream rs(derive_seed(config.seed, static_cast<std::uint64_t>(t), 3, 0));
        st.sigma0_sq =
            sample_sigma0_sq(ytilde, frob2, n1, n2, fam_x, x, beta_vec(), eta_vec(), scale, rs);
      });
      lap(2);
    }

    if (mm.kind != MeanKind::Zero) {
      guarded("mean coefficient draw", [&] {
        RngStream rs(derive_seed(config.seed, static_cast<std::uint64_t>(t), 4, 0));
        const Eigen::VectorXd bv = beta_vec(), ev = eta_vec();
        switch (mm.kind) {
          case MeanKind::RowTrend:
            st.b1 = sample_b1(st.y, mm, loadings, fam_x, x, bv, ev, scale, st.sigma0_sq, rs);
            break;
          case MeanKind::ColTrend:
            st.b2 = sample_b2(st.y, mm, loadings, fam_x, x, bv, ev, scale, st.sigma0_sq, rs);
            break;
          case MeanKind::Mixed:
            st.b1 = sample_b1_mixed(st.y, mm, loadings, fam_x, x, bv, ev, scale,
                                    st.sigma0_sq, rs);
            st.b2 = sample_b2(st.y - mm.h1 * st.b1, mm, loadings, fam_x, x, bv, ev, scale,
                              st.sigma0_sq, rs);
            break;
          default:
            break;
        }
        m = mean_matrix(mm, st.b1, st.b2, n1, n2);
        yc = st.y - m;
        frob2 = squared_frobenius(yc);
        ytilde = project(loadings, yc);
      });
      lap(3);
    }

    Eigen::MatrixXd az;
    guarded("factor draw", [&] {
      Eigen::MatrixXd z(d, n2);
      const Eigen::VectorXd bv = beta_vec(), ev = eta_vec();
      parallel_for(d, [&](std::int64_t l) {
        RngStream rs(derive_seed(config.seed, static_cast<std::uint64_t>(t), 5,
                                 static_cast<std::uint64_t>(l)));
        z.row(l) = posterior_factor_draw(fam_x, x, ytilde.row(l).transpose(), bv[l], ev[l],
                                         scale[l], st.sigma0_sq, rs)
                       .transpose();
      });
      az = unproject(loadings, z);
      if (nu > 0) {
        RngStream rs(derive_seed(config.seed, static_cast<std::uint64_t>(t), 5,
                                 static_cast<std::uint64_t>(d)));
        const double sd0 = std::sqrt(st.sigma0_sq);
        for (const std::int64_t idx : missing_idx) {
          const Eigen::Index i = idx % n1;
          const Eigen::Index j = idx / n1;
          st.y(i, j) = m(i, j) + az(i, j) + sd0 * rs.normal();
          yc(i, j) = st.y(i, j) - m(i, j);
        }
        frob2 = squared_frobenius(yc);
        ytilde = project(loadings, yc);
      }
    });
    lap(4);

    if (config.check_observed &&
        detail::observed_hash(st.y, data.observed) != obs_hash0)
      throw data_error("mcmc iteration " + std::to_string(t) +
                       ": observed cells were modified");
    if (!(st.sigma0_sq > 0.0) || !std::isfinite(frob2) || !st.y.allFinite())
      throw numeric_error("mcmc iteration " + std::to_string(t) + ": non-finite state");

    st.iteration = t;

    if (t % config.thinning == 0) {
      const std::int64_t g = t / config.thinning - 1;  // global stored row index
      const std::int64_t s = g - chain.rows_before;
      chain.beta0.row(s) = st.log_beta0.array().exp().matrix().transpose();
      chain.beta.row(s) = st.log_beta.array().exp().matrix().transpose();
      chain.eta.row(s) = st.log_eta.array().exp().matrix().transpose();
      chain.sigma0_sq[s] = st.sigma0_sq;
      if (chain.b1.size() > 0)
        chain.b1.row(s) =
            Eigen::Map<const Eigen::VectorXd>(st.b1.data(), st.b1.size()).transpose();
      if (chain.b2.size() > 0)
        chain.b2.row(s) =
            Eigen::Map<const Eigen::VectorXd>(st.b2.data(), st.b2.size()).transpose();
      if (!sketch) {
        for (std::int64_t k = 0; k < nu; ++k)
          chain.imputed(s, k) =
              st.y(missing_idx[static_cast<std::size_t>(k)] % n1,
                   missing_idx[static_cast<std::size_t>(k)] / n1);
      }
      if (g >= burn) {
        ++chain.post_rows;
        chain.latent_sum += m + az;
        if (sketch) {
          for (std::int64_t k = 0; k < nu; ++k) {
            const double v = st.y(missing_idx[static_cast<std::size_t>(k)] % n1,
                                  missing_idx[static_cast<std::size_t>(k)] / n1);
            chain.sketch_sum[k] += v;
            chain.sketch_lo[static_cast<std::size_t>(k)].add(v);
            chain.sketch_hi[static_cast<std::size_t>(k)].add(v);
          }
        }
      }
    }
    lap(5);
  }

  chain.trials = config.iterations - t0;
  chain.state = std::move(st);
  return chain;
}

// ---------------------------------------------------------------------------
// Posterior prediction
// ---------------------------------------------------------------------------

// Predictive mean at every cell (observed cells keep their observation) plus
// central credible intervals from the post-burn-in imputation draws. Draws
// are of Y itself, so the intervals include the observation noise.
inline Prediction predict(const Chain& chain, const LatticeData& data, double level = 0.95) {
  if (!(level > 0.0 && level < 1.0))
    throw invalid_parameter("predict: level must be in (0, 1)");
  if (chain.rows_before != 0)
    throw config_error("predict: chain segment lacks its head; append segments first");
  data.validate();
  if (data.n1() != chain.n1 || data.n2() != chain.n2)
    throw data_error("predict: data shape does not match the chain");
  if (detail::missing_indices(data) != chain.missing_idx)
    throw data_error("predict: observation mask does not match the chain");

  const std::int64_t total = chain.rows();
  const std::int64_t burn = chain.burn_rows();
  const std::int64_t post = chain.sketch ? chain.post_rows : total - burn;
  if (post < 1) throw config_error("predict: no post-burn-in draws");
  const std::int64_t nu = static_cast<std::int64_t>(chain.missing_idx.size());

  Prediction out;
  out.draws = post;
  out.mean = data.y;
  for (std::int64_t k = 0; k < nu; ++k) {
    const Eigen::Index i = chain.missing_idx[static_cast<std::size_t>(k)] % chain.n1;
    const Eigen::Index j = chain.missing_idx[static_cast<std::size_t>(k)] / chain.n1;
    if (chain.sketch) {
      out.mean(i, j) = chain.sketch_sum[k] / static_cast<double>(post);
    } else {
      KahanSum s;
      for (std::int64_t r = burn; r < total; ++r) s.add(chain.imputed(r, k));
      out.mean(i, j) = s.value() / static_cast<double>(post);
    }
  }

  // Interval endpoints need enough draws for the tail quantiles to resolve.
  out.has_intervals = post >= 40;
  if (out.has_intervals) {
    if (chain.sketch && std::abs(level - 0.95) > 1e-12)
      throw config_error("predict: sketched chains only support level 0.95");
    out.lower = out.mean;
    out.upper = out.mean;
    const double p_lo = 0.5 * (1.0 - level);
    std::vector<double> buf;
    for (std::int64_t k = 0; k < nu; ++k) {
      const Eigen::Index i = chain.missing_idx[static_cast<std::size_t>(k)] % chain.n1;
      const Eigen::Index j = chain.missing_idx[static_cast<std::size_t>(k)] / chain.n1;
      if (chain.sketch) {
        out.lower(i, j) = chain.sketch_lo[static_cast<std::size_t>(k)].value();
        out.upper(i, j) = chain.sketch_hi[static_cast<std::size_t>(k)].value();
      } else {
        buf.assign(chain.imputed.col(k).data() + burn, chain.imputed.col(k).data() + total);
        out.lower(i, j) = quantile_type7(buf, p_lo);
        out.upper(i, j) = quantile_type7(buf, 1.0 - p_lo);
      }
    }
  }

  if (chain.post_rows > 0)
    out.latent_mean = chain.latent_sum / static_cast<double>(chain.post_rows);
  return out;
}

}  // namespace golf

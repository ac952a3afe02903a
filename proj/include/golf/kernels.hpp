#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "golf/errors.hpp"
#include "golf/util.hpp"

namespace golf {

// Gaussian has no finite-dimensional state-space form; it is accepted by the
// dense code paths only.
enum class KernelFamily { Exponential, Matern52, Gaussian };

inline std::string to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::Exponential: return "exponential";
    case KernelFamily::Matern52: return "matern52";
    case KernelFamily::Gaussian: return "gaussian";
  }
  return "?";
}

inline KernelFamily kernel_family_from_string(const std::string& s) {
  if (s == "exponential") return KernelFamily::Exponential;
  if (s == "matern52") return KernelFamily::Matern52;
  if (s == "gaussian") return KernelFamily::Gaussian;
  throw config_error("unknown kernel family '" + s + "'");
}

// Product-form correlation kernel: one range parameter per input dimension.
struct KernelSpec {
  KernelFamily family = KernelFamily::Matern52;
  Eigen::VectorXd range;  // gamma_i > 0, one per coordinate

  int dims() const { return static_cast<int>(range.size()); }
};

// One-dimensional correlation at distance h >= 0.
inline double kernel_eval_1d(KernelFamily family, double gamma, double h) {
  if (!(gamma > 0.0) || !std::isfinite(gamma))
    throw invalid_parameter("kernel: range must be finite and > 0");
  if (!std::isfinite(h) || h < 0.0)
    throw invalid_parameter("kernel: distance must be finite and >= 0");
  switch (family) {
    case KernelFamily::Exponential:
      return std::exp(-h / gamma);
    case KernelFamily::Matern52: {
      const double t = std::sqrt(5.0) * h / gamma;
      return (1.0 + t + t * t / 3.0) * std::exp(-t);
    }
    case KernelFamily::Gaussian:
      return std::exp(-0.5 * (h / gamma) * (h / gamma));
  }
  throw invalid_parameter("kernel: unknown family");
}

// Product correlation between two points given per-coordinate distances.
inline double kernel_eval(const KernelSpec& spec, const Eigen::VectorXd& dist) {
  if (dist.size() != spec.range.size())
    throw invalid_parameter("kernel_eval: distance/range dimension mismatch");
  double k = 1.0;
  for (Eigen::Index i = 0; i < dist.size(); ++i)
    k *= kernel_eval_1d(spec.family, spec.range[i], std::abs(dist[i]));
  return k;
}

// m x m correlation matrix over rows of coords (m x p). Unit diagonal,
// symmetric by construction.
inline Eigen::MatrixXd corr_matrix(const KernelSpec& spec, const Eigen::MatrixXd& coords) {
  const Eigen::Index m = coords.rows();
  const Eigen::Index p = coords.cols();
  if (p != spec.range.size())
    throw invalid_parameter("corr_matrix: coords/range dimension mismatch");
  if (!coords.allFinite()) throw invalid_parameter("corr_matrix: non-finite coordinate");
  for (Eigen::Index i = 0; i < p; ++i)
    if (!(spec.range[i] > 0.0) || !std::isfinite(spec.range[i]))
      throw invalid_parameter("corr_matrix: range must be finite and > 0");
  Eigen::MatrixXd r(m, m);
  parallel_for(m, [&](std::int64_t i) {
    r(i, i) = 1.0;
    for (Eigen::Index j = 0; j < i; ++j) {
      double k = 1.0;
      for (Eigen::Index c = 0; c < p; ++c)
        k *= kernel_eval_1d(spec.family, spec.range[c], std::abs(coords(i, c) - coords(j, c)));
      r(i, j) = k;
      r(j, i) = k;
    }
  });
  return r;
}

}  // namespace golf

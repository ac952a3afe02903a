#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <optional>

#include "golf/errors.hpp"

namespace golf {

// Kronecker-structured row set: the n1 rows factor as an n11 x n12 product
// grid, row index l = i1 * n12 + i2 (0-based, i2 fastest), and the loadings
// keep d1 x d2 eigenvector columns.
struct KronInfo {
  int n11 = 0, n12 = 0;
  int d1 = 0, d2 = 0;
};

// Matrix-variate observations on a lattice: rows indexed by coords_s (the
// "spatial" side the loadings act on), columns by the ordered coords_x.
// Unobserved cells hold NaN and observed(i, j) = false.
struct LatticeData {
  Eigen::MatrixXd y;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> observed;
  Eigen::MatrixXd coords_s;
  Eigen::VectorXd coords_x;
  std::optional<KronInfo> kron;

  int n1() const { return static_cast<int>(y.rows()); }
  int n2() const { return static_cast<int>(y.cols()); }
  int p1() const { return static_cast<int>(coords_s.cols()); }

  std::int64_t n_obs() const {
    std::int64_t k = 0;
    for (Eigen::Index j = 0; j < observed.cols(); ++j)
      for (Eigen::Index i = 0; i < observed.rows(); ++i)
        if (observed(i, j)) ++k;
    return k;
  }
  std::int64_t n_missing() const {
    return static_cast<std::int64_t>(y.size()) - n_obs();
  }

  void validate() const {
    if (y.rows() < 1 || y.cols() < 1) throw data_error("lattice: empty data matrix");
    if (observed.rows() != y.rows() || observed.cols() != y.cols())
      throw data_error("lattice: mask/data shape mismatch");
    if (coords_s.rows() != y.rows())
      throw data_error("lattice: coords_s row count does not match data rows");
    if (coords_s.cols() < 1) throw data_error("lattice: coords_s needs at least one column");
    if (coords_x.size() != y.cols())
      throw data_error("lattice: coords_x length does not match data columns");
    if (!coords_s.allFinite() || !coords_x.allFinite())
      throw data_error("lattice: non-finite coordinate");
    for (Eigen::Index j = 0; j + 1 < coords_x.size(); ++j)
      if (!(coords_x[j] < coords_x[j + 1]))
        throw data_error("lattice: coords_x must be strictly increasing");
    for (Eigen::Index j = 0; j < y.cols(); ++j)
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        if (observed(i, j) && !std::isfinite(y(i, j)))
          throw data_error("lattice: observed cell holds a non-finite value");
        if (!observed(i, j) && std::isfinite(y(i, j)))
          throw data_error("lattice: unobserved cell holds a finite value");
      }
    if (kron) {
      if (coords_s.cols() != 2) throw data_error("lattice: kron rows need two coordinates");
      if (kron->n11 < 1 || kron->n12 < 1 ||
          static_cast<std::int64_t>(kron->n11) * kron->n12 != y.rows())
        throw data_error("lattice: kron grid dims do not factor the row count");
      if (kron->d1 < 1 || kron->d1 > kron->n11 || kron->d2 < 1 || kron->d2 > kron->n12)
        throw data_error("lattice: kron d1/d2 out of range");
    }
  }
};

}  // namespace golf

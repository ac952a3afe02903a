#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "golf/errors.hpp"
#include "golf/util.hpp"

namespace golf {

namespace detail {

// Deterministic sign convention: the largest-magnitude entry of each column
// is made positive; ties resolved by the lowest row index.
inline void fix_signs(Eigen::MatrixXd& a) {
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    Eigen::Index arg = 0;
    double best = std::abs(a(0, c));
    for (Eigen::Index r = 1; r < a.rows(); ++r) {
      const double v = std::abs(a(r, c));
      if (v > best) {
        best = v;
        arg = r;
      }
    }
    if (a(arg, c) < 0.0) a.col(c) = -a.col(c);
  }
}

inline void check_symmetric(const Eigen::MatrixXd& r) {
  if (r.rows() != r.cols()) throw invalid_parameter("loadings: matrix must be square");
  const double scale = std::max(1.0, r.cwiseAbs().maxCoeff());
  for (Eigen::Index j = 0; j < r.cols(); ++j)
    for (Eigen::Index i = 0; i < j; ++i)
      if (std::abs(r(i, j) - r(j, i)) > 1e-12 * scale)
        throw invalid_parameter("loadings: matrix is not symmetric");
}

// Full spectrum of a symmetric PSD matrix, eigenvalues descending.
inline void eigen_descending(const Eigen::MatrixXd& r, Eigen::MatrixXd& vectors,
                             Eigen::VectorXd& values) {
  check_symmetric(r);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r);
  if (es.info() != Eigen::Success)
    throw numeric_error("loadings: eigendecomposition failed to converge");
  const Eigen::Index m = r.rows();
  vectors.resize(m, m);
  values.resize(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    vectors.col(k) = es.eigenvectors().col(m - 1 - k);
    values[k] = es.eigenvalues()[m - 1 - k];
  }
  if (values[m - 1] < -1e-10 * std::max(1.0, values.cwiseAbs().maxCoeff()))
    throw invalid_parameter("loadings: matrix is not positive semi-definite");
  fix_signs(vectors);
}

}  // namespace detail

// Orthonormal loading columns from the spectral decomposition of the row
// correlation matrix. Kronecker structure keeps the two blocks separate and
// never materializes their product; column l of the implied A corresponds to
// (i1, i2) with l = i1 * d2 + i2 (0-based, second block fastest).
struct Loadings {
  enum class Structure { Plain, Kronecker };
  Structure structure = Structure::Plain;

  Eigen::MatrixXd a;          // plain: n1 x d
  Eigen::VectorXd lambda;     // plain: d eigenvalues, descending

  Eigen::MatrixXd a1, a2;     // kron blocks: n11 x d1, n12 x d2
  Eigen::VectorXd lambda1, lambda2;

  int n1() const {
    return structure == Structure::Plain
               ? static_cast<int>(a.rows())
               : static_cast<int>(a1.rows() * a2.rows());
  }
  int d() const {
    return structure == Structure::Plain
               ? static_cast<int>(a.cols())
               : static_cast<int>(a1.cols() * a2.cols());
  }

  // Eigenvalue attached to column l of the implied loading matrix.
  double implied_lambda(int l) const {
    if (structure == Structure::Plain) return lambda[l];
    const int d2 = static_cast<int>(a2.cols());
    return lambda1[l / d2] * lambda2[l % d2];
  }

  // Materialized n1 x d matrix; dense oracle use only.
  Eigen::MatrixXd materialize() const {
    if (structure == Structure::Plain) return a;
    const Eigen::Index m1 = a1.rows(), m2 = a2.rows(), d1 = a1.cols(), d2 = a2.cols();
    Eigen::MatrixXd out(m1 * m2, d1 * d2);
    for (Eigen::Index c1 = 0; c1 < d1; ++c1)
      for (Eigen::Index c2 = 0; c2 < d2; ++c2)
        for (Eigen::Index r1 = 0; r1 < m1; ++r1)
          out.block(r1 * m2, c1 * d2 + c2, m2, 1) = a1(r1, c1) * a2.col(c2);
    return out;
  }
};

// Top-d eigenvectors of the m x m row correlation matrix.
inline Loadings compute_loadings(const Eigen::MatrixXd& r, int d) {
  if (d < 1 || d > r.rows()) throw invalid_parameter("compute_loadings: d out of range");
  Eigen::MatrixXd vecs;
  Eigen::VectorXd vals;
  detail::eigen_descending(r, vecs, vals);
  Loadings l;
  l.structure = Loadings::Structure::Plain;
  l.a = vecs.leftCols(d);
  l.lambda = vals.head(d);
  return l;
}

inline Loadings kronecker_loadings(const Eigen::MatrixXd& r1, int d1, const Eigen::MatrixXd& r2,
                                   int d2) {
  if (d1 < 1 || d1 > r1.rows() || d2 < 1 || d2 > r2.rows())
    throw invalid_parameter("kronecker_loadings: block dimension out of range");
  Eigen::MatrixXd v1, v2;
  Eigen::VectorXd e1, e2;
  detail::eigen_descending(r1, v1, e1);
  detail::eigen_descending(r2, v2, e2);
  Loadings l;
  l.structure = Loadings::Structure::Kronecker;
  l.a1 = v1.leftCols(d1);
  l.lambda1 = e1.head(d1);
  l.a2 = v2.leftCols(d2);
  l.lambda2 = e2.head(d2);
  return l;
}

// Smallest d whose leading eigenvalues hold at least `fraction` of the total.
inline int select_d(const Eigen::VectorXd& eigenvalues, double fraction) {
  if (eigenvalues.size() == 0) throw invalid_parameter("select_d: empty spectrum");
  if (!(fraction > 0.0) || fraction > 1.0)
    throw invalid_parameter("select_d: fraction must be in (0, 1]");
  const double total = eigenvalues.sum();
  if (!(total > 0.0)) throw invalid_parameter("select_d: spectrum has no mass");
  double acc = 0.0;
  for (Eigen::Index k = 0; k < eigenvalues.size(); ++k) {
    acc += eigenvalues[k];
    if (acc >= fraction * total) return static_cast<int>(k) + 1;
  }
  return static_cast<int>(eigenvalues.size());
}

// Z = A^T Y, applied blockwise for Kronecker structure: cost
// O(n2 n1 d1 + n2 n12 d) instead of O(n2 n1 d).
inline Eigen::MatrixXd project(const Loadings& l, const Eigen::MatrixXd& y) {
  if (y.rows() != l.n1()) throw invalid_parameter("project: row count mismatch");
  if (l.structure == Loadings::Structure::Plain) return l.a.transpose() * y;
  const Eigen::Index n11 = l.a1.rows(), n12 = l.a2.rows();
  const Eigen::Index d1 = l.a1.cols(), d2 = l.a2.cols();
  const Eigen::Index n2 = y.cols();
  Eigen::MatrixXd out(d1 * d2, n2);
  parallel_for(n2, [&](std::int64_t j) {
    Eigen::Map<const Eigen::MatrixXd> yj(y.col(j).data(), n12, n11);
    Eigen::Map<Eigen::MatrixXd> oj(out.col(j).data(), d2, d1);
    oj = l.a2.transpose() * yj * l.a1;
  });
  return out;
}

// Y = A Z.
inline Eigen::MatrixXd unproject(const Loadings& l, const Eigen::MatrixXd& z) {
  if (z.rows() != l.d()) throw invalid_parameter("unproject: row count mismatch");
  if (l.structure == Loadings::Structure::Plain) return l.a * z;
  const Eigen::Index n11 = l.a1.rows(), n12 = l.a2.rows();
  const Eigen::Index d1 = l.a1.cols(), d2 = l.a2.cols();
  const Eigen::Index n2 = z.cols();
  Eigen::MatrixXd out(n11 * n12, n2);
  parallel_for(n2, [&](std::int64_t j) {
    Eigen::Map<const Eigen::MatrixXd> zj(z.col(j).data(), d2, d1);
    Eigen::Map<Eigen::MatrixXd> oj(out.col(j).data(), n12, n11);
    oj = l.a2 * zj * l.a1.transpose();
  });
  return out;
}

// (I - A A^T) V without forming the projector.
inline Eigen::MatrixXd residual_project(const Loadings& l, const Eigen::MatrixXd& v) {
  return v - unproject(l, project(l, v));
}

}  // namespace golf

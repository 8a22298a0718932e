#pragma once

// Small dense linear algebra kit. Problem sizes here stay below a few
// hundred rows, so everything is plain row-major storage with O(n^3)
// factorizations and no blocking.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "mwm/errors.hpp"

namespace mwm {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  const double* row(std::size_t i) const { return data_.data() + i * cols_; }
  double* row(std::size_t i) { return data_.data() + i * cols_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Vector matvec(const Matrix& a, const Vector& x) {
  if (a.cols() != x.size()) throw ConfigError("matvec: dimension mismatch");
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* r = a.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += r[j] * x[j];
    y[i] = s;
  }
  return y;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ConfigError("matmul: dimension mismatch");
  Matrix c(a.rows(), b.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// Forces exact symmetry by averaging the off-diagonal pairs.
inline void symmetrize(Matrix& a) {
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j) {
      const double v = 0.5 * (a(i, j) + a(j, i));
      a(i, j) = v;
      a(j, i) = v;
    }
}

// Plain lower Cholesky of a symmetric positive definite matrix.
// Returns false (leaving `l` unspecified) when a pivot drops below
// `tol` times the largest diagonal entry.
inline bool cholesky(const Matrix& a, Matrix& l, double tol = 1e-12) {
  const std::size_t n = a.rows();
  l = Matrix(n, n, 0.0);
  double dmax = 0.0;
  for (std::size_t i = 0; i < n; ++i) dmax = std::max(dmax, std::abs(a(i, i)));
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > tol * std::max(dmax, 1.0))) return false;
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return true;
}

// Diagonal-pivoted Cholesky for symmetric positive SEMIdefinite input.
// Produces perm and lower-triangular l with a[perm, perm] ~= l l'; pivots
// at or below tol_rel * max diag are clamped to zero and define the rank.
struct PivotedCholesky {
  Matrix l;
  std::vector<std::size_t> perm;
  std::size_t rank = 0;
};

inline PivotedCholesky pivoted_cholesky(Matrix a, double tol_rel = 1e-12) {
  const std::size_t n = a.rows();
  PivotedCholesky out;
  out.l = Matrix(n, n, 0.0);
  out.perm.resize(n);
  std::iota(out.perm.begin(), out.perm.end(), std::size_t{0});
  double dmax0 = 0.0;
  for (std::size_t i = 0; i < n; ++i) dmax0 = std::max(dmax0, a(i, i));
  const double clamp = tol_rel * std::max(dmax0, 1e-300);

  Vector d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a(i, i);
  out.rank = n;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (d[i] > d[p]) p = i;
    if (!(d[p] > clamp)) {
      out.rank = k;
      break;  // trailing block is numerically zero
    }
    if (p != k) {
      std::swap(out.perm[k], out.perm[p]);
      std::swap(d[k], d[p]);
      for (std::size_t j = 0; j < n; ++j) std::swap(a(k, j), a(p, j));
      for (std::size_t i = 0; i < n; ++i) std::swap(a(i, k), a(i, p));
      for (std::size_t j = 0; j < k; ++j) std::swap(out.l(k, j), out.l(p, j));
    }
    const double lkk = std::sqrt(d[k]);
    out.l(k, k) = lkk;
    for (std::size_t i = k + 1; i < n; ++i) {
      double s = a(i, k);
      for (std::size_t j = 0; j < k; ++j) s -= out.l(i, j) * out.l(k, j);
      out.l(i, k) = s / lkk;
      d[i] -= out.l(i, k) * out.l(i, k);
      if (d[i] < 0.0) d[i] = 0.0;
    }
  }
  return out;
}

// log det(a + ridge I) for symmetric PSD a, via Cholesky of the ridged matrix.
inline double log_det_ridged(Matrix a, double ridge) {
  const std::size_t n = a.rows();
  for (std::size_t i = 0; i < n; ++i) a(i, i) += ridge;
  Matrix l;
  if (!cholesky(a, l, 1e-300)) throw NumericalError("log_det_ridged: matrix not positive definite after ridge");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

// log det(ridge I_K + U diag(d) U') computed through the m x m reduction
//   det(e I_K + U D U') = e^(K-m) det(e I_m + D^1/2 U'U D^1/2),
// with U of size K x m, d >= 0. Exact identity, O(K m^2) work.
inline double log_det_ridged_low_rank(const Matrix& u, const Vector& d, double ridge) {
  const std::size_t k = u.rows();
  const std::size_t m = u.cols();
  if (d.size() != m) throw ConfigError("log_det_ridged_low_rank: dimension mismatch");
  Matrix g(m, m, 0.0);  // D^1/2 U'U D^1/2 + e I
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a; b < m; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += u(i, a) * u(i, b);
      const double v = std::sqrt(std::max(d[a], 0.0)) * std::sqrt(std::max(d[b], 0.0)) * s;
      g(a, b) = v;
      g(b, a) = v;
    }
  }
  for (std::size_t a = 0; a < m; ++a) g(a, a) += ridge;
  Matrix l;
  if (!cholesky(g, l, 1e-300)) throw NumericalError("log_det_ridged_low_rank: reduced matrix not positive definite");
  double s = 0.0;
  for (std::size_t a = 0; a < m; ++a) s += std::log(l(a, a));
  const double excess = static_cast<double>(k) - static_cast<double>(m);
  return excess * std::log(ridge) + 2.0 * s;
}

}  // namespace mwm

#pragma once

// Rectangle probabilities P(Z_j <= b_j for all j) of a standard multivariate
// normal with correlation matrix R. Estimated by randomized quasi-Monte
// Carlo on the sequentially conditioned (separation-of-variables) form,
// after a diagonal-pivoted Cholesky factorization of R. Pivoting plus
// clamping of numerically zero pivots lets near-singular and exactly
// rank-deficient correlation matrices through: trailing coordinates become
// deterministic indicator terms.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "mwm/errors.hpp"
#include "mwm/linalg.hpp"
#include "mwm/normal.hpp"
#include "mwm/rng.hpp"

namespace mwm {

struct QmcOptions {
  std::uint64_t seed = 0x5EEDBA5Eu;
  int shifts = 12;                    // independent random shifts of one lattice
  std::size_t initial_points = 256;   // lattice points per shift to start with
  std::size_t max_points = 1u << 15;  // per-shift cap while chasing the tolerance
};

struct QmcEstimate {
  double value = 0.0;
  double error = 0.0;  // ~99% absolute error estimate (3 sigma over shifts)
  std::size_t points = 0;
};

// Upper-bounded rectangle with its correlation matrix.
struct MvnRectangle {
  Vector upper;
  Matrix correlation;

  void validate() const {
    const std::size_t n = upper.size();
    if (correlation.rows() != n || correlation.cols() != n)
      throw ConfigError("mvn rectangle: bound/correlation dimension mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      if (std::abs(correlation(i, i) - 1.0) > 1e-10)
        throw ConfigError("mvn rectangle: correlation diagonal must be 1");
      for (std::size_t j = 0; j < n; ++j) {
        if (std::isnan(correlation(i, j)) || std::abs(correlation(i, j)) > 1.0 + 1e-8)
          throw ConfigError("mvn rectangle: correlation entries must lie in [-1, 1]");
        if (std::abs(correlation(i, j) - correlation(j, i)) > 1e-10)
          throw ConfigError("mvn rectangle: correlation must be symmetric");
      }
    }
  }
};

namespace detail {

inline const std::vector<double>& qmc_generators(std::size_t dim) {
  static std::vector<double> roots = [] {
    // sqrt of the first few thousand primes: Richtmyer lattice generators.
    std::vector<double> r;
    std::vector<int> primes;
    for (int c = 2; static_cast<int>(primes.size()) < 2200; ++c) {
      bool is_prime = true;
      for (int p : primes) {
        if (p * p > c) break;
        if (c % p == 0) {
          is_prime = false;
          break;
        }
      }
      if (is_prime) primes.push_back(c);
    }
    r.reserve(primes.size());
    for (int p : primes) r.push_back(std::sqrt(static_cast<double>(p)));
    return r;
  }();
  if (dim > roots.size()) throw NumericalError("mvn: rectangle dimension too large for the lattice table");
  return roots;
}

}  // namespace detail

// Estimate with an attached error; use mvn_rectangle_prob for the value only.
inline QmcEstimate mvn_rectangle_prob_est(const Vector& upper, const Matrix& correlation, double tol,
                                          const QmcOptions& options = {}) {
  MvnRectangle rect{upper, correlation};
  rect.validate();
  if (!(tol > 0.0 && tol <= 0.01)) throw ConfigError("mvn: tolerance must lie in (0, 0.01]");

  constexpr double inf = std::numeric_limits<double>::infinity();
  // -inf bound: empty rectangle. +inf bound: coordinate is unconstrained and
  // can be marginalized away by dropping its row and column.
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < upper.size(); ++i) {
    if (upper[i] == -inf) return {0.0, 0.0, 0};
    if (std::isnan(upper[i])) throw ConfigError("mvn: NaN bound");
    if (upper[i] != inf) active.push_back(i);
  }
  const std::size_t n = active.size();
  if (n == 0) return {1.0, 0.0, 0};
  if (n == 1) return {norm_cdf(upper[active[0]]), 1e-16, 0};

  Vector b(n);
  Matrix r(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    b[i] = upper[active[i]];
    for (std::size_t j = 0; j < n; ++j) r(i, j) = correlation(active[i], active[j]);
  }

  PivotedCholesky chol = pivoted_cholesky(r, 1e-12);
  if (chol.rank == 0) throw NumericalError("mvn: correlation matrix is numerically zero");
  // A correlation matrix has unit diagonal; if pivoting reports a negative
  // leading block the input was not PSD within repair tolerance.
  for (std::size_t i = 0; i < chol.rank; ++i)
    if (!(chol.l(i, i) > 0.0)) throw NumericalError("mvn: correlation matrix not positive semidefinite");
  {
    // Residual check: reconstruct diag and compare; catches indefinite input
    // that diagonal pivoting silently truncated.
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k2 = 0; k2 < n; ++k2) s += chol.l(i, k2) * chol.l(i, k2);
      if (s > 1.0 + 1e-6) throw NumericalError("mvn: correlation matrix not positive semidefinite");
    }
  }

  Vector bp(n);
  for (std::size_t i = 0; i < n; ++i) bp[i] = b[chol.perm[i]];

  const std::size_t rank = chol.rank;
  const std::size_t sample_dim = std::min(rank, n - 1);
  const auto& gen = detail::qmc_generators(std::max<std::size_t>(sample_dim, 1));

  const int shifts = std::max(options.shifts, 4);
  std::vector<double> shift_u(static_cast<std::size_t>(shifts) * std::max<std::size_t>(sample_dim, 1));
  {
    Stream srng(options.seed, 0xABCD);
    for (double& v : shift_u) v = srng.next_uniform();
  }

  // One evaluation of the conditioned integrand at lattice point w.
  Vector y(n, 0.0);
  auto integrand = [&](const double* w) -> double {
    double prod = 1.0;
    for (std::size_t k2 = 0; k2 < n; ++k2) {
      double t = bp[k2];
      const double* lr = chol.l.row(k2);
      for (std::size_t j = 0; j < std::min(k2, rank); ++j) t -= lr[j] * y[j];
      double e;
      if (k2 < rank) {
        e = norm_cdf(t / lr[k2]);
      } else {
        e = t >= 0.0 ? 1.0 : 0.0;  // deterministic coordinate past the numerical rank
      }
      if (e <= 0.0) return 0.0;
      prod *= e;
      if (k2 < sample_dim) {
        const double q = std::clamp(w[k2] * e, 1e-16, 1.0 - 1e-16);
        y[k2] = norm_quantile(q);
      }
    }
    return prod;
  };

  std::vector<double> shift_sum(static_cast<std::size_t>(shifts), 0.0);
  std::size_t done = 0;
  std::size_t batch = std::max<std::size_t>(options.initial_points, 16);
  QmcEstimate est;
  Vector w(std::max<std::size_t>(sample_dim, 1));
  Vector wa(std::max<std::size_t>(sample_dim, 1));
  while (true) {
    for (std::size_t k2 = done + 1; k2 <= done + batch; ++k2) {
      for (int s = 0; s < shifts; ++s) {
        const double* u = &shift_u[static_cast<std::size_t>(s) * std::max<std::size_t>(sample_dim, 1)];
        for (std::size_t d = 0; d < sample_dim; ++d) {
          double v = std::fma(static_cast<double>(k2), gen[d], u[d]);
          v -= std::floor(v);
          w[d] = v;
          wa[d] = 1.0 - v;  // antithetic partner
        }
        shift_sum[static_cast<std::size_t>(s)] += 0.5 * (integrand(w.data()) + integrand(wa.data()));
      }
    }
    done += batch;

    double mean = 0.0;
    for (int s = 0; s < shifts; ++s) mean += shift_sum[static_cast<std::size_t>(s)];
    mean /= static_cast<double>(shifts) * static_cast<double>(done);
    double var = 0.0;
    for (int s = 0; s < shifts; ++s) {
      const double m = shift_sum[static_cast<std::size_t>(s)] / static_cast<double>(done);
      var += (m - mean) * (m - mean);
    }
    var /= static_cast<double>(shifts - 1);
    est.value = std::clamp(mean, 0.0, 1.0);
    est.error = 3.0 * std::sqrt(var / static_cast<double>(shifts));
    est.points = done;
    if (est.error <= tol || done >= options.max_points) break;
    batch = done;  // double the lattice, reusing the accumulated sums
  }
  if (std::isnan(est.value)) throw NumericalError("mvn: integration produced NaN");
  return est;
}

inline double mvn_rectangle_prob(const Vector& upper, const Matrix& correlation, double tol,
                                 const QmcOptions& options = {}) {
  return mvn_rectangle_prob_est(upper, correlation, tol, options).value;
}

}  // namespace mwm

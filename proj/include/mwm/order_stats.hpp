#pragma once

// First two moments of the extreme order statistics of a K-dimensional
// correlated normal vector.
//
// The exact route decomposes E[min(X)^r] over the K regions where each
// coordinate attains the minimum. Standardizing the differences X_i - X_j
// turns each region into an upper-bounded rectangle for a unit normal
// vector whose coordinate 0 is the (unbounded) moment variable. Partial
// moments over such rectangles satisfy a one-step conditioning recursion:
//
//   m_0(B,V)   = rectangle probability over the bounded coordinates
//   m_1(B,V)   = -sum_l rho_0l phi(B_l) m_0(B_l, V_l)
//   m_2(B,V)   =  m_0(B,V)
//                - sum_l rho_0l phi(B_l) [ sqrt(1-rho_0l^2) m_1(B_l, V_l)
//                                          + rho_0l B_l m_0(B_l, V_l) ]
//
// where (B_l, V_l) is the rectangle conditioned on coordinate l sitting at
// its bound (bounds shifted and rescaled, correlations replaced by partial
// correlations). The m_j are the *unnormalized* partial moments: the
// density is integrated over the rectangle without dividing by its mass.
// Conditioning commutes, so sub-rectangles reached through different drop
// orders coincide and are memoized by the set of dropped coordinates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mwm/errors.hpp"
#include "mwm/linalg.hpp"
#include "mwm/mvn.hpp"
#include "mwm/normal.hpp"
#include "mwm/rng.hpp"

namespace mwm {

enum class MomentMethod { exact, lower_bound, monte_carlo };

inline const char* to_string(MomentMethod m) {
  switch (m) {
    case MomentMethod::exact: return "exact";
    case MomentMethod::lower_bound: return "lower_bound";
    case MomentMethod::monte_carlo: return "monte_carlo";
  }
  return "?";
}

// Moments of the smallest and largest of the K combination weights.
struct ExtremeMoments {
  double e_min = 0.0;
  double var_min = 0.0;
  double e_max = 0.0;
  double var_max = 0.0;
  MomentMethod method = MomentMethod::exact;
  double err_mean = 0.0;  // propagated integration error estimate (exact method)
  double err_var = 0.0;
};

struct MinMomentsResult {
  double mean = 0.0;
  double variance = 0.0;
  double err_mean = 0.0;
  double err_var = 0.0;
};

namespace detail {

struct Estimate {
  double value = 0.0;
  double error = 0.0;
};

// Rectangle context: slot 0 is the moment variable (bound +inf), the other
// slots carry the original coordinate ids they were built from.
struct MomentCtx {
  Matrix v;              // correlations, unit diagonal
  Vector b;              // upper bounds, b[0] = +inf
  std::vector<int> ids;  // ids[s] = original index behind slot s (ids[0] = own)
  // Set when conditioning made the moment coordinate an exact multiple of a
  // bounded one. Rectangle probabilities (r = 0) remain valid; moments of
  // order >= 1 on such a context are undefined and rejected.
  bool own_degenerate = false;
};

using MomentMemo = std::map<std::pair<int, std::vector<int>>, Estimate>;

inline double clamp_corr(double r) { return std::clamp(r, -1.0, 1.0); }

struct ConditionResult {
  bool impossible = false;  // conditioned rectangle has probability zero
  MomentCtx ctx;
};

// Condition the rectangle on slot `l` sitting at its bound. Coordinates
// perfectly correlated with slot l become deterministic under the
// conditioning (this happens structurally: given W1 + W2, the summands are
// exactly anti-correlated); their constraint is then either resolved and
// the coordinate dropped, or violated and the whole rectangle is empty.
inline ConditionResult condition_on(const MomentCtx& ctx, std::size_t l) {
  const std::size_t n = ctx.b.size();
  ConditionResult result;
  result.ctx.own_degenerate = ctx.own_degenerate;
  std::vector<std::size_t> keep;
  std::vector<bool> degenerate;  // parallel to keep; only possible for slot 0
  keep.reserve(n - 1);
  for (std::size_t m = 0; m < n; ++m) {
    if (m == l) continue;
    const double rho = clamp_corr(ctx.v(m, l));
    if (1.0 - rho * rho <= 1e-12) {
      if (m == 0) {
        // The moment coordinate collapses onto the conditioned one. Its
        // (unbounded) constraint stays trivially satisfied and rectangle
        // probabilities never touch it, so keep it with flat correlations.
        result.ctx.own_degenerate = true;
        keep.push_back(m);
        degenerate.push_back(true);
        continue;
      }
      if (rho * ctx.b[l] <= ctx.b[m]) continue;  // resolved, drop the coordinate
      result.impossible = true;
      return result;
    }
    keep.push_back(m);
    degenerate.push_back(false);
  }

  MomentCtx& out = result.ctx;
  out.v = Matrix(keep.size(), keep.size(), 0.0);
  out.b.resize(keep.size());
  out.ids.resize(keep.size());
  Vector denom(keep.size());
  for (std::size_t a = 0; a < keep.size(); ++a) {
    const std::size_t m = keep[a];
    out.ids[a] = ctx.ids[m];
    if (degenerate[a]) {
      denom[a] = 0.0;
      out.b[a] = ctx.b[m];  // +inf
      continue;
    }
    const double rho = clamp_corr(ctx.v(m, l));
    denom[a] = std::sqrt(1.0 - rho * rho);
    out.b[a] = std::isinf(ctx.b[m]) ? ctx.b[m] : (ctx.b[m] - ctx.b[l] * rho) / denom[a];
  }
  for (std::size_t a = 0; a < keep.size(); ++a) {
    out.v(a, a) = 1.0;
    for (std::size_t c = a + 1; c < keep.size(); ++c) {
      if (degenerate[a] || degenerate[c]) continue;  // flat placeholder row/col
      const double rho_ml = clamp_corr(ctx.v(keep[a], l));
      const double rho_nl = clamp_corr(ctx.v(keep[c], l));
      const double r = (ctx.v(keep[a], keep[c]) - rho_ml * rho_nl) / (denom[a] * denom[c]);
      out.v(a, c) = clamp_corr(r);
      out.v(c, a) = out.v(a, c);
    }
  }
  return result;
}

inline Estimate rectangle_prob(const MomentCtx& ctx, double delta, const QmcOptions& qmc) {
  // Slot 0 is unbounded by construction; mvn_rectangle_prob drops it.
  QmcEstimate est = mvn_rectangle_prob_est(ctx.b, ctx.v, delta, qmc);
  return {est.value, est.error};
}

inline Estimate truncated_moment_rec(int r, const MomentCtx& ctx, std::vector<int> dropped, double delta,
                                     const QmcOptions& qmc, MomentMemo& memo) {
  std::sort(dropped.begin(), dropped.end());
  const auto key = std::make_pair(r, dropped);
  if (auto it = memo.find(key); it != memo.end()) return it->second;

  const std::size_t n = ctx.b.size();
  Estimate out;
  if (r >= 1 && ctx.own_degenerate)
    throw NumericalError("order_stats: moment requested on a context whose moment coordinate degenerated");
  if (n == 1) {
    // No bounded coordinates left: raw standard normal moments.
    out = {r == 1 ? 0.0 : 1.0, 0.0};
  } else if (r == 0) {
    out = rectangle_prob(ctx, delta, qmc);
  } else {
    if (r == 2) {
      const Estimate base = truncated_moment_rec(0, ctx, dropped, delta, qmc, memo);
      out.value = base.value;
      out.error = base.error;
    }
    for (std::size_t l = 1; l < n; ++l) {
      const double rho = clamp_corr(ctx.v(0, l));
      const double pdf = norm_pdf(ctx.b[l]);
      if (rho == 0.0 || pdf == 0.0) continue;
      const ConditionResult sub = condition_on(ctx, l);
      if (sub.impossible) continue;  // conditional rectangle is empty, term vanishes
      std::vector<int> sub_dropped = dropped;
      sub_dropped.push_back(ctx.ids[l]);
      const Estimate m0 = truncated_moment_rec(0, sub.ctx, sub_dropped, delta, qmc, memo);
      if (r == 1) {
        out.value -= rho * pdf * m0.value;
        out.error += std::abs(rho) * pdf * m0.error;
      } else {
        const Estimate m1 = truncated_moment_rec(1, sub.ctx, sub_dropped, delta, qmc, memo);
        const double root = std::sqrt(std::max(0.0, 1.0 - rho * rho));
        out.value -= rho * pdf * (root * m1.value + rho * ctx.b[l] * m0.value);
        out.error += std::abs(rho) * pdf * (root * m1.error + std::abs(rho * ctx.b[l]) * m0.error);
      }
    }
  }
  memo.emplace(key, out);
  return out;
}

// Rectangle and correlations of the standardized difference vector for the
// term where coordinate `i` attains the minimum.
inline MomentCtx build_term_ctx(const Vector& theta, const Matrix& sigma, std::size_t i) {
  const std::size_t k = theta.size();
  MomentCtx ctx;
  ctx.v = Matrix(k, k, 0.0);
  ctx.b.resize(k);
  ctx.ids.resize(k);
  ctx.ids[0] = static_cast<int>(i);
  ctx.b[0] = std::numeric_limits<double>::infinity();
  ctx.v(0, 0) = 1.0;

  const double sii = sigma(i, i);
  const double si = std::sqrt(sii);
  Vector scale(k, 0.0);  // sd of X_i - X_j per slot
  std::size_t s = 1;
  for (std::size_t j = 0; j < k; ++j) {
    if (j == i) continue;
    const double s2 = sii + sigma(j, j) - 2.0 * sigma(i, j);
    if (!(s2 > 1e-12 * (sii + sigma(j, j))))
      throw NumericalError("order_stats: degenerate pair of combinations (" + std::to_string(i) + ", " +
                           std::to_string(j) + "): difference variance is zero");
    scale[s] = std::sqrt(s2);
    ctx.ids[s] = static_cast<int>(j);
    ctx.b[s] = (theta[j] - theta[i]) / scale[s];
    ctx.v(0, s) = clamp_corr((sii - sigma(i, j)) / (si * scale[s]));
    ctx.v(s, 0) = ctx.v(0, s);
    ++s;
  }
  for (std::size_t a = 1; a < k; ++a) {
    ctx.v(a, a) = 1.0;
    const auto ja = static_cast<std::size_t>(ctx.ids[a]);
    for (std::size_t c = a + 1; c < k; ++c) {
      const auto jc = static_cast<std::size_t>(ctx.ids[c]);
      const double cov = sii - sigma(i, jc) - sigma(i, ja) + sigma(ja, jc);
      const double r = clamp_corr(cov / (scale[a] * scale[c]));
      ctx.v(a, c) = r;
      ctx.v(c, a) = r;
    }
  }
  return ctx;
}

}  // namespace detail

// Unnormalized partial moment of coordinate 0 over an upper-bounded
// rectangle: integral of Z_0^r times the standard normal density with the
// given correlation matrix over {Z_j <= upper_j}. For r >= 1 coordinate 0
// must be unbounded (upper[0] = +inf); r = 0 is the plain rectangle
// probability for any bounds.
inline double truncated_moment(int r, const Vector& upper, const Matrix& correlation, double tol,
                               const QmcOptions& qmc = {}) {
  if (r < 0 || r > 2) throw ConfigError("truncated_moment: order must be 0, 1 or 2");
  if (upper.empty()) throw ConfigError("truncated_moment: empty rectangle");
  if (r == 0) return mvn_rectangle_prob(upper, correlation, tol, qmc);
  if (!std::isinf(upper[0]) || upper[0] < 0)
    throw ConfigError("truncated_moment: coordinate 0 carries the moment and must have bound +inf");
  detail::MomentCtx ctx;
  ctx.v = correlation;
  ctx.b = upper;
  ctx.ids.resize(upper.size());
  for (std::size_t s = 0; s < upper.size(); ++s) ctx.ids[s] = static_cast<int>(s);
  detail::MomentMemo memo;
  return detail::truncated_moment_rec(r, ctx, {}, tol, qmc, memo).value;
}

// Mean (and optionally variance) of min(X) for X ~ N(theta, sigma).
// `tol` is the absolute tolerance aimed at for the mean; per-rectangle
// integration tolerances are derived from it by error propagation and the
// achieved estimate is reported back in err_mean / err_var.
inline MinMomentsResult min_moments(const Vector& theta, const Matrix& sigma, double tol = 1e-3,
                                    const QmcOptions& qmc = {}, bool want_variance = true) {
  const std::size_t k = theta.size();
  if (k == 0) throw ConfigError("min_moments: empty input");
  if (sigma.rows() != k || sigma.cols() != k) throw ConfigError("min_moments: dimension mismatch");
  for (std::size_t i = 0; i < k; ++i)
    if (!(sigma(i, i) > 0.0)) throw NumericalError("min_moments: nonpositive marginal variance");
  if (!(tol > 0.0)) throw ConfigError("min_moments: tolerance must be positive");
  if (k == 1) return {theta[0], sigma(0, 0), 0.0, 0.0};

  // Error propagation: an absolute error d on every rectangle moves the mean
  // by at most sum_i (|theta_i| + 0.4 (K-1) sigma_i) d.
  double sens = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    sens += std::abs(theta[i]) + 0.4 * static_cast<double>(k - 1) * std::sqrt(sigma(i, i));
  const double delta = std::clamp(tol / std::max(sens, 1e-12), 1e-9, 0.01);

  MinMomentsResult out;
  double ex2 = 0.0, err_ex2 = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    QmcOptions term_qmc = qmc;
    term_qmc.seed = derive_stream_seed(qmc.seed, 0x0517ULL + i);
    detail::MomentCtx ctx = detail::build_term_ctx(theta, sigma, i);
    detail::MomentMemo memo;
    const detail::Estimate m0 = detail::truncated_moment_rec(0, ctx, {}, delta, term_qmc, memo);
    const detail::Estimate m1 = detail::truncated_moment_rec(1, ctx, {}, delta, term_qmc, memo);
    const double si = std::sqrt(sigma(i, i));
    out.mean += theta[i] * m0.value + si * m1.value;
    out.err_mean += std::abs(theta[i]) * m0.error + si * m1.error;
    if (want_variance) {
      const detail::Estimate m2 = detail::truncated_moment_rec(2, ctx, {}, delta, term_qmc, memo);
      ex2 += theta[i] * theta[i] * m0.value + 2.0 * theta[i] * si * m1.value + si * si * m2.value;
      err_ex2 += theta[i] * theta[i] * m0.error + 2.0 * std::abs(theta[i]) * si * m1.error + si * si * m2.error;
    }
  }
  if (want_variance) {
    out.variance = std::max(0.0, ex2 - out.mean * out.mean);
    out.err_var = err_ex2 + 2.0 * std::abs(out.mean) * out.err_mean;
  } else {
    out.variance = std::numeric_limits<double>::quiet_NaN();
    out.err_var = std::numeric_limits<double>::quiet_NaN();
  }
  if (std::isnan(out.mean)) throw NumericalError("min_moments: integration produced NaN");
  return out;
}

// max(X) = -min(-X).
inline MinMomentsResult max_moments(const Vector& theta, const Matrix& sigma, double tol = 1e-3,
                                    const QmcOptions& qmc = {}, bool want_variance = true) {
  Vector neg(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) neg[i] = -theta[i];
  MinMomentsResult r = min_moments(neg, sigma, tol, qmc, want_variance);
  r.mean = -r.mean;
  return r;
}

// Closed-form lower bound for E[min(X)] over possibly correlated normals;
// uses only the marginal means and standard deviations. Requires K >= 2.
inline double lb_min_expectation(const Vector& theta, const Vector& sigma_diag) {
  const std::size_t k = theta.size();
  if (k < 2) throw ConfigError("lb_min_expectation: at least two combinations required");
  if (sigma_diag.size() != k) throw ConfigError("lb_min_expectation: dimension mismatch");
  const double c = (static_cast<double>(k) - 2.0) / (2.0 * std::sqrt(static_cast<double>(k) - 1.0));
  double t = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < k; ++i) {
    if (sigma_diag[i] < 0.0) throw ConfigError("lb_min_expectation: negative variance");
    t = std::max(t, -theta[i] + c * std::sqrt(sigma_diag[i]));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double a = theta[i] + t;
    sum += -theta[i] + std::sqrt(a * a + sigma_diag[i]);
  }
  return -0.5 * sum - 0.5 * (2.0 - static_cast<double>(k)) * t;
}

// Sampling estimate of the extreme moments; the covariance may be rank
// deficient (combination sets always are once K exceeds the hopper count).
inline ExtremeMoments extreme_moments_mc(const Vector& theta, const Matrix& sigma, std::size_t samples,
                                         std::uint64_t seed) {
  const std::size_t k = theta.size();
  if (k == 0 || sigma.rows() != k) throw ConfigError("extreme_moments_mc: dimension mismatch");
  if (samples < 2) throw ConfigError("extreme_moments_mc: need at least 2 samples");
  PivotedCholesky chol = pivoted_cholesky(sigma, 1e-12);
  Stream rng(seed, 0x3C3C);
  double mean_lo = 0.0, m2_lo = 0.0, mean_hi = 0.0, m2_hi = 0.0;
  Vector z(chol.rank), x(k);
  for (std::size_t s = 1; s <= samples; ++s) {
    for (auto& v : z) v = norm_quantile(rng.next_uniform());
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t r = 0; r < k; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < chol.rank; ++c) acc += chol.l(r, c) * z[c];
      const double v = theta[chol.perm[r]] + acc;
      x[chol.perm[r]] = v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double n = static_cast<double>(s);
    double d = lo - mean_lo;
    mean_lo += d / n;
    m2_lo += d * (lo - mean_lo);
    d = hi - mean_hi;
    mean_hi += d / n;
    m2_hi += d * (hi - mean_hi);
  }
  ExtremeMoments out;
  out.method = MomentMethod::monte_carlo;
  out.e_min = mean_lo;
  out.var_min = m2_lo / static_cast<double>(samples - 1);
  out.e_max = mean_hi;
  out.var_max = m2_hi / static_cast<double>(samples - 1);
  out.err_mean = 3.0 * std::sqrt(out.var_min / static_cast<double>(samples));
  out.err_var = 0.0;
  return out;
}

// Extreme moments by the requested method. lower_bound replaces the exact
// minimum mean by its closed-form bound and the maximum by max theta with
// the argmax combination's variance (and mirrors that approximation on the
// minimum's variance).
inline ExtremeMoments extreme_moments(const Vector& theta, const Matrix& sigma, double tol = 1e-3,
                                      MomentMethod method = MomentMethod::exact, const QmcOptions& qmc = {},
                                      std::size_t mc_samples = 1000000) {
  const std::size_t k = theta.size();
  if (k == 0 || sigma.rows() != k || sigma.cols() != k)
    throw ConfigError("extreme_moments: dimension mismatch");
  ExtremeMoments out;
  out.method = method;
  switch (method) {
    case MomentMethod::exact: {
      const MinMomentsResult lo = min_moments(theta, sigma, tol, qmc, true);
      const MinMomentsResult hi = max_moments(theta, sigma, tol, qmc, true);
      out.e_min = lo.mean;
      out.var_min = lo.variance;
      out.e_max = hi.mean;
      out.var_max = hi.variance;
      out.err_mean = std::max(lo.err_mean, hi.err_mean);
      out.err_var = std::max(lo.err_var, hi.err_var);
      break;
    }
    case MomentMethod::lower_bound: {
      std::size_t argmin = 0, argmax = 0;
      Vector diag(k);
      for (std::size_t i = 0; i < k; ++i) {
        diag[i] = sigma(i, i);
        if (theta[i] < theta[argmin]) argmin = i;
        if (theta[i] > theta[argmax]) argmax = i;
      }
      out.e_min = k >= 2 ? lb_min_expectation(theta, diag) : theta[0];
      out.var_min = diag[argmin];
      out.e_max = theta[argmax];
      out.var_max = diag[argmax];
      break;
    }
    case MomentMethod::monte_carlo:
      out = extreme_moments_mc(theta, sigma, mc_samples, qmc.seed);
      break;
  }
  return out;
}

}  // namespace mwm

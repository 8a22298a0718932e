#pragma once

// Derivative-free simplex minimizer. The objective it serves is only
// piecewise smooth (it contains an integer census term), so only function
// values are ever requested.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <vector>

#include "mwm/linalg.hpp"

namespace mwm {

struct NelderMeadOptions {
  std::size_t max_evals = 2000;
  double ftol_abs = 1e-9;
  double xtol_abs = 1e-9;
};

struct NelderMeadResult {
  Vector x;
  double fval = 0.0;
  std::size_t evals = 0;
};

template <class F>
NelderMeadResult nelder_mead_minimize(F&& f, const Vector& x0, const Vector& step,
                                      const NelderMeadOptions& options = {}) {
  const std::size_t n = x0.size();
  NelderMeadResult res;
  std::size_t evals = 0;
  auto eval = [&](const Vector& x) {
    ++evals;
    return f(x);
  };

  std::vector<Vector> pts(n + 1, x0);
  Vector fv(n + 1);
  for (std::size_t i = 0; i < n; ++i) pts[i + 1][i] += step[i];
  for (std::size_t i = 0; i <= n; ++i) fv[i] = eval(pts[i]);

  std::vector<std::size_t> order(n + 1);
  Vector centroid(n), xr(n), xe(n), xc(n);
  while (evals < options.max_evals) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
    const std::size_t best = order[0], worst = order[n], second_worst = order[n - 1];

    if (fv[worst] - fv[best] < options.ftol_abs * (1.0 + std::abs(fv[best]))) break;
    double diam = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      diam = std::max(diam, std::abs(pts[worst][i] - pts[best][i]));
    if (diam < options.xtol_abs) break;

    std::fill(centroid.begin(), centroid.end(), 0.0);
    for (std::size_t k = 0; k <= n; ++k) {
      if (k == worst) continue;
      for (std::size_t i = 0; i < n; ++i) centroid[i] += pts[k][i];
    }
    for (std::size_t i = 0; i < n; ++i) centroid[i] /= static_cast<double>(n);

    for (std::size_t i = 0; i < n; ++i) xr[i] = centroid[i] + (centroid[i] - pts[worst][i]);
    const double fr = eval(xr);
    if (fr < fv[best]) {
      for (std::size_t i = 0; i < n; ++i) xe[i] = centroid[i] + 2.0 * (centroid[i] - pts[worst][i]);
      const double fe = eval(xe);
      if (fe < fr) {
        pts[worst] = xe;
        fv[worst] = fe;
      } else {
        pts[worst] = xr;
        fv[worst] = fr;
      }
      continue;
    }
    if (fr < fv[second_worst]) {
      pts[worst] = xr;
      fv[worst] = fr;
      continue;
    }
    const bool outside = fr < fv[worst];
    if (outside) {
      for (std::size_t i = 0; i < n; ++i) xc[i] = centroid[i] + 0.5 * (xr[i] - centroid[i]);
    } else {
      for (std::size_t i = 0; i < n; ++i) xc[i] = centroid[i] + 0.5 * (pts[worst][i] - centroid[i]);
    }
    const double fc = eval(xc);
    if (fc < std::min(fr, fv[worst])) {
      pts[worst] = xc;
      fv[worst] = fc;
      continue;
    }
    // Shrink toward the best vertex.
    for (std::size_t k = 0; k <= n; ++k) {
      if (k == best) continue;
      for (std::size_t i = 0; i < n; ++i) pts[k][i] = pts[best][i] + 0.5 * (pts[k][i] - pts[best][i]);
      fv[k] = eval(pts[k]);
      if (evals >= options.max_evals) break;
    }
  }

  std::size_t best = 0;
  for (std::size_t k = 1; k <= n; ++k)
    if (fv[k] < fv[best]) best = k;
  res.x = pts[best];
  res.fval = fv[best];
  res.evals = evals;
  return res;
}

}  // namespace mwm

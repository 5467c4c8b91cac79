#pragma once

// Bounded Nelder–Mead maximization with quasi-random restarts.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "qfc/error.hpp"
#include "qfc/qstate.hpp"

namespace qfc {

/// Point `index` of the Halton sequence in [lower, upper]. Coordinates with
/// lower == upper stay fixed.
inline RVector halton_point(std::size_t index, const RVector& lower,
                            const RVector& upper) {
  static constexpr int primes[] = {2,  3,  5,  7,  11, 13, 17, 19, 23, 29,
                                   31, 37, 41, 43, 47, 53, 59, 61, 67, 71};
  RVector x(lower.size());
  for (Eigen::Index d = 0; d < lower.size(); ++d) {
    const int b = primes[d % 20];
    double f = 1.0, r = 0.0;
    // Offset by the dimension block so dims beyond 20 do not repeat.
    std::size_t i = index + 1 + static_cast<std::size_t>(d / 20) * 7919;
    while (i > 0) {
      f /= b;
      r += f * static_cast<double>(i % static_cast<std::size_t>(b));
      i /= static_cast<std::size_t>(b);
    }
    x(d) = lower(d) + r * (upper(d) - lower(d));
  }
  return x;
}

struct NelderMeadOptions {
  double diameter_tol = 1e-8;
  /// Initial simplex edge as a fraction of each coordinate's range.
  double initial_scale = 0.25;
  int max_evaluations = 20000;
};

struct NelderMeadResult {
  RVector x;
  double value = -std::numeric_limits<double>::infinity();
  bool converged = false;
  int evaluations = 0;
};

/// Maximizes f over the box [lower, upper] by Nelder–Mead with every trial
/// point clamped into the box. Converged means simplex diameter below the
/// tolerance.
inline NelderMeadResult nelder_mead_max(
    const std::function<double(const RVector&)>& f, const RVector& x0,
    const RVector& lower, const RVector& upper,
    const NelderMeadOptions& opt = {}) {
  std::vector<Eigen::Index> free;
  for (Eigen::Index i = 0; i < lower.size(); ++i)
    if (upper(i) > lower(i)) free.push_back(i);
  NelderMeadResult res;
  auto clamp = [&](RVector x) { return RVector(x.cwiseMax(lower).cwiseMin(upper)); };
  auto eval = [&](const RVector& x) {
    ++res.evaluations;
    const double v = f(x);
    return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
  };
  const RVector start = clamp(x0);
  if (free.empty()) {
    res.x = start;
    res.value = eval(start);
    res.converged = true;
    return res;
  }
  const int n = static_cast<int>(free.size());

  std::vector<RVector> simplex;
  std::vector<double> fv;
  auto build = [&](const RVector& centre, double scale) {
    simplex.assign(1, centre);
    fv.assign(1, eval(centre));
    for (int k = 0; k < n; ++k) {
      const Eigen::Index i = free[static_cast<std::size_t>(k)];
      RVector p = centre;
      const double step = scale * (upper(i) - lower(i));
      p(i) = centre(i) + step <= upper(i) ? centre(i) + step : centre(i) - step;
      p = clamp(p);
      simplex.push_back(p);
      fv.push_back(eval(p));
    }
  };
  auto diameter = [&] {
    double d = 0.0;
    for (std::size_t k = 1; k < simplex.size(); ++k)
      d = std::max(d, (simplex[k] - simplex[0]).cwiseAbs().maxCoeff());
    return d;
  };

  // One restart from the converged point guards against collapse onto a
  // non-stationary face.
  for (int round = 0; round < 2; ++round) {
    build(round == 0 ? start : res.x, round == 0 ? opt.initial_scale : 1e-3);
    bool done = false;
    while (res.evaluations < opt.max_evaluations) {
      std::vector<std::size_t> order(simplex.size());
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(),
                [&](std::size_t a, std::size_t b) { return fv[a] > fv[b]; });
      std::vector<RVector> s2;
      std::vector<double> f2;
      for (auto k : order) {
        s2.push_back(simplex[k]);
        f2.push_back(fv[k]);
      }
      simplex.swap(s2);
      fv.swap(f2);
      if (diameter() < opt.diameter_tol) {
        done = true;
        break;
      }
      RVector centroid = RVector::Zero(lower.size());
      for (int k = 0; k < n; ++k) centroid += simplex[static_cast<std::size_t>(k)];
      centroid /= n;
      const RVector& worst = simplex.back();
      const RVector xr = clamp(centroid + (centroid - worst));
      const double fr = eval(xr);
      if (fr > fv[0]) {
        const RVector xe = clamp(centroid + 2.0 * (centroid - worst));
        const double fe = eval(xe);
        if (fe > fr) {
          simplex.back() = xe;
          fv.back() = fe;
        } else {
          simplex.back() = xr;
          fv.back() = fr;
        }
        continue;
      }
      if (fr > fv[static_cast<std::size_t>(n - 1)]) {
        simplex.back() = xr;
        fv.back() = fr;
        continue;
      }
      const bool outside = fr > fv.back();
      const RVector xc = outside ? clamp(centroid + 0.5 * (xr - centroid))
                                 : clamp(centroid + 0.5 * (worst - centroid));
      const double fc = eval(xc);
      if (outside ? fc >= fr : fc > fv.back()) {
        simplex.back() = xc;
        fv.back() = fc;
        continue;
      }
      for (std::size_t k = 1; k < simplex.size(); ++k) {
        simplex[k] = clamp(simplex[0] + 0.5 * (simplex[k] - simplex[0]));
        fv[k] = eval(simplex[k]);
      }
    }
    const auto best = static_cast<std::size_t>(
        std::max_element(fv.begin(), fv.end()) - fv.begin());
    if (fv[best] >= res.value || res.x.size() == 0) {
      res.x = simplex[best];
      res.value = fv[best];
    }
    res.converged = done;
    if (!done) break;
  }
  return res;
}

struct MultiStartResult {
  RVector x;
  double value = -std::numeric_limits<double>::infinity();
  int converged_runs = 0;
  int runs = 0;
};

/// Best of Nelder–Mead runs from `restarts` Halton points (the first start
/// is `x0` when given). Throws if no run converges.
inline MultiStartResult maximize_box(
    const std::function<double(const RVector&)>& f, const RVector& lower,
    const RVector& upper, int restarts, const RVector* x0 = nullptr,
    const NelderMeadOptions& opt = {}) {
  if (restarts < 1) throw DomainError("maximize_box: restarts must be >= 1");
  if (lower.size() != upper.size())
    throw DimensionError("maximize_box: bound sizes differ");
  MultiStartResult out;
  for (int r = 0; r < restarts; ++r) {
    const RVector start = (r == 0 && x0) ? *x0
                                          : halton_point(static_cast<std::size_t>(r), lower, upper);
    const auto res = nelder_mead_max(f, start, lower, upper, opt);
    ++out.runs;
    if (res.converged) ++out.converged_runs;
    if (res.value > out.value) {
      out.value = res.value;
      out.x = res.x;
    }
  }
  if (out.converged_runs == 0)
    throw NumericalError("maximize_box: no Nelder–Mead run converged");
  return out;
}

}  // namespace qfc

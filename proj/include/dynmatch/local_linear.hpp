#ifndef DYNMATCH_LOCAL_LINEAR_HPP
#define DYNMATCH_LOCAL_LINEAR_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "dynmatch/core.hpp"

namespace dynmatch {

/// 1.06 * sd * n^{-1/5} (population sd). Zero when x is constant.
template <typename Scalar>
Scalar rule_of_thumb_bandwidth(std::span<const Scalar> x) {
  using std::pow;
  using std::sqrt;
  if (x.empty()) throw DomainError("bandwidth: empty sample");
  const Scalar n = Scalar(x.size());
  const Scalar mean = std::accumulate(x.begin(), x.end(), Scalar(0)) / n;
  Scalar ss = 0;
  for (Scalar v : x) ss += (v - mean) * (v - mean);
  return Scalar(1.06) * sqrt(ss / n) * pow(n, Scalar(-0.2));
}

/// Gaussian-kernel local linear regression of y on x evaluated at `at`.
/// Observations farther than `cutoff` bandwidths from a point are ignored.
/// A point whose window is empty takes the y of the nearest observation;
/// a window with no spread in x falls back to the kernel-weighted mean.
/// Bandwidth 0 averages y over observations with exactly equal x.
template <typename Scalar>
std::vector<Scalar> local_linear(std::span<const Scalar> x, std::span<const Scalar> y, Scalar h,
                                 std::span<const Scalar> at, Scalar cutoff = Scalar(7)) {
  using std::exp;
  if (x.size() != y.size()) throw DomainError("local_linear: x and y differ in length");
  if (x.empty()) throw DomainError("local_linear: empty sample");
  if (!(h >= 0)) throw DomainError("local_linear: bandwidth must be non-negative");

  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<Scalar> xs(x.size()), ys(x.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    xs[i] = x[order[i]];
    ys[i] = y[order[i]];
  }

  auto nearest = [&](Scalar p) {
    auto it = std::lower_bound(xs.begin(), xs.end(), p);
    if (it == xs.end()) return ys.back();
    if (it == xs.begin()) return ys.front();
    const auto i = static_cast<std::size_t>(it - xs.begin());
    return (p - xs[i - 1] <= xs[i] - p) ? ys[i - 1] : ys[i];
  };

  std::vector<Scalar> out(at.size());
  for (std::size_t q = 0; q < at.size(); ++q) {
    const Scalar p = at[q];
    const auto lo = static_cast<std::size_t>(std::lower_bound(xs.begin(), xs.end(), p - cutoff * h) - xs.begin());
    const auto hi = static_cast<std::size_t>(std::upper_bound(xs.begin(), xs.end(), p + cutoff * h) - xs.begin());
    if (lo >= hi) {
      out[q] = nearest(p);
      continue;
    }
    if (h == 0) {
      Scalar sum = 0;
      for (std::size_t i = lo; i < hi; ++i) sum += ys[i];
      out[q] = sum / Scalar(hi - lo);
      continue;
    }
    Scalar s0 = 0, s1 = 0, s2 = 0, t0 = 0, t1 = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      const Scalar u = (xs[i] - p) / h;
      const Scalar w = exp(Scalar(-0.5) * u * u);
      const Scalar d = xs[i] - p;
      s0 += w;
      s1 += w * d;
      s2 += w * d * d;
      t0 += w * ys[i];
      t1 += w * d * ys[i];
    }
    const Scalar det = s0 * s2 - s1 * s1;
    if (det > Scalar(1e-12) * s0 * s2 && det > 0)
      out[q] = (s2 * t0 - s1 * t1) / det;
    else
      out[q] = t0 / s0;
  }
  return out;
}

}  // namespace dynmatch

#endif  // DYNMATCH_LOCAL_LINEAR_HPP

#pragma once

// Test-only reference implementations. These deliberately take the slow,
// obvious route so they stay independent of the library code they check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "gova/geometry.hpp"

namespace gova::test {

inline Box random_box(std::mt19937_64& rng, double min_side) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (;;) {
    double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
    Box box{std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)};
    if (box.width() >= min_side && box.height() >= min_side) return box;
  }
}

inline BoxSet random_box_set(std::mt19937_64& rng, int lo, int hi, double min_side) {
  std::uniform_int_distribution<int> n(lo, hi);
  BoxSet s;
  for (int i = n(rng); i > 0; --i) s.push_back(random_box(rng, min_side));
  return s;
}

/// Pixel-center coverage mask of a box set on a res x res grid.
inline std::vector<unsigned char> rasterize(const BoxSet& s, int res) {
  std::vector<unsigned char> m(static_cast<std::size_t>(res) * res, 0);
  for (const Box& b : s) {
    // pixel i is covered iff x0 <= (i + 0.5) / res < x1
    const int i0 = std::max(0, static_cast<int>(std::ceil(b.x0 * res - 0.5)));
    const int i1 = std::min(res, static_cast<int>(std::ceil(b.x1 * res - 0.5)));
    const int j0 = std::max(0, static_cast<int>(std::ceil(b.y0 * res - 0.5)));
    const int j1 = std::min(res, static_cast<int>(std::ceil(b.y1 * res - 0.5)));
    for (int j = j0; j < j1; ++j)
      std::fill(m.begin() + static_cast<std::ptrdiff_t>(j) * res + i0,
                m.begin() + static_cast<std::ptrdiff_t>(j) * res + std::max(i0, i1), 1);
  }
  return m;
}

inline double raster_union_area(const BoxSet& s, int res) {
  const auto m = rasterize(s, res);
  return static_cast<double>(std::count(m.begin(), m.end(), 1)) / (static_cast<double>(res) * res);
}

inline double raster_iou(const BoxSet& a, const BoxSet& b, int res) {
  const auto ma = rasterize(a, res), mb = rasterize(b, res);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    inter += (ma[i] && mb[i]);
    uni += (ma[i] || mb[i]);
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

inline double raster_iou_any(const BoxSet& gold, const BoxSet& pred, int res) {
  if (pred.empty()) return 0.0;
  std::vector<std::vector<unsigned char>> pm;
  for (const Box& p : pred) pm.push_back(rasterize({p}, res));
  double sum = 0.0;
  for (const Box& g : gold) {
    const auto gm = rasterize({g}, res);
    double best = 0.0;
    for (const auto& m : pm) {
      std::size_t inter = 0, uni = 0;
      for (std::size_t i = 0; i < m.size(); ++i) {
        inter += (gm[i] & m[i]);
        uni += (gm[i] | m[i]);
      }
      if (uni) best = std::max(best, static_cast<double>(inter) / static_cast<double>(uni));
    }
    sum += best;
  }
  return sum / static_cast<double>(gold.size());
}

/// Random box with corners on the 1/res lattice, so pixel-center
/// rasterization at that resolution covers it exactly.
inline Box random_lattice_box(std::mt19937_64& rng, int res, int min_side_px) {
  std::uniform_int_distribution<int> u(0, res);
  for (;;) {
    int a = u(rng), b = u(rng), c = u(rng), d = u(rng);
    if (std::abs(a - b) < min_side_px || std::abs(c - d) < min_side_px) continue;
    const double r = res;
    return {std::min(a, b) / r, std::min(c, d) / r, std::max(a, b) / r, std::max(c, d) / r};
  }
}

inline BoxSet random_lattice_box_set(std::mt19937_64& rng, int lo, int hi, int res) {
  std::uniform_int_distribution<int> n(lo, hi);
  BoxSet s;
  for (int i = n(rng); i > 0; --i) s.push_back(random_lattice_box(rng, res, 1));
  return s;
}

/// Exhaustive minimum-cost assignment. Enumerates injective maps from the
/// smaller side; among optimal solutions keeps the lexicographically
/// smallest row-sorted pair list.
inline Assignment brute_force_assignment(const CostMatrix& c) {
  Assignment best;
  best.total_cost = std::numeric_limits<double>::infinity();
  const std::size_t rows = static_cast<std::size_t>(c.rows()), cols = static_cast<std::size_t>(c.cols());
  if (rows == 0 || cols == 0) return {};
  const std::size_t k = std::min(rows, cols);
  const double tol = 1e-9 * std::max(1.0, c.cwiseAbs().maxCoeff() * static_cast<double>(k));

  // Enumerate ordered selections of k columns for k chosen rows.
  std::vector<bool> row_mask(rows, false);
  std::fill(row_mask.begin(), row_mask.begin() + static_cast<std::ptrdiff_t>(k), true);
  do {
    std::vector<std::size_t> chosen_rows;
    for (std::size_t i = 0; i < rows; ++i)
      if (row_mask[i]) chosen_rows.push_back(i);
    std::vector<std::size_t> perm(cols);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      Assignment cand;
      for (std::size_t t = 0; t < k; ++t) {
        cand.pairs.emplace_back(chosen_rows[t], perm[t]);
        cand.total_cost += c(static_cast<Eigen::Index>(chosen_rows[t]), static_cast<Eigen::Index>(perm[t]));
      }
      if (cand.total_cost < best.total_cost - tol ||
          (std::abs(cand.total_cost - best.total_cost) <= tol && cand.pairs < best.pairs)) {
        best = cand;
      }
      // skip permutations that only differ beyond position k
      std::reverse(perm.begin() + static_cast<std::ptrdiff_t>(k), perm.end());
    } while (std::next_permutation(perm.begin(), perm.end()));
  } while (std::prev_permutation(row_mask.begin(), row_mask.end()));
  return best;
}

// Adaptive Simpson on [a, b].
inline double simpson(const std::function<double(double)>& f, double a, double b, double fa, double fm, double fb,
               double whole, double tol, int depth) {
  const double m = 0.5 * (a + b), lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6 * (fa + 4 * flm + fm), right = (b - m) / 6 * (fm + 4 * frm + fb);
  if (depth <= 0 || std::abs(left + right - whole) <= 15 * tol) return left + right + (left + right - whole) / 15;
  return simpson(f, a, m, fa, flm, fm, left, tol / 2, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2, depth - 1);
}

inline double integrate(const std::function<double(double)>& f, double a, double b, double tol) {
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  return simpson(f, a, b, fa, fm, fb, (b - a) / 6 * (fa + 4 * fm + fb), tol, 60);
}

// Tail mass of chi2(k) above x, integrated in u = sqrt(t) so the integrand
// is smooth at the origin.
inline double chi2_sf_oracle(double x, int k) {
  const double norm = std::pow(2.0, k / 2.0) * std::tgamma(k / 2.0);
  auto f = [k, norm](double u) { return 2.0 * std::pow(u, k - 1) * std::exp(-u * u / 2) / norm; };
  const double lo = std::sqrt(x);
  double s = 0.0;
  for (double a = lo; a < 40.0; a += 1.0) s += integrate(f, a, std::min(a + 1.0, 40.0), 1e-15);
  return s;
}

}  // namespace gova::test

#pragma once

// Box geometry for grounded localization: pairwise IoU / GIoU, the Any and
// All set protocols, and rectangular min-cost assignment.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gova/error.hpp"

namespace gova {

/// Axis-aligned box in normalized image coordinates, corner format.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool degenerate() const { return !(area() > 0.0); }

  std::array<double, 4> as_array() const { return {x0, y0, x1, y1}; }
  friend bool operator==(const Box&, const Box&) = default;
};

using BoxSet = std::vector<Box>;

inline bool is_valid(const Box& b) {
  auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
  return in01(b.x0) && in01(b.y0) && in01(b.x1) && in01(b.y1) && b.x0 <= b.x1 &&
         b.y0 <= b.y1;
}

inline void validate(const Box& b) {
  require(is_valid(b), ErrorKind::kContract, "box violates 0<=x0<=x1<=1, 0<=y0<=y1<=1");
}

/// Center-format quadruple (cx, cy, w, h).
struct CenterBox {
  double cx = 0, cy = 0, w = 0, h = 0;
};

inline CenterBox to_center(const Box& b) {
  return {(b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2, b.x1 - b.x0, b.y1 - b.y0};
}

/// Corner format, each coordinate clamped to [0,1].
inline Box to_corners(const CenterBox& c) {
  auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
  return {clamp01(c.cx - c.w / 2), clamp01(c.cy - c.h / 2), clamp01(c.cx + c.w / 2),
          clamp01(c.cy + c.h / 2)};
}

namespace detail {

// Intersection and union areas for corner quadruples. Templated so the loss
// code can push forward-mode duals through the same arithmetic.
template <class T>
struct PairAreas {
  T inter, uni, enclose;
};

template <class T>
PairAreas<T> pair_areas(const std::array<T, 4>& a, const std::array<T, 4>& b) {
  using std::max;
  using std::min;
  const T zero(0.0);
  T iw = min(a[2], b[2]) - max(a[0], b[0]);
  T ih = min(a[3], b[3]) - max(a[1], b[1]);
  T inter = max(iw, zero) * max(ih, zero);
  T area_a = (a[2] - a[0]) * (a[3] - a[1]);
  T area_b = (b[2] - b[0]) * (b[3] - b[1]);
  T uni = area_a + area_b - inter;
  T cw = max(a[2], b[2]) - min(a[0], b[0]);
  T ch = max(a[3], b[3]) - min(a[1], b[1]);
  return {inter, uni, cw * ch};
}

// IoU with 0/0 mapped to 0; set protocols treat degenerate boxes as empty.
inline double iou_or_zero(const Box& a, const Box& b) {
  auto ar = pair_areas<double>(a.as_array(), b.as_array());
  return ar.uni > 0.0 ? ar.inter / ar.uni : 0.0;
}

}  // namespace detail

/// GIoU on corner quadruples for any arithmetic-like scalar. Caller ensures
/// the enclosing box has positive area.
template <class T>
T giou_generic(const std::array<T, 4>& a, const std::array<T, 4>& b) {
  auto ar = detail::pair_areas<T>(a, b);
  return ar.inter / ar.uni - (ar.enclose - ar.uni) / ar.enclose;
}

inline double iou(const Box& a, const Box& b) {
  if (a.degenerate() && b.degenerate())
    fail(ErrorKind::kGeometry, "iou undefined for two zero-area boxes");
  return detail::iou_or_zero(a, b);
}

inline double giou(const Box& a, const Box& b) {
  if (a.degenerate() && b.degenerate())
    fail(ErrorKind::kGeometry, "giou undefined for two zero-area boxes");
  // enclose - union can round below zero
  return std::min(giou_generic<double>(a.as_array(), b.as_array()), detail::iou_or_zero(a, b));
}

/// Smallest box covering every member. Requires a nonempty set.
inline Box enclosing(const BoxSet& s) {
  require(!s.empty(), ErrorKind::kContract, "enclosing box of an empty set");
  Box r = s.front();
  for (const Box& b : s) {
    r.x0 = std::min(r.x0, b.x0);
    r.y0 = std::min(r.y0, b.y0);
    r.x1 = std::max(r.x1, b.x1);
    r.y1 = std::max(r.y1, b.y1);
  }
  return r;
}

/// Mean over gold boxes of the best IoU against any prediction.
inline double iou_any(const BoxSet& gold, const BoxSet& pred) {
  require(!gold.empty(), ErrorKind::kInvalidInstance, "iou_any: empty gold set");
  if (pred.empty()) return 0.0;
  double sum = 0.0;
  for (const Box& g : gold) {
    double best = 0.0;
    for (const Box& p : pred) best = std::max(best, detail::iou_or_zero(g, p));
    sum += best;
  }
  return sum / static_cast<double>(gold.size());
}

/// Areas of (A ∩ B) and (A ∪ B) for the point-set unions A = ∪gold, B = ∪pred,
/// by coordinate compression over the grid spanned by all box edges.
struct RegionAreas {
  double intersection = 0, union_ = 0;
};

inline RegionAreas region_areas(const BoxSet& a, const BoxSet& b) {
  std::vector<double> xs, ys;
  for (const BoxSet* s : {&a, &b})
    for (const Box& r : *s) {
      xs.insert(xs.end(), {r.x0, r.x1});
      ys.insert(ys.end(), {r.y0, r.y1});
    }
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  std::sort(ys.begin(), ys.end());
  ys.erase(std::unique(ys.begin(), ys.end()), ys.end());
  if (xs.size() < 2 || ys.size() < 2) return {};

  const std::size_t nx = xs.size() - 1, ny = ys.size() - 1;
  auto index = [](const std::vector<double>& v, double x) {
    return static_cast<std::size_t>(std::lower_bound(v.begin(), v.end(), x) - v.begin());
  };
  // Cell coverage masks: bit 0 = covered by a, bit 1 = covered by b.
  std::vector<unsigned char> cover(nx * ny, 0);
  auto paint = [&](const BoxSet& s, unsigned char bit) {
    for (const Box& r : s) {
      if (r.degenerate()) continue;
      const std::size_t i0 = index(xs, r.x0), i1 = index(xs, r.x1);
      const std::size_t j0 = index(ys, r.y0), j1 = index(ys, r.y1);
      for (std::size_t j = j0; j < j1; ++j)
        for (std::size_t i = i0; i < i1; ++i) cover[j * nx + i] |= bit;
    }
  };
  paint(a, 1);
  paint(b, 2);
  RegionAreas out;
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) {
      const unsigned char c = cover[j * nx + i];
      if (!c) continue;
      const double cell = (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
      out.union_ += cell;
      if (c == 3) out.intersection += cell;
    }
  return out;
}

/// How the All protocol forms the joint region of a box set.
enum class JointRegion {
  kUnion,      // exact point-set union (default)
  kEnclosing,  // single smallest enclosing rectangle
};

/// IoU between the joint region of the gold set and that of the predictions.
inline double iou_all(const BoxSet& gold, const BoxSet& pred,
                      JointRegion mode = JointRegion::kUnion) {
  require(!gold.empty(), ErrorKind::kInvalidInstance, "iou_all: empty gold set");
  if (pred.empty()) return 0.0;
  if (mode == JointRegion::kEnclosing) return detail::iou_or_zero(enclosing(gold), enclosing(pred));
  if (gold.size() == 1 && pred.size() == 1) return detail::iou_or_zero(gold[0], pred[0]);
  const RegionAreas r = region_areas(gold, pred);
  if (!(r.union_ > 0.0)) fail(ErrorKind::kGeometry, "iou_all: both regions have zero area");
  return r.intersection / r.union_;
}

// ---------------------------------------------------------------------------
// Assignment

struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // sorted by row
  double total_cost = 0.0;
};

using CostMatrix = Eigen::MatrixXd;

namespace detail {

// Shortest augmenting path with potentials, rows <= cols. Returns the column
// assigned to each row.
inline std::vector<std::size_t> solve_rows_le_cols(const CostMatrix& c) {
  const std::size_t n = static_cast<std::size_t>(c.rows());
  const std::size_t m = static_cast<std::size_t>(c.cols());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = c(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) -
                           u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n, 0);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

inline double min_assignment_cost(const CostMatrix& c) {
  if (c.rows() == 0 || c.cols() == 0) return 0.0;
  if (c.rows() > c.cols()) return min_assignment_cost(c.transpose());
  const auto cols = solve_rows_le_cols(c);
  double total = 0.0;
  for (std::size_t i = 0; i < cols.size(); ++i)
    total += c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(cols[i]));
  return total;
}

inline CostMatrix submatrix(const CostMatrix& c, const std::vector<Eigen::Index>& rows,
                            const std::vector<Eigen::Index>& cols) {
  CostMatrix s(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j)
      s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = c(rows[i], cols[j]);
  return s;
}

}  // namespace detail

/// Minimum-cost assignment of size min(rows, cols). Among optimal solutions
/// the one whose row-sorted pair list is lexicographically smallest is
/// returned (rows are assigned before being skipped; smaller columns first).
inline Assignment hungarian(const CostMatrix& cost) {
  Assignment out;
  const Eigen::Index rows = cost.rows(), cols = cost.cols();
  if (rows == 0 || cols == 0) return out;
  require(cost.allFinite(), ErrorKind::kContract, "hungarian: non-finite cost entry");

  const double best = detail::min_assignment_cost(cost);
  const double tol = 1e-9 * std::max(1.0, cost.cwiseAbs().maxCoeff() * static_cast<double>(std::min(rows, cols)));

  std::vector<Eigen::Index> free_rows(static_cast<std::size_t>(rows)), free_cols(static_cast<std::size_t>(cols));
  std::iota(free_rows.begin(), free_rows.end(), Eigen::Index{0});
  std::iota(free_cols.begin(), free_cols.end(), Eigen::Index{0});
  double fixed = 0.0;
  std::size_t remaining = static_cast<std::size_t>(std::min(rows, cols));

  for (Eigen::Index r = 0; r < rows && remaining > 0; ++r) {
    auto rows_after = free_rows;
    rows_after.erase(std::find(rows_after.begin(), rows_after.end(), r));
    for (std::size_t k = 0; k < free_cols.size(); ++k) {
      const Eigen::Index c = free_cols[k];
      auto cols_after = free_cols;
      cols_after.erase(cols_after.begin() + static_cast<std::ptrdiff_t>(k));
      if (std::min(rows_after.size(), cols_after.size()) != remaining - 1) continue;
      const double rest = detail::min_assignment_cost(detail::submatrix(cost, rows_after, cols_after));
      if (std::abs(fixed + cost(r, c) + rest - best) <= tol) {
        out.pairs.emplace_back(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
        fixed += cost(r, c);
        free_cols = std::move(cols_after);
        --remaining;
        break;
      }
    }
    // No column kept the optimum: the row is left unassigned (rows > cols).
    free_rows = std::move(rows_after);
  }
  out.total_cost = fixed;
  return out;
}

}  // namespace gova

#pragma once

#include "rda/common.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

namespace rda::geometry {

namespace detail {

/// Squared distance from every row of `from` to its nearest row of `to`.
inline Vector nearest_squared(const Matrix& from, const Matrix& to) {
  Vector out(from.rows());
  for (Eigen::Index i = 0; i < from.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < to.rows(); ++j) best = std::min(best, (from.row(i) - to.row(j)).squaredNorm());
    out[i] = best;
  }
  return out;
}

inline void check_sets(const Matrix& a, const Matrix& b) {
  if (a.rows() == 0 || b.rows() == 0) throw InvalidArgument("point sets must be non-empty");
  if (a.cols() != b.cols()) throw InvalidArgument("point sets have different dimensions");
}

}  // namespace detail

/// Symmetric squared Chamfer distance:
/// (mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2) / 2.
inline double chamfer_distance(const Matrix& a, const Matrix& b) {
  detail::check_sets(a, b);
  return 0.5 * (detail::nearest_squared(a, b).mean() + detail::nearest_squared(b, a).mean());
}

/// Symmetric Hausdorff distance (not squared).
inline double hausdorff_distance(const Matrix& a, const Matrix& b) {
  detail::check_sets(a, b);
  return std::sqrt(std::max(detail::nearest_squared(a, b).maxCoeff(), detail::nearest_squared(b, a).maxCoeff()));
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with row/column potentials, O(n^3)). Returns the column assigned to each row.
inline std::vector<int> solve_assignment(const Matrix& cost) {
  if (cost.rows() != cost.cols()) throw InvalidArgument("assignment cost matrix must be square");
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; p[j] is the row matched to column j, column 0 is virtual.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
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
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(n, -1);
  for (int j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  return assignment;
}

/// Rows of `points` chosen without replacement; all rows (in order) when
/// count equals the set size.
inline Matrix subsample_rows(const Matrix& points, int count, Rng& rng) {
  const int n = static_cast<int>(points.rows());
  if (count > n) throw InvalidArgument("cannot subsample more points than available");
  if (count == n) return points;
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < count; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  Matrix out(count, points.cols());
  for (int i = 0; i < count; ++i) out.row(i) = points.row(idx[i]);
  return out;
}

/// Earth mover distance between equal-size subsamples: the mean Euclidean
/// length of the optimal one-to-one matching.
inline double earth_mover_distance(const Matrix& a, const Matrix& b, int n_sub = 256, std::uint64_t seed = 0) {
  detail::check_sets(a, b);
  if (n_sub < 1) throw InvalidArgument("n_sub must be >= 1");
  if (a.rows() < n_sub || b.rows() < n_sub) throw InvalidArgument("point set smaller than n_sub");
  Rng ra = make_rng({seed, tag(Stream::metric), 0});
  Rng rb = make_rng({seed, tag(Stream::metric), 1});
  const Matrix sa = subsample_rows(a, n_sub, ra);
  const Matrix sb = subsample_rows(b, n_sub, rb);
  Matrix cost(n_sub, n_sub);
  for (int i = 0; i < n_sub; ++i)
    for (int j = 0; j < n_sub; ++j) cost(i, j) = (sa.row(i) - sb.row(j)).norm();
  const std::vector<int> match = solve_assignment(cost);
  // Summing the matched lengths in sorted order makes the result exactly
  // symmetric in its arguments.
  std::vector<double> lengths(n_sub);
  for (int i = 0; i < n_sub; ++i) lengths[i] = cost(i, match[i]);
  std::sort(lengths.begin(), lengths.end());
  double total = 0.0;
  for (double l : lengths) total += l;
  return total / n_sub;
}

}  // namespace rda::geometry

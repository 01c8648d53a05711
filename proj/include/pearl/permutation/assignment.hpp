#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "pearl/core/error.hpp"
#include "pearl/core/tensor.hpp"
#include "pearl/permutation/hard_permutation.hpp"

namespace pearl {

namespace detail {

/// Hungarian algorithm (potentials form), O(n^3). Minimises sum cost[i][a[i]]
/// over square `cost` (row-major, n x n); returns the column of each row.
inline std::vector<std::size_t> hungarian_min(const std::vector<double>& cost, std::size_t n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
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
  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  return assignment;
}

/// Maximum of sum_i w[rows[i], a(i)] over bijections onto `cols`.
inline double max_assignment_value(const std::vector<double>& w, std::size_t n,
                                   const std::vector<std::size_t>& rows,
                                   const std::vector<std::size_t>& cols) {
  const std::size_t m = rows.size();
  if (m == 0) return 0.0;
  std::vector<double> cost(m * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) cost[i * m + j] = -w[rows[i] * n + cols[j]];
  const auto a = hungarian_min(cost, m);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) total += w[rows[i] * n + cols[a[i]]];
  return total;
}

}  // namespace detail

/// Exact maximum-weight assignment sum_i P[i, perm(i)]. Among optimal
/// assignments the lexicographically smallest is returned: each source index,
/// lowest first, takes the lowest target index that still admits an optimum.
template <class T>
HardPermutation round_to_hard(const Tensor<T>& P) {
  PEARL_REQUIRE(P.rank() == 2 && P.dim(0) == P.dim(1) && P.dim(0) > 0, ShapeError,
                "round_to_hard needs a non-empty square matrix, got " + to_string(P.shape()));
  const std::size_t n = P.dim(0);
  std::vector<double> w(P.values().begin(), P.values().end());
  for (double x : w) PEARL_REQUIRE(std::isfinite(x), NumericError, "round_to_hard: non-finite entry");

  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  const double optimum = detail::max_assignment_value(w, n, all, all);
  const double tol = 1e-12 * std::max(1.0, std::abs(optimum));

  std::vector<std::size_t> perm(n);
  std::vector<bool> taken(n, false);
  double fixed = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> rows;
    for (std::size_t r = i + 1; r < n; ++r) rows.push_back(r);
    bool placed = false;
    for (std::size_t j = 0; j < n && !placed; ++j) {
      if (taken[j]) continue;
      std::vector<std::size_t> cols;
      for (std::size_t c = 0; c < n; ++c)
        if (!taken[c] && c != j) cols.push_back(c);
      const double rest = detail::max_assignment_value(w, n, rows, cols);
      if (fixed + w[i * n + j] + rest >= optimum - tol) {
        perm[i] = j;
        taken[j] = true;
        fixed += w[i * n + j];
        placed = true;
      }
    }
    PEARL_REQUIRE(placed, NumericError, "round_to_hard: assignment refinement failed");
  }
  return HardPermutation(std::move(perm));
}

}  // namespace pearl

#include "eend/numerics/assignment.hpp"

#include <limits>

#include "eend/error.hpp"

namespace eend::num {

std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t rows,
                                          std::size_t cols) {
  if (rows > cols) {
    throw CapacityError("assignment needs rows <= cols, got " + std::to_string(rows) + " x " +
                        std::to_string(cols));
  }
  if (cost.size() != rows * cols) throw DimensionError("assignment cost matrix size mismatch");
  if (rows == 0) return {};

  // Potentials formulation with 1-based sentinel row/column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> owner(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<bool> used(cols + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> choice(rows);
  for (std::size_t j = 1; j <= cols; ++j) {
    if (owner[j] != 0) choice[owner[j] - 1] = j - 1;
  }
  return choice;
}

double assignment_cost(const std::vector<double>& cost, std::size_t cols,
                       const std::vector<std::size_t>& choice) {
  double total = 0.0;
  for (std::size_t i = 0; i < choice.size(); ++i) total += cost[i * cols + choice[i]];
  return total;
}

}  // namespace eend::num

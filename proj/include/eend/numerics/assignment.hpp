#pragma once

#include <cstddef>
#include <vector>

namespace eend::num {

// Minimum-cost assignment of every row to a distinct column of a row-major
// rows x cols cost matrix (Hungarian method). Requires rows <= cols.
// Returns the chosen column per row.
std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t rows,
                                          std::size_t cols);

double assignment_cost(const std::vector<double>& cost, std::size_t cols,
                       const std::vector<std::size_t>& choice);

}  // namespace eend::num

#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "eend/numerics/tensor.hpp"

namespace eend::num {

struct GradReport {
  std::string op_name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  // passed also holds when every absolute error is at or below this floor.
  double abs_floor = 1e-10;
  // Relative errors divide by max(|analytic|, |numeric|, rel_denominator_floor)
  // so gradients near zero are judged on absolute error.
  double rel_denominator_floor = 1e-3;
  // 0 checks every element; otherwise an evenly strided subset per tensor.
  std::size_t max_elements_per_tensor = 0;
};

// Compares the reverse-mode gradient of a scalar function against central
// differences. `wrt` are perturbed in place and restored afterwards; the
// function must return a single-element tensor.
GradReport grad_check(const std::string& name, const std::function<Tensor<double>()>& fn,
                      std::vector<Tensor<double>> wrt, const GradCheckOptions& options = {});

// Convenience form: `inputs` are marked as requiring gradients and handed to fn.
GradReport grad_check(
    const std::string& name,
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double tolerance);

}  // namespace eend::num

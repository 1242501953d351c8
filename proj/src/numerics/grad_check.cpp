#include "eend/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "eend/error.hpp"

namespace eend::num {

namespace {

double evaluate(const std::function<Tensor<double>()>& fn) {
  NoGradGuard guard;
  const Tensor<double> y = fn();
  if (y.numel() != 1) {
    throw DimensionError("grad_check: function output " + shape_str(y.shape()) +
                         " is not scalar; supply a scalar reduction");
  }
  return y.item();
}

}  // namespace

GradReport grad_check(const std::string& name, const std::function<Tensor<double>()>& fn,
                      std::vector<Tensor<double>> wrt, const GradCheckOptions& options) {
  for (auto& t : wrt) {
    for (double v : t.data()) {
      if (!std::isfinite(v)) throw NumericError("grad_check: non-finite input to " + name);
    }
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const Tensor<double> y = fn();
  if (y.numel() != 1) {
    throw DimensionError("grad_check: function output " + shape_str(y.shape()) +
                         " is not scalar; supply a scalar reduction");
  }
  y.backward();

  GradReport report{name, 0.0, 0.0, false};
  const double h = options.step;
  for (auto& t : wrt) {
    const std::vector<double> analytic = t.has_grad()
                                             ? std::vector<double>(t.grad().begin(), t.grad().end())
                                             : std::vector<double>(t.numel(), 0.0);
    const std::size_t count = t.numel();
    std::size_t stride = 1;
    if (options.max_elements_per_tensor > 0 && count > options.max_elements_per_tensor) {
      stride = (count + options.max_elements_per_tensor - 1) / options.max_elements_per_tensor;
    }
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < count; i += stride) {
      const double original = values[i];
      values[i] = original + h;
      const double up = evaluate(fn);
      values[i] = original - h;
      const double down = evaluate(fn);
      values[i] = original;
      const double numeric = (up - down) / (2.0 * h);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), options.rel_denominator_floor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      report.max_rel_error = std::max(report.max_rel_error, abs_err / denom);
    }
  }
  report.passed =
      report.max_rel_error <= options.tolerance || report.max_abs_error <= options.abs_floor;
  return report;
}

GradReport grad_check(
    const std::string& name,
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double tolerance) {
  GradCheckOptions options;
  options.tolerance = tolerance;
  auto bound = [&fn, &inputs]() { return fn(inputs); };
  return grad_check(name, bound, inputs, options);
}

}  // namespace eend::num

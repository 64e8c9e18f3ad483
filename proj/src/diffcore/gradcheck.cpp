#include "fewloc/diffcore/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fewloc::diff {

double GradCheckReport::max_relative_error() const {
  double worst = 0.0;
  for (const auto& e : inputs) worst = std::max(worst, e.max_relative_error);
  return worst;
}

std::string GradCheckReport::summary() const {
  std::ostringstream out;
  out << "grad_check max rel err " << max_relative_error() << " (tol " << tolerance << ")";
  for (const auto& e : inputs) {
    out << "\n  input " << e.input << ": " << e.max_relative_error << " at [" << e.worst_index
        << "] analytic=" << e.analytic << " numeric=" << e.numeric;
  }
  return out.str();
}

GradCheckReport grad_check(const ScalarFunction& fn, std::vector<Tensor> inputs,
                           GradCheckOptions options) {
  GradCheckReport report;
  report.tolerance = options.tolerance;

  for (auto& t : inputs) t.zero_grad();
  Tensor out = fn(inputs);
  if (out.numel() != 1) throw ShapeError("grad_check: function must return a scalar");
  out.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor& t = inputs[i];
    if (!t.requires_grad()) continue;
    GradCheckEntry entry;
    entry.input = i;
    auto values = t.mutable_values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double x0 = values[k];
      const double h = 1e-5 * std::max(1.0, std::abs(x0));
      values[k] = x0 + h;
      const double plus = fn(inputs).item();
      values[k] = x0 - h;
      const double minus = fn(inputs).item();
      values[k] = x0;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[i][k];
      const double denom =
          std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > entry.max_relative_error || !std::isfinite(rel)) {
        entry.max_relative_error = std::isfinite(rel) ? rel : INFINITY;
        entry.worst_index = k;
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    report.inputs.push_back(entry);
  }
  for (auto& t : inputs) t.zero_grad();
  return report;
}

}  // namespace fewloc::diff

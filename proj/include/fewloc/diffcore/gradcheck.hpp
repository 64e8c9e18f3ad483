#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fewloc/diffcore/tensor.hpp"

namespace fewloc::diff {

struct GradCheckOptions {
  double tolerance = 1e-4;
  /// Relative errors are taken against max(|analytic|, |numeric|, floor)
  /// so entries that are numerically zero are judged by absolute error.
  double denominator_floor = 1e-6;
};

struct GradCheckEntry {
  std::size_t input = 0;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> inputs;
  double tolerance = 0.0;

  double max_relative_error() const;
  bool passed() const { return max_relative_error() <= tolerance; }
  std::string summary() const;
};

using ScalarFunction = std::function<Tensor(std::span<const Tensor>)>;

/// Compares reverse-mode gradients of `fn` against central differences with
/// step 1e-5 * max(1, |x|) for every input that requires a gradient. Inputs
/// are perturbed in place and restored.
GradCheckReport grad_check(const ScalarFunction& fn, std::vector<Tensor> inputs,
                           GradCheckOptions options = {});

}  // namespace fewloc::diff

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fewloc/diffcore/tensor.hpp"

namespace fewloc::diff {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& parameter)
      : std::runtime_error("non-finite gradient in parameter '" + parameter + "'"),
        parameter_(parameter) {}
  const std::string& parameter() const { return parameter_; }

 private:
  std::string parameter_;
};

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

/// One bias-corrected Adam update using each parameter's accumulated
/// gradient (missing gradients count as zero). The learning rate is read from
/// `state` on every call so schedules can adjust it between steps.
/// Throws NonFiniteGradient before touching any parameter.
void adam_step(std::span<NamedParameter> params, AdamState& state);

}  // namespace fewloc::diff

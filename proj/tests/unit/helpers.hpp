#pragma once

#include <random>
#include <vector>

#include "fewloc/diffcore/tensor.hpp"

namespace fewloc::testing {

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                                         double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline diff::Tensor random_tensor(diff::Shape shape, std::mt19937_64& rng, bool grad = true,
                                  double lo = -1.0, double hi = 1.0) {
  const auto n = diff::numel(shape);
  return diff::Tensor(std::move(shape), random_values(n, rng, lo, hi), grad);
}

}  // namespace fewloc::testing

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "fewloc/diffcore/tensor.hpp"

namespace fewloc::diff {

// ---------------------------------------------------------------------------
// GEMM precision. Storage is always double; the convolution kernels may run
// their matrix products in single precision to speed up training.

enum class MatmulPrecision { Double, Single };

void set_matmul_precision(MatmulPrecision precision);
MatmulPrecision matmul_precision();

class ScopedMatmulPrecision {
 public:
  explicit ScopedMatmulPrecision(MatmulPrecision precision)
      : previous_(matmul_precision()) {
    set_matmul_precision(precision);
  }
  ~ScopedMatmulPrecision() { set_matmul_precision(previous_); }
  ScopedMatmulPrecision(const ScopedMatmulPrecision&) = delete;
  ScopedMatmulPrecision& operator=(const ScopedMatmulPrecision&) = delete;

 private:
  MatmulPrecision previous_;
};

// ---------------------------------------------------------------------------
// Elementwise and reductions

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor reshape(const Tensor& a, Shape shape);
/// Sum of all entries, shape [1].
Tensor sum(const Tensor& a);
Tensor sum_squares(const Tensor& a);
/// Sum of a[i] * weights[i]; weights are constants. Shape [1].
Tensor weighted_sum(const Tensor& a, std::span<const double> weights);
/// Rows of a [N,D] tensor picked by index -> [M,D].
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);

// ---------------------------------------------------------------------------
// Convolutional network layers

/// 3x3 cross-correlation, zero padding 1, stride 1.
/// input [B,Cin,H,W], weight [Cout,Cin,3,3], bias [Cout] -> [B,Cout,H,W].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias);

enum class BatchNormMode { Train, Eval };

/// Per-channel running statistics carried between calls.
struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// input [B,C,H,W]; gamma, beta [C]. Train mode normalizes with batch
/// statistics and updates `stats`; eval mode reads `stats`.
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 BatchNormStats& stats, BatchNormMode mode);

Tensor relu(const Tensor& input);
/// 2x2 max pooling, stride 2. Ties resolve to the first element in scan order.
Tensor maxpool2(const Tensor& input);
/// [B,C,H,W] -> [B,C]
Tensor global_avgpool(const Tensor& input);
/// x [B,D], weight [K,D], bias [K] -> [B,K]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Mean negative log-softmax of the true class over the batch. With class
/// weights, each term is scaled by the weight of its label before averaging.
Tensor softmax_xent(const Tensor& logits, std::span<const int> labels,
                    std::optional<std::span<const double>> class_weights = std::nullopt);

/// Row-wise log-softmax, no graph. Used for reporting probabilities.
std::vector<double> log_softmax_rows(std::span<const double> logits, std::size_t rows,
                                     std::size_t cols);

}  // namespace fewloc::diff

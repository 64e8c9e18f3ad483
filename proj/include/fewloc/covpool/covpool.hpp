#pragma once

#include <optional>

#include "fewloc/diffcore/tensor.hpp"

namespace fewloc::covpool {

/// Signed square roots below this magnitude use it in the derivative.
inline constexpr double kSqrtClamp = 1e-6;

/// Cross-covariance of two maps [B,C1,h,w] and [B,C2,h,w] without
/// normalization: (1/hw) * sum over cells of a (x) b, flattened with the
/// first stream's index major -> [B, C1*C2].
diff::Tensor covariance_pool_raw(const diff::Tensor& a, const diff::Tensor& b);

/// sign(x) * sqrt(|x|) elementwise. The backward pass evaluates
/// 1 / (2 sqrt(max(|x|, kSqrtClamp))), and zero at exactly zero.
diff::Tensor signed_sqrt(const diff::Tensor& x);

/// signed_sqrt(covariance_pool_raw(a, b)).
diff::Tensor covariance_pool(const diff::Tensor& a, const diff::Tensor& b);

/// With a mask [B,h,w]: covariance_pool(map * mask, map * (1 - mask)).
/// Without: covariance_pool(map, map). Result [B, C*C].
diff::Tensor pooled_feature(const diff::Tensor& maps,
                            const std::optional<diff::Tensor>& mask = std::nullopt);

}  // namespace fewloc::covpool

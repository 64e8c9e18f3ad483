#include "fewloc/covpool/covpool.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "fewloc/localizer/localizer.hpp"

namespace fewloc::covpool {

using diff::Node;
using diff::Tensor;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

}  // namespace

Tensor covariance_pool_raw(const Tensor& a, const Tensor& b) {
  diff::expect_rank("covariance_pool stream A", a, 4);
  diff::expect_rank("covariance_pool stream B", b, 4);
  if (a.dim(0) != b.dim(0)) throw diff::ShapeError("covariance_pool", "batch", a.dim(0), b.dim(0));
  if (a.dim(2) != b.dim(2)) throw diff::ShapeError("covariance_pool", "height", a.dim(2), b.dim(2));
  if (a.dim(3) != b.dim(3)) throw diff::ShapeError("covariance_pool", "width", a.dim(3), b.dim(3));
  const std::size_t batch = a.dim(0), c1 = a.dim(1), c2 = b.dim(1);
  const std::size_t cells = a.dim(2) * a.dim(3);
  const double inv = 1.0 / static_cast<double>(cells);
  std::vector<double> out(batch * c1 * c2);
  for (std::size_t n = 0; n < batch; ++n) {
    ConstMap A(a.values().data() + n * c1 * cells, c1, cells);
    ConstMap B(b.values().data() + n * c2 * cells, c2, cells);
    MutMap(out.data() + n * c1 * c2, c1, c2).noalias() = inv * A * B.transpose();
  }
  return diff::make_result(
      {batch, c1 * c2}, std::move(out), {a, b}, [batch, c1, c2, cells, inv](Node& self) {
        Node& an = *self.parents[0];
        Node& bn = *self.parents[1];
        double* ga = an.requires_grad ? an.grad_buffer().data() : nullptr;
        double* gb = bn.requires_grad ? bn.grad_buffer().data() : nullptr;
        for (std::size_t n = 0; n < batch; ++n) {
          ConstMap G(self.grad.data() + n * c1 * c2, c1, c2);
          ConstMap A(an.value.data() + n * c1 * cells, c1, cells);
          ConstMap B(bn.value.data() + n * c2 * cells, c2, cells);
          if (ga) MutMap(ga + n * c1 * cells, c1, cells).noalias() += inv * G * B;
          if (gb) MutMap(gb + n * c2 * cells, c2, cells).noalias() += inv * G.transpose() * A;
        }
      });
}

Tensor signed_sqrt(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    out[i] = std::copysign(std::sqrt(std::abs(v)), v);
    if (v == 0.0) out[i] = 0.0;
  }
  return diff::make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = p.value[i];
      if (v == 0.0) continue;
      g[i] += self.grad[i] * 0.5 / std::sqrt(std::max(std::abs(v), kSqrtClamp));
    }
  });
}

Tensor covariance_pool(const Tensor& a, const Tensor& b) {
  return signed_sqrt(covariance_pool_raw(a, b));
}

Tensor pooled_feature(const Tensor& maps, const std::optional<Tensor>& mask) {
  if (!mask) return covariance_pool(maps, maps);
  return covariance_pool(localizer::apply_mask(maps, *mask, false),
                         localizer::apply_mask(maps, *mask, true));
}

}  // namespace fewloc::covpool

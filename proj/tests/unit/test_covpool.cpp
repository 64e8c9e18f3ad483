#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "fewloc/covpool/covpool.hpp"
#include "fewloc/diffcore/gradcheck.hpp"
#include "fewloc/diffcore/ops.hpp"
#include "helpers.hpp"

using namespace fewloc::covpool;
using fewloc::diff::Tensor;
using fewloc::testing::random_tensor;

namespace {

Tensor project(const Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> w(t.numel());
  for (auto& x : w) x = n(rng);
  return fewloc::diff::weighted_sum(t, w);
}

}  // namespace

TEST(CovariancePool, SingleCellOuterProduct) {
  Tensor a({1, 2, 1, 1}, {2, 0});
  Tensor b({1, 2, 1, 1}, {1, -1});
  Tensor raw = covariance_pool_raw(a, b);
  EXPECT_EQ(std::vector<double>(raw.values().begin(), raw.values().end()),
            (std::vector<double>{2, -2, 0, 0}));
  Tensor norm = covariance_pool(a, b);
  EXPECT_DOUBLE_EQ(norm.values()[0], std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(norm.values()[1], -std::sqrt(2.0));
  EXPECT_EQ(norm.values()[2], 0.0);
  EXPECT_EQ(norm.values()[3], 0.0);
}

TEST(CovariancePool, ConstantMapIsRankOne) {
  std::vector<double> c = {1.5, -2.0, 0.5};
  std::vector<double> v;
  for (double x : c) v.insert(v.end(), 9, x);
  Tensor m({1, 3, 3, 3}, v);
  Tensor raw = covariance_pool_raw(m, m);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(raw.values()[i * 3 + j], c[i] * c[j], 1e-12);
}

TEST(CovariancePool, MatchesPerCellOracleAndIsSymmetric) {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor({2, 4, 3, 3}, rng, false);
  Tensor b = random_tensor({2, 5, 3, 3}, rng, false);
  Tensor raw = covariance_pool_raw(a, b);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double acc = 0;
        for (std::size_t p = 0; p < 9; ++p) {
          acc += a.values()[(n * 4 + i) * 9 + p] * b.values()[(n * 5 + j) * 9 + p];
        }
        EXPECT_NEAR(raw.values()[n * 20 + i * 5 + j], acc / 9, 1e-6);
      }
  Tensor self = covariance_pool(a, a);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_NEAR(self.values()[i * 4 + j], self.values()[j * 4 + i], 1e-6);
    }
}

TEST(CovariancePool, ExchangeSymmetryAndBilinearity) {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({1, 3, 4, 4}, rng, false);
  Tensor b = random_tensor({1, 6, 4, 4}, rng, false);
  Tensor ab = covariance_pool_raw(a, b), ba = covariance_pool_raw(b, a);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(ab.values()[i * 6 + j], ba.values()[j * 3 + i], 1e-6);
  Tensor scaled = covariance_pool_raw(fewloc::diff::scale(a, -2.5), b);
  for (std::size_t i = 0; i < ab.numel(); ++i) EXPECT_NEAR(scaled.values()[i], -2.5 * ab.values()[i], 1e-6);
}

TEST(CovariancePool, SelfPairedIsPositiveSemidefinite) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    Tensor a = random_tensor({1, 8, 2, 2}, rng, false, -3, 3);
    Tensor raw = covariance_pool_raw(a, a);
    Eigen::Map<const Eigen::MatrixXd> M(raw.values().data(), 8, 8);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-6);
  }
}

TEST(CovariancePool, SpatialMismatch) {
  EXPECT_THROW(covariance_pool(Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({1, 2, 3, 4})),
               fewloc::diff::ShapeError);
}

TEST(SignedSqrt, Values) {
  Tensor y = signed_sqrt(Tensor({3}, {0.0, 4.0, -4.0}));
  EXPECT_EQ(y.values()[0], 0.0);
  EXPECT_EQ(y.values()[1], 2.0);
  EXPECT_EQ(y.values()[2], -2.0);
}

TEST(SignedSqrt, OddFunction) {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({50}, rng, false, -10, 10);
  Tensor y = signed_sqrt(x), z = signed_sqrt(fewloc::diff::scale(x, -1.0));
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(z.values()[i], -y.values()[i]);
}

TEST(SignedSqrt, GradientAwayFromZero) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(800 + seed);
    auto v = fewloc::testing::random_values(12, rng, 1e-3, 3.0);
    for (std::size_t i = 0; i < v.size(); i += 2) v[i] = -v[i];
    auto report = fewloc::diff::grad_check(
        [seed](std::span<const Tensor> t) { return project(signed_sqrt(t[0]), seed); },
        {Tensor({12}, v, true)});
    EXPECT_TRUE(report.passed()) << report.summary();
  }
}

TEST(SignedSqrt, ZeroHasZeroSubgradientAndTinyValuesAreClamped) {
  Tensor x({3}, {0.0, 1e-12, -1e-12}, true);
  fewloc::diff::sum(signed_sqrt(x)).backward();
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.5 / std::sqrt(kSqrtClamp));
  EXPECT_DOUBLE_EQ(x.grad()[2], 0.5 / std::sqrt(kSqrtClamp));
}

TEST(PooledFeature, ChannelSquaredLength) {
  std::mt19937_64 rng(5);
  Tensor maps = random_tensor({2, 64, 2, 2}, rng, false);
  EXPECT_EQ(pooled_feature(maps).shape(), (fewloc::diff::Shape{2, 4096}));
}

TEST(PooledFeature, AllOnesMaskGivesZero) {
  std::mt19937_64 rng(6);
  Tensor maps = random_tensor({2, 3, 2, 2}, rng, false);
  Tensor f = pooled_feature(maps, Tensor::full({2, 2, 2}, 1.0));
  for (double v : f.values()) EXPECT_EQ(v, 0.0);
}

TEST(PooledFeature, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(900 + seed);
    std::vector<Tensor> in = {random_tensor({2, 3, 2, 2}, rng, true, 0.2, 1.5),
                              random_tensor({2, 2, 2}, rng, true, 0.1, 0.9)};
    auto masked = fewloc::diff::grad_check(
        [seed](std::span<const Tensor> t) { return project(pooled_feature(t[0], t[1]), seed); }, in);
    auto self = fewloc::diff::grad_check(
        [seed](std::span<const Tensor> t) { return project(pooled_feature(t[0]), seed); }, {in[0]});
    EXPECT_TRUE(masked.passed()) << masked.summary();
    EXPECT_TRUE(self.passed()) << self.summary();
  }
}

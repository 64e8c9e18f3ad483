#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "fewloc/diffcore/adam.hpp"
#include "fewloc/diffcore/checkpoint.hpp"
#include "fewloc/diffcore/gradcheck.hpp"
#include "fewloc/diffcore/ops.hpp"
#include "helpers.hpp"

using namespace fewloc::diff;
using fewloc::testing::random_tensor;

namespace {

// Projects an arbitrary tensor to a scalar with fixed random weights so every
// output entry contributes a distinct gradient.
Tensor project(const Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> w(t.numel());
  for (auto& x : w) x = n(rng);
  return weighted_sum(t, w);
}

}  // namespace

TEST(Conv2d, ZeroInputGivesZeroOutput) {
  std::mt19937_64 rng(1);
  Tensor x = Tensor::zeros({1, 1, 3, 3});
  Tensor w = random_tensor({2, 1, 3, 3}, rng, false);
  Tensor b = Tensor::zeros({2});
  Tensor y = conv2d(x, w, b);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, CenterTapIsIdentity) {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({2, 1, 5, 4}, rng, false);
  std::vector<double> w(9, 0.0);
  w[4] = 1.0;
  Tensor y = conv2d(x, Tensor({1, 1, 3, 3}, w), Tensor::zeros({1}));
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.values()[i], x.values()[i]);
}

TEST(Conv2d, MatchesDirectLoops) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 3, 5, 6}, rng, false);
  Tensor w = random_tensor({4, 3, 3, 3}, rng, false);
  Tensor b = random_tensor({4}, rng, false);
  Tensor y = conv2d(x, w, b);
  const auto X = x.values(), W = w.values(), B = b.values();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 6; ++j) {
          double acc = B[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (int di = -1; di <= 1; ++di)
              for (int dj = -1; dj <= 1; ++dj) {
                const int ii = i + di, jj = j + dj;
                if (ii < 0 || jj < 0 || ii >= 5 || jj >= 6) continue;
                acc += W[((o * 3 + c) * 3 + (di + 1)) * 3 + (dj + 1)] *
                       X[((n * 3 + c) * 5 + ii) * 6 + jj];
              }
          EXPECT_NEAR(y.values()[((n * 4 + o) * 5 + i) * 6 + j], acc, 1e-12);
        }
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  std::vector<Tensor> in = {random_tensor({2, 4, 6, 6}, rng), random_tensor({8, 4, 3, 3}, rng),
                            random_tensor({8}, rng)};
  auto report = grad_check(
      [](std::span<const Tensor> t) { return project(conv2d(t[0], t[1], t[2]), 11); }, in);
  EXPECT_TRUE(report.passed()) << report.summary();
}

TEST(Conv2d, ShapeErrorNamesAxis) {
  Tensor x = Tensor::zeros({1, 2, 4, 4});
  Tensor w = Tensor::zeros({3, 5, 3, 3});
  try {
    conv2d(x, w, Tensor::zeros({3}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, SinglePrecisionCloseToDouble) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({2, 3, 8, 8}, rng, false);
  Tensor w = random_tensor({4, 3, 3, 3}, rng, false);
  Tensor b = random_tensor({4}, rng, false);
  Tensor ref = conv2d(x, w, b);
  ScopedMatmulPrecision single(MatmulPrecision::Single);
  Tensor y = conv2d(x, w, b);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.values()[i], ref.values()[i], 1e-5);
}

TEST(BatchNorm, ConstantChannelGoesToZero) {
  Tensor x = Tensor::full({2, 1, 3, 3}, 4.2);
  BatchNormStats st(1);
  Tensor y = batchnorm(x, Tensor::full({1}, 1.0), Tensor::zeros({1}), st, BatchNormMode::Train);
  for (double v : y.values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(BatchNorm, TrainOutputHasShiftMeanAndScaleStd) {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({4, 2, 5, 5}, rng, false, -3.0, 7.0);
  BatchNormStats st(2);
  Tensor gamma({2}, {1.5, 0.5});
  Tensor beta({2}, {-0.25, 2.0});
  Tensor y = batchnorm(x, gamma, beta, st, BatchNormMode::Train);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, ss = 0;
    std::size_t m = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t k = 0; k < 25; ++k) {
        const double v = y.values()[(n * 2 + c) * 25 + k];
        s += v;
        ss += v * v;
        ++m;
      }
    const double mean = s / m;
    const double sd = std::sqrt(ss / m - mean * mean);
    EXPECT_NEAR(mean, beta.values()[c], 1e-5);
    EXPECT_NEAR(sd, gamma.values()[c], 1e-5 * gamma.values()[c] + 1e-5);
  }
}

TEST(BatchNorm, RunningStatisticsUpdateWithMomentum) {
  Tensor x({2, 1, 1, 1}, {1.0, 3.0});
  BatchNormStats st(1);
  batchnorm(x, Tensor::full({1}, 1.0), Tensor::zeros({1}), st, BatchNormMode::Train);
  EXPECT_NEAR(st.running_mean[0], 0.1 * 2.0, 1e-15);
  // unbiased batch variance of {1,3} is 2
  EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * 2.0, 1e-15);
  Tensor y = batchnorm(Tensor({1, 1, 1, 1}, {0.2}), Tensor::full({1}, 1.0), Tensor::zeros({1}),
                       st, BatchNormMode::Eval);
  EXPECT_NEAR(y.item(), 0.0, 1e-15);
}

TEST(BatchNorm, SingleElementPerChannelRejectedInTrainMode) {
  BatchNormStats st(2);
  EXPECT_THROW(batchnorm(Tensor::zeros({1, 2, 1, 1}), Tensor::full({2}, 1.0), Tensor::zeros({2}),
                         st, BatchNormMode::Train),
               std::domain_error);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    std::vector<Tensor> in = {random_tensor({3, 2, 3, 2}, rng), random_tensor({2}, rng, true, 0.5, 2.0),
                              random_tensor({2}, rng)};
    auto report = grad_check(
        [seed](std::span<const Tensor> t) {
          BatchNormStats st(2);
          return project(batchnorm(t[0], t[1], t[2], st, BatchNormMode::Train), seed);
        },
        in);
    EXPECT_TRUE(report.passed()) << "seed " << seed << ": " << report.summary();
  }
}

TEST(Pooling, MaxpoolOfTwoByTwo) {
  Tensor y = maxpool2(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 4.0);
}

TEST(Pooling, MaxpoolRejectsOddExtent) {
  EXPECT_THROW(maxpool2(Tensor::zeros({1, 1, 3, 2})), ShapeError);
  EXPECT_THROW(maxpool2(Tensor::zeros({1, 1, 2, 5})), ShapeError);
}

TEST(Pooling, GlobalAverageOfConstantMap) {
  Tensor y = global_avgpool(Tensor::full({2, 3, 4, 4}, -1.25));
  EXPECT_EQ(y.shape(), (Shape{2, 3}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, -1.25);
}

TEST(Relu, ClampsNegativesOnly) {
  Tensor y = relu(Tensor({4}, {-2.0, -0.0, 0.0, 3.5}));
  EXPECT_EQ(y.values()[0], 0.0);
  EXPECT_EQ(y.values()[2], 0.0);
  EXPECT_EQ(y.values()[3], 3.5);
}

TEST(SoftmaxXent, UniformLogitsGiveLogK) {
  Tensor logits = Tensor::full({3, 7}, 0.3);
  std::vector<int> labels = {0, 4, 6};
  EXPECT_NEAR(softmax_xent(logits, labels).item(), std::log(7.0), 1e-12);
}

TEST(SoftmaxXent, LossFallsMonotonicallyWithMargin) {
  double prev = std::numeric_limits<double>::infinity();
  for (double margin : {0.0, 1.0, 5.0, 20.0, 100.0, 800.0}) {
    std::vector<int> labels = {1};
    double loss = softmax_xent(Tensor({1, 3}, {0.0, margin, 0.0}), labels).item();
    EXPECT_LE(loss, prev);
    EXPECT_TRUE(std::isfinite(loss));
    prev = loss;
  }
  EXPECT_LT(prev, 1e-100);
}

TEST(SoftmaxXent, OutOfRangeLabel) {
  std::vector<int> labels = {3};
  EXPECT_THROW(softmax_xent(Tensor::zeros({1, 3}), labels), std::out_of_range);
  labels = {-1};
  EXPECT_THROW(softmax_xent(Tensor::zeros({1, 3}), labels), std::out_of_range);
}

TEST(SoftmaxXent, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(200 + seed);
    std::vector<int> labels = {0, 2, 1, 2};
    std::vector<double> weights = {0.5, 1.0, 1.5};
    std::vector<Tensor> in = {random_tensor({4, 3}, rng, true, -3, 3)};
    auto plain = grad_check(
        [&](std::span<const Tensor> t) { return softmax_xent(t[0], labels); }, in);
    auto weighted = grad_check(
        [&](std::span<const Tensor> t) {
          return softmax_xent(t[0], labels, std::span<const double>(weights));
        },
        in);
    EXPECT_TRUE(plain.passed()) << plain.summary();
    EXPECT_TRUE(weighted.passed()) << weighted.summary();
  }
}

TEST(Ops, ElementwiseAndLinearGradients) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(300 + seed);
    std::vector<Tensor> in = {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng),
                              random_tensor({5, 4}, rng), random_tensor({5}, rng)};
    std::vector<std::size_t> rows = {2, 0, 2};
    auto report = grad_check(
        [&](std::span<const Tensor> t) {
          Tensor h = add(mul(t[0], t[1]), scale(t[0], -0.7));
          Tensor z = linear(gather_rows(h, rows), t[2], t[3]);
          return add(project(relu(z), seed), sum_squares(reshape(t[1], {12})));
        },
        in);
    EXPECT_TRUE(report.passed()) << "seed " << seed << ": " << report.summary();
  }
}

TEST(Ops, PoolingGradients) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(400 + seed);
    std::vector<Tensor> in = {random_tensor({2, 3, 4, 6}, rng)};
    auto report = grad_check(
        [&](std::span<const Tensor> t) {
          return add(project(maxpool2(t[0]), seed), project(global_avgpool(t[0]), seed + 1));
        },
        in);
    EXPECT_TRUE(report.passed()) << report.summary();
  }
}

TEST(GradCheck, SumOfSquaresIsExact) {
  std::mt19937_64 rng(7);
  auto report = grad_check([](std::span<const Tensor> t) { return sum_squares(t[0]); },
                           {random_tensor({10}, rng)});
  EXPECT_LT(report.max_relative_error(), 1e-9);
}

TEST(GradCheck, CorruptedBackwardIsCaught) {
  std::mt19937_64 rng(8);
  auto broken = [](std::span<const Tensor> t) {
    const Tensor& x = t[0];
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * x.values()[i];
    Tensor sq = make_result(x.shape(), std::move(out), {x}, [](Node& self) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 3.0 * self.parents[0]->value[i] * self.grad[i];
    });
    return sum(sq);
  };
  auto report = grad_check(broken, {random_tensor({6}, rng)});
  EXPECT_FALSE(report.passed());
  EXPECT_GT(report.max_relative_error(), 1e-4);
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  std::mt19937_64 rng(9);
  Tensor x = random_tensor({2, 3, 8, 8}, rng, false);
  Tensor w = random_tensor({4, 3, 3, 3}, rng, false);
  Tensor b = random_tensor({4}, rng, false);
  auto run = [&] {
    BatchNormStats st(4);
    return maxpool2(relu(batchnorm(conv2d(x, w, b), Tensor::full({4}, 1.0), Tensor::zeros({4}),
                                   st, BatchNormMode::Train)));
  };
  Tensor a = run(), c = run();
  ASSERT_EQ(a.numel(), c.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.values()[i], c.values()[i]);
}

TEST(Adam, ZeroGradientLeavesParameterButAdvancesStep) {
  std::vector<NamedParameter> params = {{"w", Tensor({2}, {1.0, -2.0}, true)}};
  params[0].tensor.node().grad_buffer();
  AdamState st;
  adam_step(params, st);
  EXPECT_EQ(st.step, 1u);
  EXPECT_EQ(params[0].tensor.values()[0], 1.0);
  EXPECT_EQ(params[0].tensor.values()[1], -2.0);
  adam_step(params, st);
  EXPECT_EQ(st.step, 2u);
}

TEST(Adam, FirstUpdateIsMinusLearningRate) {
  std::vector<NamedParameter> params = {{"w", Tensor::scalar(0.0, true)}};
  params[0].tensor.node().grad_buffer()[0] = 1.0;
  AdamState st;
  adam_step(params, st);
  // m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + eps)
  EXPECT_NEAR(params[0].tensor.item(), -1e-3, 1e-9);
}

TEST(Adam, ConstantGradientMovesAgainstSign) {
  std::vector<NamedParameter> params = {{"w", Tensor({2}, {0.0, 0.0}, true)}};
  AdamState st;
  double prev0 = 0.0, prev1 = 0.0;
  for (int i = 0; i < 50; ++i) {
    params[0].tensor.zero_grad();
    auto& g = params[0].tensor.node().grad_buffer();
    g[0] = 0.3;
    g[1] = -2.0;
    adam_step(params, st);
    EXPECT_LT(params[0].tensor.values()[0], prev0);
    EXPECT_GT(params[0].tensor.values()[1], prev1);
    prev0 = params[0].tensor.values()[0];
    prev1 = params[0].tensor.values()[1];
  }
  ASSERT_EQ(st.first_moment.size(), 1u);
  EXPECT_EQ(st.first_moment[0].size(), 2u);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  std::vector<NamedParameter> params = {{"ok", Tensor::scalar(1.0, true)},
                                        {"bad", Tensor::scalar(1.0, true)}};
  params[1].tensor.node().grad_buffer()[0] = std::nan("");
  AdamState st;
  try {
    adam_step(params, st);
    FAIL();
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.parameter(), "bad");
  }
  EXPECT_EQ(params[0].tensor.item(), 1.0);
  EXPECT_EQ(st.step, 0u);
}

TEST(Checkpoint, RoundTrip) {
  Checkpoint ck;
  ck.put("a.weight", {2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6.5});
  ck.put("b", {1}, std::vector<double>{-0.25});
  auto path = std::filesystem::temp_directory_path() / "fewloc_ckpt_roundtrip.bin";
  write_checkpoint(path, ck);
  Checkpoint back = read_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.format_version, kCheckpointFormatVersion);
  ASSERT_EQ(back.entries.size(), 2u);
  EXPECT_EQ(back.at("a.weight").shape, (Shape{2, 3}));
  EXPECT_EQ(back.at("a.weight").values[5], 6.5f);
  EXPECT_EQ(back.at("b").values[0], -0.25f);
  EXPECT_THROW(back.at("missing"), CheckpointError);
}

TEST(Checkpoint, RejectsGarbage) {
  auto path = std::filesystem::temp_directory_path() / "fewloc_ckpt_garbage.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "not a checkpoint";
  }
  EXPECT_THROW(read_checkpoint(path), CheckpointError);
  std::filesystem::remove(path);
}

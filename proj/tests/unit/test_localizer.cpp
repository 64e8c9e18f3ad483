#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "fewloc/diffcore/gradcheck.hpp"
#include "fewloc/diffcore/ops.hpp"
#include "fewloc/localizer/localizer.hpp"
#include "helpers.hpp"

using namespace fewloc::localizer;
using fewloc::diff::Tensor;
using fewloc::testing::random_tensor;
using fewloc::testing::random_values;

namespace {

// Exact overlap of the box with each map cell, as a fraction of cell area.
std::vector<double> overlap_oracle(const BoxAnnotation& b, double img_w, double img_h,
                                   std::size_t mw, std::size_t mh) {
  std::vector<double> out(mw * mh);
  const double cw = img_w / mw, ch = img_h / mh;
  for (std::size_t y = 0; y < mh; ++y)
    for (std::size_t x = 0; x < mw; ++x) {
      const double ox = std::max(0.0, std::min(b.x1 * 1.0, (x + 1) * cw) - std::max(b.x0 * 1.0, x * cw));
      const double oy = std::max(0.0, std::min(b.y1 * 1.0, (y + 1) * ch) - std::max(b.y0 * 1.0, y * ch));
      out[y * mw + x] = ox * oy / (cw * ch);
    }
  return out;
}

std::vector<std::vector<double>> random_coverages(std::size_t n, std::size_t cells,
                                                  std::mt19937_64& rng) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_values(cells, rng, 0.0, 1.0));
  return out;
}

// Per-pixel flat accumulation of weighted means.
FgBgVectors flat_oracle(std::span<const double> maps, std::size_t C,
                        const std::vector<std::vector<double>>& cov,
                        std::optional<std::size_t> skip = std::nullopt) {
  const std::size_t cells = cov.front().size();
  FgBgVectors v;
  v.foreground.assign(C, 0.0);
  v.background.assign(C, 0.0);
  for (std::size_t i = 0; i < cov.size(); ++i) {
    if (skip && *skip == i) continue;
    for (std::size_t p = 0; p < cells; ++p) {
      v.foreground_weight += cov[i][p];
      v.background_weight += 1 - cov[i][p];
      for (std::size_t c = 0; c < C; ++c) {
        const double e = maps[(i * C + c) * cells + p];
        v.foreground[c] += cov[i][p] * e;
        v.background[c] += (1 - cov[i][p]) * e;
      }
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    v.foreground[c] /= v.foreground_weight;
    v.background[c] /= v.background_weight;
  }
  return v;
}

void expect_vectors_near(const FgBgVectors& a, const FgBgVectors& b, double tol) {
  ASSERT_EQ(a.dim(), b.dim());
  for (std::size_t c = 0; c < a.dim(); ++c) {
    EXPECT_NEAR(a.foreground[c], b.foreground[c], tol * std::max(1.0, std::abs(b.foreground[c])));
    EXPECT_NEAR(a.background[c], b.background[c], tol * std::max(1.0, std::abs(b.background[c])));
  }
}

Tensor project(const Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> w(t.numel());
  for (auto& x : w) x = n(rng);
  return fewloc::diff::weighted_sum(t, w);
}

}  // namespace

TEST(RasterizeBox, FullImageCoversEverything) {
  auto cov = rasterize_box({0, 0, 0, 64, 64}, 64, 64, 8, 8);
  for (double v : cov) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(RasterizeBox, LeftHalfAndBisectedColumn) {
  auto cov = rasterize_box({0, 0, 0, 32, 64}, 64, 64, 8, 8);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) EXPECT_DOUBLE_EQ(cov[y * 8 + x], x < 4 ? 1.0 : 0.0);
  // 36 of 64 pixels on a 4-column map: the boundary cell is split down the middle
  auto half = rasterize_box({0, 0, 0, 40, 64}, 64, 64, 4, 4);
  for (std::size_t y = 0; y < 4; ++y) {
    EXPECT_DOUBLE_EQ(half[y * 4 + 1], 1.0);
    EXPECT_DOUBLE_EQ(half[y * 4 + 2], 0.5);
    EXPECT_DOUBLE_EQ(half[y * 4 + 3], 0.0);
  }
}

TEST(RasterizeBox, MatchesGeometricOverlap) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> coord(0, 64);
  for (int t = 0; t < 500; ++t) {
    int a = coord(rng), b = coord(rng), c = coord(rng), d = coord(rng);
    if (a == b || c == d) continue;
    BoxAnnotation box{0, std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)};
    auto got = rasterize_box(box, 64, 64, 8, 8);
    auto want = overlap_oracle(box, 64, 64, 8, 8);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
  }
}

TEST(RasterizeBox, MalformedBoxRejected) {
  EXPECT_THROW(rasterize_box({0, 5, 0, 5, 10}, 64, 64, 8, 8), BoxError);
  EXPECT_THROW(rasterize_box({0, 0, 0, 65, 10}, 64, 64, 8, 8), BoxError);
  EXPECT_THROW(rasterize_box({0, -1, 0, 5, 10}, 64, 64, 8, 8), BoxError);
  EXPECT_THROW(rasterize_box({0, 0, 0, 5, 10}, 64, 64, 5, 8), fewloc::diff::ShapeError);
}

TEST(RasterizeBox, FlipMirrorsCoverage) {
  BoxAnnotation box{0, 3, 10, 29, 50};
  auto cov = rasterize_box(box, 64, 64, 8, 8);
  auto flipped = rasterize_box(box.flipped(64), 64, 64, 8, 8);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) EXPECT_NEAR(cov[y * 8 + x], flipped[y * 8 + 7 - x], 1e-12);
}

TEST(FewshotVectors, FullBoxIsDegenerate) {
  std::mt19937_64 rng(2);
  auto map = random_values(3 * 4, rng);
  auto v = fewshot_vectors(map, 3, {std::vector<double>(4, 1.0)});
  EXPECT_TRUE(v.degenerate_background());
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0;
    for (std::size_t i = 0; i < 4; ++i) mean += map[c * 4 + i] / 4;
    EXPECT_NEAR(v.foreground[c], mean, 1e-12);
  }
}

TEST(FewshotVectors, TwoCells) {
  // channels-major map: cell 0 = (1,2), cell 1 = (5,-3)
  std::vector<double> map = {1, 5, 2, -3};
  auto v = fewshot_vectors(map, 2, {{1.0, 0.0}});
  EXPECT_EQ(v.foreground, (std::vector<double>{1, 2}));
  EXPECT_EQ(v.background, (std::vector<double>{5, -3}));
}

TEST(FewshotVectors, MatchesFlatAccumulation) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + t % 6, C = 5, cells = 16;
    auto maps = random_values(n * C * cells, rng, -3, 3);
    auto cov = random_coverages(n, cells, rng);
    expect_vectors_near(fewshot_vectors(maps, C, cov), flat_oracle(maps, C, cov), 1e-6);
  }
}

TEST(FoldedVectors, ExcludingFirstOfTwo) {
  std::mt19937_64 rng(4);
  auto maps = random_values(2 * 3 * 4, rng);
  auto cov = random_coverages(2, 4, rng);
  auto second = std::vector<double>(maps.begin() + 12, maps.end());
  expect_vectors_near(folded_fewshot_vectors(maps, 3, cov, 0),
                      fewshot_vectors(second, 3, {cov[1]}), 1e-9);
}

TEST(FoldedVectors, LeaveOneOutMatchesRecompute) {
  std::mt19937_64 rng(5);
  for (std::size_t n = 2; n <= 8; ++n) {
    const std::size_t C = 4, cells = 9;
    auto maps = random_values(n * C * cells, rng, -2, 2);
    auto cov = random_coverages(n, cells, rng);
    for (std::size_t skip = 0; skip < n; ++skip) {
      expect_vectors_near(folded_fewshot_vectors(maps, C, cov, skip),
                          flat_oracle(maps, C, cov, skip), 1e-6);
    }
  }
}

TEST(FoldedVectors, UnknownIdChangesNothing) {
  std::mt19937_64 rng(6);
  auto maps = random_values(3 * 2 * 4, rng);
  auto cov = random_coverages(3, 4, rng);
  expect_vectors_near(folded_fewshot_vectors(maps, 2, cov, 99), fewshot_vectors(maps, 2, cov),
                      1e-12);
}

TEST(FoldedVectors, SingleImageCannotFold) {
  std::vector<double> map(8, 0.0);
  EXPECT_THROW(folded_fewshot_vectors(map, 2, {std::vector<double>(4, 0.5)}, 0),
               LocalizerFoldError);
  VectorAccumulator acc(2, 4);
  acc.add(7, map, std::vector<double>(4, 0.5));
  EXPECT_THROW(acc.vectors_without(7), LocalizerFoldError);
}

TEST(PredictMask, EquidistantCellIsHalf) {
  FgBgVectors v{{1, 0}, {-1, 0}, 1, 1};
  std::vector<double> map = {0, 3};  // one cell at (0,3)
  EXPECT_DOUBLE_EQ(predict_mask(map, 2, v)[0], 0.5);
}

TEST(PredictMask, CellAtForeground) {
  FgBgVectors v{{1, 1}, {1, 11}, 1, 1};
  std::vector<double> map = {1, 1};
  EXPECT_GT(predict_mask(map, 2, v)[0], 0.99);
}

TEST(PredictMask, LabelSwapSymmetry) {
  std::mt19937_64 rng(7);
  const std::size_t C = 6, cells = 25;
  auto map = random_values(C * cells, rng);
  FgBgVectors v{random_values(C, rng), random_values(C, rng), 1, 1};
  FgBgVectors swapped{v.background, v.foreground, 1, 1};
  auto a = predict_mask(map, C, v), b = predict_mask(map, C, swapped);
  for (std::size_t i = 0; i < cells; ++i) {
    EXPECT_NEAR(a[i] + b[i], 1.0, 1e-12);
    EXPECT_GE(a[i], 0.0);
    EXPECT_LE(a[i], 1.0);
  }
}

TEST(PredictMask, InvariantUnderRigidMotion) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 20; ++t) {
    const std::size_t C = 5, cells = 12;
    auto map = random_values(C * cells, rng, -0.5, 0.5);
    FgBgVectors v{random_values(C, rng, -0.5, 0.5), random_values(C, rng, -0.5, 0.5), 1, 1};
    Eigen::MatrixXd R = Eigen::HouseholderQR<Eigen::MatrixXd>(
                            Eigen::MatrixXd::Random(C, C)).householderQ();
    Eigen::VectorXd shift = Eigen::VectorXd::Random(C) * 5.0;
    auto move = [&](const std::vector<double>& x) {
      Eigen::VectorXd y = R * Eigen::Map<const Eigen::VectorXd>(x.data(), C) + shift;
      return std::vector<double>(y.data(), y.data() + C);
    };
    std::vector<double> moved(map.size());
    for (std::size_t i = 0; i < cells; ++i) {
      std::vector<double> e(C);
      for (std::size_t c = 0; c < C; ++c) e[c] = map[c * cells + i];
      auto m = move(e);
      for (std::size_t c = 0; c < C; ++c) moved[c * cells + i] = m[c];
    }
    FgBgVectors mv{move(v.foreground), move(v.background), 1, 1};
    auto a = predict_mask(map, C, v), b = predict_mask(moved, C, mv);
    for (std::size_t i = 0; i < cells; ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
  }
}

TEST(PredictMask, TensorOpMatchesPlain) {
  std::mt19937_64 rng(9);
  Tensor maps = random_tensor({2, 3, 2, 2}, rng, false);
  Tensor vec = random_tensor({2, 3}, rng, false);
  Tensor m = predict_mask(maps, vec);
  FgBgVectors v{{vec.values().begin(), vec.values().begin() + 3},
                {vec.values().begin() + 3, vec.values().end()}, 1, 1};
  for (std::size_t b = 0; b < 2; ++b) {
    auto plain = predict_mask(maps.values().subspan(b * 12, 12), 3, v);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(m.values()[b * 4 + i], plain[i], 1e-12);
  }
}

TEST(FgBgPool, AllOnesMaskIsGlobalAverage) {
  std::mt19937_64 rng(10);
  Tensor maps = random_tensor({2, 4, 3, 3}, rng, false);
  Tensor gap = fewloc::diff::global_avgpool(maps);
  for (auto n : {PoolNormalization::MaskSum, PoolNormalization::CellCount}) {
    Tensor pooled = fg_bg_pool(maps, Tensor::full({2, 3, 3}, 1.0), n);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_NEAR(pooled.values()[b * 8 + c], gap.values()[b * 4 + c], 1e-15);
        EXPECT_EQ(pooled.values()[b * 8 + 4 + c], 0.0);
      }
  }
}

TEST(FgBgPool, HalfMaskSplitsEvenly) {
  std::mt19937_64 rng(11);
  Tensor maps = random_tensor({1, 3, 2, 4}, rng, false);
  Tensor pooled = fg_bg_pool(maps, Tensor::full({1, 2, 4}, 0.5), PoolNormalization::CellCount);
  Tensor gap = fewloc::diff::global_avgpool(maps);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(pooled.values()[c], pooled.values()[3 + c], 1e-15);
    EXPECT_NEAR(pooled.values()[c], 0.5 * gap.values()[c], 1e-15);
  }
}

TEST(FgBgPool, MatchesPerCellAccumulation) {
  std::mt19937_64 rng(12);
  Tensor maps = random_tensor({3, 5, 4, 4}, rng, false);
  Tensor mask = random_tensor({3, 4, 4}, rng, false, 0.0, 1.0);
  Tensor pooled = fg_bg_pool(maps, mask, PoolNormalization::CellCount);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 0; c < 5; ++c) {
      double f = 0, g = 0;
      for (std::size_t i = 0; i < 16; ++i) {
        const double e = maps.values()[(b * 5 + c) * 16 + i], m = mask.values()[b * 16 + i];
        f += e * m / 16;
        g += e * (1 - m) / 16;
      }
      EXPECT_NEAR(pooled.values()[b * 10 + c], f, 1e-6);
      EXPECT_NEAR(pooled.values()[b * 10 + 5 + c], g, 1e-6);
    }
}

TEST(FgBgPool, MaskSumIsWeightedAverage) {
  std::mt19937_64 rng(14);
  Tensor maps = random_tensor({3, 5, 4, 4}, rng, false);
  Tensor mask = random_tensor({3, 4, 4}, rng, false, 0.0, 1.0);
  Tensor pooled = fg_bg_pool(maps, mask, PoolNormalization::MaskSum);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 0; c < 5; ++c) {
      double f = 0, g = 0, wf = 0, wg = 0;
      for (std::size_t i = 0; i < 16; ++i) {
        const double e = maps.values()[(b * 5 + c) * 16 + i], m = mask.values()[b * 16 + i];
        f += e * m;
        g += e * (1 - m);
        wf += m;
        wg += 1 - m;
      }
      EXPECT_NEAR(pooled.values()[b * 10 + c], f / wf, 1e-6);
      EXPECT_NEAR(pooled.values()[b * 10 + 5 + c], g / wg, 1e-6);
    }
}

TEST(FgBgPool, MaskSumKeepsSmallObjectScale) {
  // One hot cell out of 16 holding value 3: the foreground average is 3
  // under MaskSum and 3/16 under CellCount.
  std::vector<double> x(16, 0.0), m(16, 0.0);
  x[5] = 3.0;
  m[5] = 1.0;
  Tensor maps({1, 1, 4, 4}, x), mask({1, 4, 4}, m);
  EXPECT_DOUBLE_EQ(fg_bg_pool(maps, mask, PoolNormalization::MaskSum).values()[0], 3.0);
  EXPECT_DOUBLE_EQ(fg_bg_pool(maps, mask, PoolNormalization::CellCount).values()[0], 3.0 / 16);
  // An empty foreground stays finite.
  Tensor empty = fg_bg_pool(maps, Tensor::full({1, 4, 4}, 0.0), PoolNormalization::MaskSum);
  EXPECT_EQ(empty.values()[0], 0.0);
  EXPECT_DOUBLE_EQ(empty.values()[1], 3.0 / 16);
}

TEST(FgBgPool, NormalizationNamesRoundTrip) {
  for (auto n : {PoolNormalization::MaskSum, PoolNormalization::CellCount})
    EXPECT_EQ(pool_normalization_from_name(pool_normalization_name(n)), n);
  EXPECT_THROW(pool_normalization_from_name("area"), std::invalid_argument);
}

TEST(LocalizerOps, TensorVectorsMatchAccumulator) {
  std::mt19937_64 rng(13);
  const std::size_t B = 5, C = 3, cells = 4;
  Tensor maps = random_tensor({B, C, 2, 2}, rng, false);
  auto cov = random_values(B * cells, rng, 0, 1);
  std::vector<bool> annotated = {true, false, true, true, false};
  Tensor plain = localizer_vectors(maps, cov, annotated);
  Tensor folded = folded_localizer_vectors(maps, cov, annotated);
  VectorAccumulator acc(C, cells);
  for (std::size_t b = 0; b < B; ++b) {
    if (annotated[b]) {
      acc.add(b, maps.values().subspan(b * C * cells, C * cells),
              std::span<const double>(cov).subspan(b * cells, cells));
    }
  }
  auto all = acc.vectors();
  for (std::size_t c = 0; c < C; ++c) {
    EXPECT_NEAR(plain.values()[c], all.foreground[c], 1e-12);
    EXPECT_NEAR(plain.values()[C + c], all.background[c], 1e-12);
  }
  for (std::size_t b = 0; b < B; ++b) {
    auto v = acc.vectors_without(b);
    for (std::size_t c = 0; c < C; ++c) {
      EXPECT_NEAR(folded.values()[b * 2 * C + c], v.foreground[c], 1e-12);
      EXPECT_NEAR(folded.values()[b * 2 * C + C + c], v.background[c], 1e-12);
    }
  }
}

TEST(LocalizerOps, DegenerateBackgroundSignalled) {
  Tensor maps = Tensor::full({2, 2, 2, 2}, 1.0);
  std::vector<double> cov(8, 1.0);
  EXPECT_THROW(localizer_vectors(maps, cov, {true, true}), DegenerateBackgroundError);
}

TEST(LocalizerOps, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(600 + seed);
    const std::size_t B = 4;
    auto cov = random_values(B * 6, rng, 0, 1);
    std::vector<bool> annotated = {true, false, true, seed % 2 == 0};
    std::vector<Tensor> in = {random_tensor({B, 3, 2, 3}, rng)};
    auto folded = fewloc::diff::grad_check(
        [&](std::span<const Tensor> t) {
          Tensor v = folded_localizer_vectors(t[0], cov, annotated);
          Tensor m = predict_mask(t[0], v);
          return project(fg_bg_pool(t[0], m, PoolNormalization::MaskSum), seed);
        },
        in);
    auto by_cells = fewloc::diff::grad_check(
        [&](std::span<const Tensor> t) {
          Tensor v = folded_localizer_vectors(t[0], cov, annotated);
          Tensor m = predict_mask(t[0], v);
          return project(fg_bg_pool(t[0], m, PoolNormalization::CellCount), seed);
        },
        in);
    auto shared = fewloc::diff::grad_check(
        [&](std::span<const Tensor> t) {
          Tensor v = localizer_vectors(t[0], cov, annotated);
          Tensor m = predict_mask(t[0], v);
          return project(apply_mask(t[0], m, seed % 2 == 1), seed);
        },
        in);
    EXPECT_TRUE(folded.passed()) << folded.summary();
    EXPECT_TRUE(by_cells.passed()) << by_cells.summary();
    EXPECT_TRUE(shared.passed()) << shared.summary();
  }
}

TEST(LocalizerOps, LearnedVectorGradient) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(700 + seed);
    LearnedVectors lv(3, seed);
    std::vector<Tensor> in = {random_tensor({2, 3, 2, 2}, rng, true, -0.5, 0.5), lv.tensor()};
    auto report = fewloc::diff::grad_check(
        [&](std::span<const Tensor> t) { return project(predict_mask(t[0], t[1]), seed); }, in);
    EXPECT_TRUE(report.passed()) << report.summary();
  }
}

TEST(LearnedVectors, ExactlyTwoTimesChannels) {
  LearnedVectors lv(32, 1);
  EXPECT_EQ(lv.tensor().numel(), 64u);
  EXPECT_TRUE(lv.tensor().requires_grad());
}

TEST(MaskExport, GraymapLinearMapping) {
  auto path = std::filesystem::temp_directory_path() / "fewloc_mask.pgm";
  write_mask_pgm(path, std::vector<double>{0.0, 0.5, 1.0, 0.25}, 2, 2, 3);
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  std::size_t w, h, maxv;
  in >> magic >> w >> h >> maxv;
  in.get();
  std::vector<unsigned char> px(w * h);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  std::filesystem::remove(path);
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(w, 6u);
  EXPECT_EQ(h, 6u);
  EXPECT_EQ(maxv, 255u);
  EXPECT_EQ(px[0], 0);
  EXPECT_EQ(px[3], 128);
  EXPECT_EQ(px[5 * 6], 255);
  EXPECT_EQ(px[5 * 6 + 5], 64);
}

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fewloc/common/log.hpp"
#include "fewloc/diffcore/gradcheck.hpp"
#include "fewloc/protonet/learner.hpp"
#include "helpers.hpp"

using fewloc::diff::BatchNormMode;
using fewloc::diff::Tensor;
using fewloc::protonet::EpisodeBatch;
using fewloc::protonet::EpisodeMode;
using fewloc::protonet::ExtractorConfig;
using fewloc::protonet::Learner;
using fewloc::protonet::Localization;
using fewloc::protonet::ModelFlags;
using fewloc::testing::random_tensor;
using fewloc::testing::random_values;

namespace {

const ExtractorConfig kTiny{2, 4, 8, true};

EpisodeBatch random_episode(std::size_t classes, std::size_t per_class, std::uint64_t seed,
                            const ExtractorConfig& cfg = kTiny) {
  std::mt19937_64 rng(seed);
  EpisodeBatch b;
  const std::size_t n = classes * per_class;
  b.images = random_tensor({n, 3, cfg.resolution, cfg.resolution}, rng, false);
  b.classes = classes;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) b.labels.push_back(static_cast<int>(c));
  }
  const std::size_t cells = cfg.map_extent() * cfg.map_extent();
  b.coverage = random_values(n * cells, rng, 0.0, 1.0);
  b.annotated.assign(n, false);
  for (std::size_t i = 0; i < n; i += 2) b.annotated[i] = true;
  return b;
}

std::vector<Tensor> parameter_tensors(const Learner& l) {
  std::vector<Tensor> out;
  for (const auto& p : l.parameters()) out.push_back(p.tensor);
  return out;
}

}  // namespace

TEST(ModelFlags, CodesAndLabels) {
  ModelFlags f{true, Localization::FewShot, true};
  EXPECT_EQ(f.code(), "111");
  EXPECT_EQ(f.label(), "PN+BF+fsL+CP");
  EXPECT_EQ(ModelFlags::from_code("020").label(), "PN+usL");
  EXPECT_EQ(ModelFlags::from_code(f.code()), f);
  EXPECT_THROW(ModelFlags::from_code("131"), std::invalid_argument);
  EXPECT_THROW(ModelFlags::from_code("11"), std::invalid_argument);
}

TEST(Learner, FeatureDimensions) {
  const std::size_t c = kTiny.channels;
  EXPECT_EQ(Learner(kTiny, ModelFlags::from_code("000"), 1).feature_dim(), c);
  EXPECT_EQ(Learner(kTiny, ModelFlags::from_code("110"), 1).feature_dim(), 2 * c);
  EXPECT_EQ(Learner(kTiny, ModelFlags::from_code("020"), 1).feature_dim(), 2 * c);
  EXPECT_EQ(Learner(kTiny, ModelFlags::from_code("001"), 1).feature_dim(), c * c);
  EXPECT_EQ(Learner(kTiny, ModelFlags::from_code("111"), 1).feature_dim(), c * c);
}

TEST(Learner, ParameterCensus) {
  const auto cfg = ExtractorConfig::desk_scale();
  const std::size_t base = Learner(cfg, ModelFlags::from_code("000"), 1).parameter_count();
  for (const char* code : {"100", "010", "001", "111", "011"}) {
    EXPECT_EQ(Learner(cfg, ModelFlags::from_code(code), 1).parameter_count(), base) << code;
  }
  for (const char* code : {"020", "120", "121"}) {
    EXPECT_EQ(Learner(cfg, ModelFlags::from_code(code), 1).parameter_count(), base + 2 * cfg.channels)
        << code;
  }
}

TEST(Learner, EmbeddingShapes) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({3, 3, 8, 8}, rng, false);
  for (const char* code : {"000", "020", "001", "021"}) {
    Learner l(kTiny, ModelFlags::from_code(code), 2);
    Tensor maps = l.feature_maps(x, BatchNormMode::Train);
    Tensor e = l.pool(maps, l.mask(maps, nullptr));
    EXPECT_EQ(e.shape(), (fewloc::diff::Shape{3, l.feature_dim()})) << code;
  }
}

TEST(Learner, FewShotMaskNeedsVectors) {
  Learner l(kTiny, ModelFlags::from_code("010"), 2);
  std::mt19937_64 rng(3);
  Tensor maps = l.feature_maps(random_tensor({2, 3, 8, 8}, rng, false), BatchNormMode::Train);
  EXPECT_THROW(l.mask(maps, nullptr), std::invalid_argument);
}

class LearnerGradCheck : public ::testing::TestWithParam<const char*> {};

TEST_P(LearnerGradCheck, EpisodeLossMatchesFiniteDifferences) {
  const auto flags = ModelFlags::from_code(GetParam());
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Learner l(kTiny, flags, seed);
    const auto batch = random_episode(3, 3, 100 + seed);
    const auto mode = flags.batch_folding ? EpisodeMode::Folded : EpisodeMode::Split;
    auto fn = [&](std::span<const Tensor>) { return l.episode_loss(batch, mode, 1); };
    auto report = fewloc::diff::grad_check(fn, parameter_tensors(l), {1e-4, 1e-6});
    EXPECT_TRUE(report.passed()) << GetParam() << " seed " << seed << ": " << report.summary();
  }
}

INSTANTIATE_TEST_SUITE_P(Variants, LearnerGradCheck,
                         ::testing::Values("000", "100", "110", "111", "120", "010"));

TEST(Learner, SplitEqualsFoldedForIdenticalPairs) {
  std::mt19937_64 rng(9);
  const std::size_t classes = 3, img = 3 * 8 * 8;
  std::vector<double> pixels;
  for (std::size_t c = 0; c < classes; ++c) {
    auto one = random_values(img, rng);
    pixels.insert(pixels.end(), one.begin(), one.end());
    pixels.insert(pixels.end(), one.begin(), one.end());
  }
  EpisodeBatch b;
  b.images = Tensor({2 * classes, 3, 8, 8}, pixels);
  b.labels = {0, 0, 1, 1, 2, 2};
  b.classes = classes;
  Learner l(kTiny, ModelFlags::from_code("000"), 4);
  const double split = l.episode_loss(b, EpisodeMode::Split).item();
  const double folded = l.episode_loss(b, EpisodeMode::Folded).item();
  EXPECT_NEAR(split, folded, 1e-10);
}

TEST(Learner, SeparableEpisodeBeatsChance) {
  // Identical images within a class put the folded centroid on the embedding.
  std::mt19937_64 rng(10);
  const std::size_t img = 3 * 8 * 8;
  auto a = random_values(img, rng), c = random_values(img, rng);
  std::vector<double> pixels;
  for (const auto* src : {&a, &a, &a, &c, &c, &c}) pixels.insert(pixels.end(), src->begin(), src->end());
  EpisodeBatch b;
  b.images = Tensor({6, 3, 8, 8}, pixels);
  b.labels = {0, 0, 0, 1, 1, 1};
  b.classes = 2;
  Learner l(kTiny, ModelFlags::from_code("100"), 5);
  EXPECT_LT(l.episode_loss(b, EpisodeMode::Folded).item(), std::log(2.0));
}

TEST(Learner, SplitModeRejectsEpisodesWithoutQueries) {
  Learner l(kTiny, ModelFlags::from_code("000"), 1);
  auto b = random_episode(2, 2, 7);
  EXPECT_THROW(l.episode_loss(b, EpisodeMode::Split, 2), std::invalid_argument);
  EXPECT_THROW(l.episode_loss(b, EpisodeMode::Split, 0), std::invalid_argument);
}

TEST(Learner, DegenerateBackgroundFallsBackToUniformMask) {
  Learner l(kTiny, ModelFlags::from_code("110"), 1);
  auto b = random_episode(2, 3, 8);
  std::fill(b.coverage.begin(), b.coverage.end(), 1.0);
  std::size_t warnings = 0;
  auto previous = fewloc::set_warning_sink([&](std::string_view) { ++warnings; });
  const double loss = l.episode_loss(b, EpisodeMode::Folded).item();
  fewloc::set_warning_sink(previous);
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_EQ(warnings, 1u);
}

TEST(Learner, CheckpointRoundTrip) {
  Learner l(kTiny, ModelFlags::from_code("121"), 6);
  l.normalization().mean = {0.1, 0.2, 0.3};
  l.normalization().std = {1.5, 2.0, 2.5};
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({4, 3, 8, 8}, rng, false);
  l.feature_maps(x, BatchNormMode::Train);

  fewloc::diff::Checkpoint ck;
  l.save(ck);
  Learner r = Learner::from_checkpoint(ck);
  EXPECT_EQ(r.flags(), l.flags());
  EXPECT_EQ(r.normalization().std[2], 2.5);
  fewloc::diff::Checkpoint again;
  r.save(again);
  ASSERT_EQ(again.entries.size(), ck.entries.size());
  for (std::size_t i = 0; i < ck.entries.size(); ++i) {
    EXPECT_EQ(again.entries[i].name, ck.entries[i].name);
    EXPECT_EQ(again.entries[i].values, ck.entries[i].values);
  }
  Tensor a = r.pool(r.feature_maps(x, BatchNormMode::Eval), r.mask(r.feature_maps(x, BatchNormMode::Eval), nullptr));
  Tensor b = l.pool(l.feature_maps(x, BatchNormMode::Eval), l.mask(l.feature_maps(x, BatchNormMode::Eval), nullptr));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-4);

  Learner other(kTiny, ModelFlags::from_code("000"), 6);
  EXPECT_THROW(other.load(ck), fewloc::diff::CheckpointError);

  // The pooling normalization is part of the model.
  Learner cells(kTiny, ModelFlags::from_code("110"), 6, fewloc::localizer::PoolNormalization::CellCount);
  fewloc::diff::Checkpoint cells_ck;
  cells.save(cells_ck);
  EXPECT_EQ(Learner::from_checkpoint(cells_ck).fg_pooling(), fewloc::localizer::PoolNormalization::CellCount);
  Learner masks(kTiny, ModelFlags::from_code("110"), 6);
  EXPECT_THROW(masks.load(cells_ck), fewloc::diff::CheckpointError);
}

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "fewloc/harness/metrics.hpp"
#include "fewloc/localizer/localizer.hpp"
#include "fewloc/protonet/learner.hpp"
#include "fewloc/protonet/prototypes.hpp"
#include "fewloc/synthdata/synthdata.hpp"

namespace fewloc::harness {

struct EvalOptions {
  /// Images pushed through the extractor at once.
  std::size_t chunk = 64;
  std::size_t top_k = 5;
  bool single_precision = true;
};

/// Eval-mode feature maps by image id. Maps do not depend on the trial, so
/// one cache serves every trial of a model.
class FeatureCache {
 public:
  bool contains(std::size_t image_id) const { return maps_.count(image_id) > 0; }
  std::span<const double> at(std::size_t image_id) const { return maps_.at(image_id); }
  void put(std::size_t image_id, std::vector<double> map) { maps_[image_id] = std::move(map); }
  std::size_t size() const { return maps_.size(); }

 private:
  std::unordered_map<std::size_t, std::vector<double>> maps_;
};

struct TrialPrototypes {
  protonet::PrototypeSet prototypes;
  /// Few-shot vectors of the trial's annotated references.
  std::optional<localizer::FgBgVectors> localizer;
};

/// Eval-mode feature maps [B,C,h,w] of the given images, computed in chunks.
diff::Tensor feature_maps(protonet::Learner& learner, const synth::Dataset& dataset,
                          std::span<const std::size_t> image_ids, const EvalOptions& options,
                          FeatureCache* cache = nullptr);

/// Embeddings [B*D] of the given images under the model's pooling, masked
/// with `vectors` for few-shot localization.
std::vector<double> embed(protonet::Learner& learner, const synth::Dataset& dataset,
                          std::span<const std::size_t> image_ids,
                          const localizer::FgBgVectors* vectors, const EvalOptions& options,
                          FeatureCache* cache = nullptr);

/// Streams the reference images of the evaluation classes through the model
/// and averages their embeddings per class. Few-shot models first build
/// their vectors from the boxes of `trial`'s annotated subset.
TrialPrototypes reference_pass(protonet::Learner& learner, const synth::Dataset& dataset,
                               const synth::BenchmarkSplit& split, std::size_t trial,
                               const EvalOptions& options, FeatureCache* cache = nullptr);

/// Ranks every query image against the prototypes; a one-trial report.
/// Throws synth::ConfigError when top-k exceeds the number of classes.
MetricsReport query_pass(protonet::Learner& learner, const synth::Dataset& dataset,
                         const synth::BenchmarkSplit& split, const TrialPrototypes& prototypes,
                         const EvalOptions& options, FeatureCache* cache = nullptr);

/// Reference then query pass for every trial of the split, combined. Models
/// without few-shot localization do not depend on the annotated subset, so
/// their single evaluation is repeated for each trial.
MetricsReport run_trials(protonet::Learner& learner, const synth::Dataset& dataset,
                         const synth::BenchmarkSplit& split, const EvalOptions& options = {});

/// Mean predicted foreground probability inside and outside the ground-truth
/// boxes of the query images, each cell weighted by its box coverage.
struct MaskContrast {
  double inside = 0.0;
  double outside = 0.0;
  std::size_t images = 0;
  double gap() const { return inside - outside; }
};

/// Throws std::invalid_argument for a model without localization.
MaskContrast mask_contrast(protonet::Learner& learner, const synth::Dataset& dataset,
                           const synth::BenchmarkSplit& split, std::size_t trial,
                           const EvalOptions& options = {});

/// One-trial report from per-query class scores, higher is better.
/// scores is row-major [queries x classes] against `class_ids`.
MetricsReport report_from_scores(std::span<const std::size_t> query_ids,
                                 std::span<const double> scores, const std::vector<int>& class_ids,
                                 const synth::Dataset& dataset, std::size_t top_k);

}  // namespace fewloc::harness

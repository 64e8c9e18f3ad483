#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fewloc/diffcore/checkpoint.hpp"
#include "fewloc/localizer/localizer.hpp"
#include "fewloc/protonet/extractor.hpp"

namespace fewloc::protonet {

enum class Localization { None, FewShot, Unsupervised };

/// The three ablation axes. code() gives the digits for batch folding,
/// localization (0 none, 1 few-shot, 2 unsupervised) and covariance pooling.
struct ModelFlags {
  bool batch_folding = false;
  Localization localization = Localization::None;
  bool covariance_pooling = false;

  std::string code() const;
  std::string label() const;
  static ModelFlags from_code(const std::string& code);
  bool localizing() const { return localization != Localization::None; }
  bool operator==(const ModelFlags&) const = default;
};

/// Per-channel colour statistics used to unit-normalize inputs.
struct InputNormalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
};

/// One training episode: n classes x p images, class-major.
struct EpisodeBatch {
  diff::Tensor images;          // [B,3,H,W], already normalized
  std::vector<int> labels;      // local class index in [0, classes)
  std::size_t classes = 0;
  /// Box coverage per map cell, [B*h*w]; only rows with `annotated` set are read.
  std::vector<double> coverage;
  std::vector<bool> annotated;
};

enum class EpisodeMode { Folded, Split };

class Learner {
 public:
  Learner(ExtractorConfig config, ModelFlags flags, std::uint64_t seed,
          localizer::PoolNormalization fg_pooling = localizer::PoolNormalization::MaskSum);

  const ModelFlags& flags() const { return flags_; }
  localizer::PoolNormalization fg_pooling() const { return fg_pooling_; }
  const ExtractorConfig& extractor_config() const { return extractor_.config(); }
  Extractor& extractor() { return extractor_; }
  InputNormalization& normalization() { return normalization_; }
  const InputNormalization& normalization() const { return normalization_; }

  std::size_t feature_dim() const;
  std::size_t channels() const { return extractor_.config().channels; }
  std::size_t map_extent() const { return extractor_.config().map_extent(); }

  diff::Tensor feature_maps(const diff::Tensor& images, diff::BatchNormMode mode);

  /// Soft mask [B,h,w] under the model's localizer, or an undefined tensor
  /// for non-localizing models. Few-shot models need `fewshot`.
  diff::Tensor mask(const diff::Tensor& maps, const localizer::FgBgVectors* fewshot) const;

  /// Pooled embedding [B, feature_dim()] of maps under an optional mask.
  diff::Tensor pool(const diff::Tensor& maps, const diff::Tensor& mask) const;

  /// Mean query cross-entropy of one episode. Split mode uses the first
  /// `references_per_class` images of each class as references (default
  /// half of p) and the rest as queries. Eval mode leaves the batchnorm
  /// running statistics untouched, for held-out losses.
  diff::Tensor episode_loss(const EpisodeBatch& batch, EpisodeMode mode,
                            std::optional<std::size_t> references_per_class = std::nullopt,
                            diff::BatchNormMode bn = diff::BatchNormMode::Train);

  /// Trainable parameters: the extractor plus the learned localizer vectors
  /// for unsupervised localization.
  std::vector<diff::NamedParameter> parameters() const;
  std::size_t parameter_count() const;

  /// Current unsupervised localizer vectors; throws for other models.
  localizer::FgBgVectors learned_vectors() const;

  void save(diff::Checkpoint& checkpoint) const;
  void load(const diff::Checkpoint& checkpoint);
  /// Model rebuilt from a checkpoint written by save().
  static Learner from_checkpoint(const diff::Checkpoint& checkpoint);

 private:
  diff::Tensor localized_mask(const EpisodeBatch& batch, const diff::Tensor& maps, bool folded) const;

  ModelFlags flags_;
  localizer::PoolNormalization fg_pooling_;
  Extractor extractor_;
  std::optional<localizer::LearnedVectors> learned_;
  InputNormalization normalization_;
};

}  // namespace fewloc::protonet

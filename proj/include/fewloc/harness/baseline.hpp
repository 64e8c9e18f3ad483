#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fewloc/harness/evaluate.hpp"
#include "fewloc/harness/metrics.hpp"
#include "fewloc/harness/train.hpp"
#include "fewloc/protonet/extractor.hpp"
#include "fewloc/synthdata/synthdata.hpp"

namespace fewloc::harness {

enum class Reweight { None, InverseFrequency };
enum class BaselineScope { Scratch, Transfer };

struct SoftmaxOptions {
  Reweight reweight = Reweight::InverseFrequency;
  BaselineScope scope = BaselineScope::Scratch;
  std::size_t batch_size = 128;
  std::size_t epochs = 5;
  std::size_t passes_per_epoch = 10;
  double initial_learning_rate = 1e-3;
  bool flip = true;
  bool single_precision = true;
  std::uint64_t seed = 1;
};

/// w_k proportional to 1/size_k, scaled so the weights average to 1.
std::vector<double> inverse_frequency_weights(std::span<const std::size_t> class_sizes);

/// Extractor, global average pooling and a linear head.
class SoftmaxModel {
 public:
  SoftmaxModel(protonet::ExtractorConfig config, std::size_t classes, std::uint64_t seed);

  protonet::Extractor& extractor() { return extractor_; }
  const protonet::Extractor& extractor() const { return extractor_; }
  protonet::InputNormalization& normalization() { return normalization_; }
  const protonet::InputNormalization& normalization() const { return normalization_; }
  std::size_t classes() const { return head_bias_.numel(); }

  /// Replaces the head with a fresh one over `classes` outputs.
  void reset_head(std::size_t classes, std::uint64_t seed);

  diff::Tensor features(const diff::Tensor& images, diff::BatchNormMode mode);
  diff::Tensor head(const diff::Tensor& features) const;

  std::vector<diff::NamedParameter> parameters(bool include_extractor) const;

 private:
  protonet::Extractor extractor_;
  diff::Tensor head_weight_, head_bias_;
  protonet::InputNormalization normalization_;
};

/// Class-weighted cross-entropy training on the given images; labels index
/// the head outputs. With `freeze_extractor` only the head moves: features
/// are computed once in eval mode and the extractor is left untouched.
TrainingResult train_softmax(SoftmaxModel& model, const synth::Dataset& dataset,
                             std::span<const std::size_t> image_ids, std::span<const int> labels,
                             const SoftmaxOptions& options, bool freeze_extractor);

/// Top-k report of the head over the query images of the split, with the
/// head outputs standing for the evaluation classes in order.
MetricsReport evaluate_softmax(SoftmaxModel& model, const synth::Dataset& dataset,
                               const synth::BenchmarkSplit& split, const EvalOptions& options);

/// Scratch: extractor and head trained on the reference images only.
/// Transfer: extractor and head pre-trained on the representation set, then
/// a new head trained on the references with the extractor frozen.
MetricsReport baseline_softmax(const synth::Dataset& dataset, const synth::BenchmarkSplit& split,
                               const protonet::ExtractorConfig& config,
                               const SoftmaxOptions& options, const EvalOptions& eval = {});

}  // namespace fewloc::harness

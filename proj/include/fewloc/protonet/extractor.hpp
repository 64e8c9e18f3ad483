#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fewloc/diffcore/adam.hpp"
#include "fewloc/diffcore/checkpoint.hpp"
#include "fewloc/diffcore/ops.hpp"

namespace fewloc::protonet {

struct ExtractorConfig {
  std::size_t stages = 3;
  std::size_t channels = 32;
  std::size_t resolution = 64;
  bool final_batchnorm = true;

  /// CPU-tractable default: 64x64 input, 8x8x32 map.
  static ExtractorConfig desk_scale() { return {}; }
  /// Four 64-channel stages on 160x160 input, 10x10x64 map.
  static ExtractorConfig full_scale() { return {4, 64, 160, true}; }

  std::size_t map_extent() const;
  /// Throws std::invalid_argument when the resolution is not divisible by 2^stages.
  void validate() const;
};

/// Stacked 3x3 conv stages. Each stage is conv -> batchnorm -> relu -> 2x2
/// maxpool; with `final_batchnorm` the last stage is conv -> maxpool followed
/// by a closing batchnorm, so the map fed to pooling is normalized but not
/// rectified.
class Extractor {
 public:
  Extractor(ExtractorConfig config, std::uint64_t seed);

  const ExtractorConfig& config() const { return config_; }

  /// images [B,3,H,W] -> feature maps [B,C,h,w]. Train mode updates the
  /// batchnorm running statistics.
  diff::Tensor forward(const diff::Tensor& images, diff::BatchNormMode mode);

  std::vector<diff::NamedParameter> parameters() const;
  std::size_t parameter_count() const;

  void save(diff::Checkpoint& checkpoint, const std::string& prefix) const;
  void load(const diff::Checkpoint& checkpoint, const std::string& prefix);

 private:
  struct Stage {
    diff::Tensor weight, bias, gamma, beta;
    diff::BatchNormStats stats;
    bool has_batchnorm = true;
  };

  ExtractorConfig config_;
  std::vector<Stage> stages_;
  diff::Tensor final_gamma_, final_beta_;
  diff::BatchNormStats final_stats_;
};

}  // namespace fewloc::protonet

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fewloc/diffcore/tensor.hpp"
#include "fewloc/protonet/learner.hpp"
#include "fewloc/synthdata/synthdata.hpp"

namespace fewloc::harness {

/// Per-channel mean and standard deviation of the given images.
protonet::InputNormalization channel_statistics(const synth::Dataset& dataset,
                                                std::span<const std::size_t> image_ids);

/// Normalized [B,3,H,W] tensor of the given images. `flips`, when not empty,
/// mirrors image i horizontally where flips[i] is set.
diff::Tensor image_tensor(const synth::Dataset& dataset, std::span<const std::size_t> image_ids,
                          const protonet::InputNormalization& normalization,
                          const std::vector<bool>& flips = {});

/// Box coverage of every map cell for each image, concatenated [B*h*w];
/// boxes are mirrored along with flipped images.
std::vector<double> box_coverage(const synth::Dataset& dataset,
                                 std::span<const std::size_t> image_ids, std::size_t map_extent,
                                 const std::vector<bool>& flips = {});

/// Throws synth::ConfigError when the dataset images do not match the
/// extractor input resolution.
void check_resolution(const synth::Dataset& dataset, const protonet::ExtractorConfig& config);

/// Image ids grouped by class for the classes listed, in that order, keeping
/// only images whose role is `role`.
std::vector<std::vector<std::size_t>> pools_by_class(const synth::Dataset& dataset,
                                                     const synth::BenchmarkSplit& split,
                                                     const std::vector<int>& class_ids,
                                                     synth::Role role);

}  // namespace fewloc::harness

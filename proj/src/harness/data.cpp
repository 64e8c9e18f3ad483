#include "fewloc/harness/data.hpp"

#include <cmath>
#include <unordered_map>

namespace fewloc::harness {

protonet::InputNormalization channel_statistics(const synth::Dataset& dataset,
                                                std::span<const std::size_t> image_ids) {
  protonet::InputNormalization out;
  std::array<double, 3> sum{}, sum_sq{};
  double count = 0.0;
  for (std::size_t id : image_ids) {
    const auto& im = dataset.images.at(id);
    for (std::size_t i = 0; i < im.width * im.height; ++i) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = im.pixels[i * 3 + c] / 255.0;
        sum[c] += v;
        sum_sq[c] += v * v;
      }
    }
    count += static_cast<double>(im.width * im.height);
  }
  if (count == 0.0) return out;
  for (std::size_t c = 0; c < 3; ++c) {
    out.mean[c] = sum[c] / count;
    const double var = std::max(0.0, sum_sq[c] / count - out.mean[c] * out.mean[c]);
    out.std[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return out;
}

diff::Tensor image_tensor(const synth::Dataset& dataset, std::span<const std::size_t> image_ids,
                          const protonet::InputNormalization& normalization,
                          const std::vector<bool>& flips) {
  const std::size_t side = dataset.config.image_size;
  const std::size_t plane = side * side;
  std::vector<double> values(image_ids.size() * 3 * plane);
  for (std::size_t b = 0; b < image_ids.size(); ++b) {
    const auto& im = dataset.images.at(image_ids[b]);
    if (im.width != side || im.height != side) {
      throw synth::ConfigError("image " + std::to_string(image_ids[b]) + " is not " +
                               std::to_string(side) + " pixels square");
    }
    const bool flip = !flips.empty() && flips[b];
    double* out = values.data() + b * 3 * plane;
    for (std::size_t c = 0; c < 3; ++c) {
      const double mu = normalization.mean[c];
      const double inv = 1.0 / normalization.std[c];
      for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
          const std::size_t sx = flip ? side - 1 - x : x;
          out[c * plane + y * side + x] = (im.pixels[(y * side + sx) * 3 + c] / 255.0 - mu) * inv;
        }
      }
    }
  }
  return diff::Tensor({image_ids.size(), 3, side, side}, std::move(values));
}

std::vector<double> box_coverage(const synth::Dataset& dataset,
                                 std::span<const std::size_t> image_ids, std::size_t map_extent,
                                 const std::vector<bool>& flips) {
  std::vector<double> out;
  out.reserve(image_ids.size() * map_extent * map_extent);
  for (std::size_t b = 0; b < image_ids.size(); ++b) {
    const auto& im = dataset.images.at(image_ids[b]);
    const auto box = (!flips.empty() && flips[b]) ? im.box.flipped(im.width) : im.box;
    const auto cov = localizer::rasterize_box(box, im.width, im.height, map_extent, map_extent);
    out.insert(out.end(), cov.begin(), cov.end());
  }
  return out;
}

void check_resolution(const synth::Dataset& dataset, const protonet::ExtractorConfig& config) {
  if (dataset.config.image_size != config.resolution) {
    throw synth::ConfigError("dataset images are " + std::to_string(dataset.config.image_size) +
                             " pixels but the extractor expects " +
                             std::to_string(config.resolution));
  }
}

std::vector<std::vector<std::size_t>> pools_by_class(const synth::Dataset& dataset,
                                                     const synth::BenchmarkSplit& split,
                                                     const std::vector<int>& class_ids,
                                                     synth::Role role) {
  std::unordered_map<int, std::size_t> slot;
  for (std::size_t k = 0; k < class_ids.size(); ++k) slot[class_ids[k]] = k;
  std::vector<std::vector<std::size_t>> out(class_ids.size());
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    if (split.roles.at(i) != role) continue;
    auto it = slot.find(dataset.images[i].class_id);
    if (it != slot.end()) out[it->second].push_back(i);
  }
  return out;
}

}  // namespace fewloc::harness

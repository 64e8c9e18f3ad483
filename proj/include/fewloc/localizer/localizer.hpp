#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fewloc/diffcore/tensor.hpp"

namespace fewloc::localizer {

/// Pixel box, inclusive-exclusive: columns [x0,x1), rows [y0,y1).
struct BoxAnnotation {
  std::size_t image_id = 0;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double area() const { return static_cast<double>(x1 - x0) * static_cast<double>(y1 - y0); }
  /// Throws BoxError unless 0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height.
  void validate(std::size_t width, std::size_t height) const;
  /// Mirror image across the vertical axis of a `width`-wide image.
  BoxAnnotation flipped(std::size_t width) const;
};

class BoxError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Every annotated box covers its whole image, so no background evidence exists.
class DegenerateBackgroundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Folding out an image left no annotated image behind.
class LocalizerFoldError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Fraction of each map cell covered by the box. The pixel mask is 4x4
/// average-pooled, then area-averaged down to map_h x map_w. Row-major [h*w].
std::vector<double> rasterize_box(const BoxAnnotation& box, std::size_t image_width,
                                  std::size_t image_height, std::size_t map_width,
                                  std::size_t map_height);

struct FgBgVectors {
  std::vector<double> foreground;
  std::vector<double> background;
  double foreground_weight = 0.0;
  double background_weight = 0.0;

  std::size_t dim() const { return foreground.size(); }
  bool degenerate_background() const { return background_weight <= 0.0; }
};

/// Running weighted sums over annotated maps. A map is one image's [C,h,w]
/// block; coverage is its [h*w] box rasterization.
class VectorAccumulator {
 public:
  VectorAccumulator(std::size_t channels, std::size_t cells);

  void add(std::size_t image_id, std::span<const double> map, std::span<const double> coverage);
  std::size_t images() const { return contributions_.size(); }

  /// Weighted means over everything added. Background is left zero when its
  /// weight vanishes; check degenerate_background().
  FgBgVectors vectors() const;
  /// Same as vectors() over all images but `image_id`, by subtracting that
  /// image's sums from the totals. Ids never added change nothing.
  FgBgVectors vectors_without(std::size_t image_id) const;

 private:
  struct Sums {
    std::vector<double> fg, bg;
    double fg_weight = 0.0, bg_weight = 0.0;
  };
  FgBgVectors finish(const Sums& s) const;

  std::size_t channels_, cells_;
  Sums total_;
  std::vector<std::pair<std::size_t, Sums>> contributions_;
};

/// maps: consecutive [C,h,w] blocks, one per coverage entry.
/// Throws std::invalid_argument with no images.
FgBgVectors fewshot_vectors(std::span<const double> maps, std::size_t channels,
                            const std::vector<std::vector<double>>& coverages);

/// fewshot_vectors over every image but `exclude`. Images are numbered by
/// their position. Throws LocalizerFoldError if nothing would remain.
FgBgVectors folded_fewshot_vectors(std::span<const double> maps, std::size_t channels,
                                   const std::vector<std::vector<double>>& coverages,
                                   std::size_t exclude);

/// Per-cell foreground probability for a single map under fixed vectors.
std::vector<double> predict_mask(std::span<const double> map, std::size_t channels,
                                 const FgBgVectors& vectors);

// ---------------------------------------------------------------------------
// Differentiable operations. Maps are [B,C,h,w].

/// Few-shot vectors from the annotated images of a batch, [2,C] with the
/// foreground row first. coverage is [B*h*w]; rows of unannotated images are
/// ignored. Throws DegenerateBackgroundError when background weight is zero.
diff::Tensor localizer_vectors(const diff::Tensor& maps, std::span<const double> coverage,
                               const std::vector<bool>& annotated);

/// Per-image vectors [B,2,C]: image b sees the annotated totals with its own
/// contribution folded out when it is annotated.
diff::Tensor folded_localizer_vectors(const diff::Tensor& maps, std::span<const double> coverage,
                                      const std::vector<bool>& annotated);

/// Soft mask [B,h,w]: sigmoid(||e-bg||^2 - ||e-fg||^2) per cell, the
/// foreground component of the two-way softmax over negative squared distance.
/// vectors is [2,C] shared by the batch or [B,2,C] per image.
diff::Tensor predict_mask(const diff::Tensor& maps, const diff::Tensor& vectors);

/// maps * mask (or maps * (1 - mask) when `inverse`), mask broadcast over channels.
diff::Tensor apply_mask(const diff::Tensor& maps, const diff::Tensor& mask, bool inverse);

/// How the foreground and background sums are turned into averages.
/// MaskSum divides each by its own mask weight (sum of m, sum of 1 - m), so
/// a small object keeps the scale of a large one. CellCount divides both by
/// h*w, so the two halves add up to the global average.
enum class PoolNormalization { MaskSum, CellCount };

/// Smallest mask weight a MaskSum average divides by.
inline constexpr double kMinPoolWeight = 1e-6;

std::string pool_normalization_name(PoolNormalization n);
PoolNormalization pool_normalization_from_name(const std::string& name);

/// Foreground and background average pools concatenated foreground first:
/// [B,2C].
diff::Tensor fg_bg_pool(const diff::Tensor& maps, const diff::Tensor& mask,
                        PoolNormalization normalization = PoolNormalization::MaskSum);

/// Learned foreground/background pair for the unsupervised localizer.
class LearnedVectors {
 public:
  LearnedVectors(std::size_t channels, std::uint64_t seed);
  const diff::Tensor& tensor() const { return vectors_; }
  diff::Tensor& tensor() { return vectors_; }
  FgBgVectors snapshot() const;

 private:
  diff::Tensor vectors_;  // [2,C], foreground row first
};

/// Writes a mask as a binary graymap, nearest-neighbour upsampled by
/// `upscale`, with 0..1 mapped linearly to 0..255.
void write_mask_pgm(const std::filesystem::path& path, std::span<const double> mask,
                    std::size_t width, std::size_t height, std::size_t upscale);

}  // namespace fewloc::localizer

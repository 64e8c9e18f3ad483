#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fewloc/localizer/localizer.hpp"

namespace fewloc::synth {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ShapeFamily : int { Ellipse, Rectangle, Cross, Ring, Wedge, Diamond, Triangle };
inline constexpr std::size_t kFamilyCount = 7;

/// Stripe and checker fills. All four look the same after a horizontal flip,
/// so flip augmentation never turns one class into another.
enum class Texture : int { HorizontalStripes, VerticalStripes, Checker, Concentric };
inline constexpr std::size_t kTextureCount = 4;

inline constexpr std::size_t kPaletteSize = 8;
using Rgb = std::array<double, 3>;
const std::array<Rgb, kPaletteSize>& palette();

std::string family_name(ShapeFamily family);
ShapeFamily family_from_name(const std::string& name);
std::string texture_name(Texture texture);
Texture texture_from_name(const std::string& name);

struct ClassSpec {
  int class_id = 0;
  ShapeFamily family = ShapeFamily::Ellipse;
  Texture texture = Texture::HorizontalStripes;
  int period = 4;  // stripe or checker period in pixels
  int color_a = 0, color_b = 1;  // palette indices, color_a < color_b

  int supercategory() const { return static_cast<int>(family); }
};

/// Distinct (family, texture, period, colour pair) for every class, spread
/// round-robin over the families. Throws ConfigError past the number of
/// distinct combinations.
std::vector<ClassSpec> make_class_specs(std::size_t classes, std::uint64_t seed);

/// Log-uniform sizes on [min_size, max_size], rounded. min == max gives a
/// constant; min > max throws ConfigError.
std::vector<std::size_t> sample_class_sizes(std::size_t classes, std::size_t min_size,
                                            std::size_t max_size, std::uint64_t seed);

struct LabeledImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, RGB interleaved
  int class_id = 0;
  localizer::BoxAnnotation box;

  double area_fraction() const {
    return box.area() / static_cast<double>(width * height);
  }
  double pixel(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c] / 255.0;
  }
};

struct RenderOptions {
  std::size_t image_size = 64;
};

/// Scale is the target's side length as a fraction of the image side and must
/// lie in [0.05, 0.9]. Up to `clutter` distractors from other families are
/// drawn before the target.
LabeledImage render_image(const ClassSpec& spec, double scale, std::size_t clutter,
                          std::uint64_t seed, const RenderOptions& options = {});

/// Boolean mask of target pixels, same seed semantics as render_image.
std::vector<bool> render_target_mask(const ClassSpec& spec, double scale, std::uint64_t seed,
                                     std::size_t image_size);

struct DatasetConfig {
  std::size_t classes = 100;
  std::size_t min_class_size = 10;
  std::size_t max_class_size = 200;
  std::size_t image_size = 64;
  std::size_t clutter = 3;
  /// Target area fraction is drawn uniformly on this range.
  double min_area = 0.0225;
  double max_area = 0.81;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Dataset {
  DatasetConfig config;
  std::vector<ClassSpec> classes;
  std::vector<LabeledImage> images;

  std::size_t class_size(int class_id) const;
  /// Image ids of each class, indexed by class id.
  std::vector<std::vector<std::size_t>> images_by_class() const;
};

Dataset generate_dataset(const DatasetConfig& config);

// ---------------------------------------------------------------------------

enum class SplitMode { Random, Supercategory };
enum class Role : int { Representation, Reference, Query };

std::string role_name(Role role);
Role role_from_name(const std::string& name);

struct SplitConfig {
  double representation_fraction = 0.8;
  double reference_fraction = 0.2;  // of each evaluation class
  std::size_t trials = 10;
  double annotation_fraction = 0.1;
  SplitMode mode = SplitMode::Random;
  std::vector<ShapeFamily> evaluation_families;  // supercategory mode
  std::uint64_t seed = 1;

  void validate() const;
};

struct BenchmarkSplit {
  std::vector<int> representation_classes;
  std::vector<int> evaluation_classes;
  std::vector<Role> roles;  // per image
  /// annotated[t] = sorted reference image ids carrying a box in trial t.
  std::vector<std::vector<std::size_t>> annotated;

  std::size_t trials() const { return annotated.size(); }
  std::vector<std::size_t> images_with_role(Role role) const;
  bool is_annotated(std::size_t trial, std::size_t image) const;
};

/// Random mode assigns whole classes: they are ranked by size and cut into
/// evaluation-count consecutive strata, one class per stratum going to
/// evaluation, so both sides see the same size distribution. Within each
/// evaluation class round(reference_fraction * size) images become
/// references. Throws ConfigError when a class would get no reference.
BenchmarkSplit build_split(const Dataset& dataset, const SplitConfig& config);

// ---------------------------------------------------------------------------
// On-disk layout: <dir>/manifest.json plus <dir>/images/NNNNNN.ppm

inline constexpr int kManifestVersion = 1;

void write_ppm(const std::filesystem::path& path, const LabeledImage& image);
/// Reads pixel data into `image`, which keeps its label fields.
void read_ppm(const std::filesystem::path& path, LabeledImage& image);

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset,
                   const BenchmarkSplit& split, const SplitConfig& split_config);

struct StoredDataset {
  Dataset dataset;
  BenchmarkSplit split;
  SplitConfig split_config;
};

StoredDataset read_dataset(const std::filesystem::path& dir);

}  // namespace fewloc::synth

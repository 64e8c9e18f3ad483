#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fewloc/synthdata/synthdata.hpp"

namespace fewloc::harness {

inline constexpr int kMetricsFormatVersion = 1;

struct Accuracy {
  double top1_image = 0.0;
  double top1_class = 0.0;
  double top5_image = 0.0;
  double top5_class = 0.0;
};

/// One query image. top1/top5 hold the fraction of trials in which the true
/// class ranked first / within the top five.
struct ImageOutcome {
  std::size_t image_id = 0;
  int class_id = 0;
  double area_fraction = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
};

struct ClassOutcome {
  int class_id = 0;
  std::size_t queries = 0;
  double top1 = 0.0;
  double top5 = 0.0;
};

struct Regression {
  double slope = 0.0;
  double intercept = 0.0;
  /// Reported as 0 when the response is constant.
  double r2 = 0.0;
  std::size_t points = 0;
};

struct BinGain {
  double lower = 0.0, upper = 0.0;
  std::size_t images = 0;
  double gain = 0.0;
};

struct MetricsReport {
  std::string model;
  std::size_t top_k = 5;
  Accuracy mean;
  std::vector<Accuracy> trials;
  /// Half-width of the 95% Student-t interval over trials; needs two trials.
  std::optional<Accuracy> ci_half_width;
  std::vector<ClassOutcome> per_class;
  std::vector<ImageOutcome> images;
};

class RegressionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Image-mean and class-mean top-1/top-5 over the outcomes.
Accuracy summarize(std::span<const ImageOutcome> images);

/// Per-class accuracy, sorted by class id.
std::vector<ClassOutcome> per_class_table(std::span<const ImageOutcome> images);

/// Two-sided 95% Student-t half-width of the mean of `values`; 0 for a
/// single value.
double t_interval_half_width(std::span<const double> values);

/// Merges single-trial reports over the same query images: averages the
/// outcomes, and fills the trial list, the mean and the interval.
MetricsReport combine_trials(const std::vector<MetricsReport>& trials);

/// Ordinary least squares y = slope*x + intercept. Throws RegressionError
/// with fewer than three points or a constant covariate.
Regression ols(std::span<const double> x, std::span<const double> y);

/// Per-class top-1 gain of `improved` over `base` against log class size.
Regression class_size_gain(const MetricsReport& base, const MetricsReport& improved,
                           const synth::Dataset& dataset);

/// Mean per-image top-1 gain of `improved` over `base`, binned by the
/// ground-truth box area fraction in bins of `width` from 0 up to `upper`.
std::vector<BinGain> area_bin_gains(const MetricsReport& base, const MetricsReport& improved,
                                    double width = 0.1, double upper = 0.9);

/// Versioned JSON rendering, one file per run.
std::string metrics_json(const MetricsReport& report, const std::optional<Regression>& size_gain = {},
                         const std::vector<BinGain>& area_gains = {});
void write_metrics(const std::filesystem::path& path, const MetricsReport& report,
                   const std::optional<Regression>& size_gain = {},
                   const std::vector<BinGain>& area_gains = {});

}  // namespace fewloc::harness

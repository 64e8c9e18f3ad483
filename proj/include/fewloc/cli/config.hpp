#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fewloc/harness/baseline.hpp"
#include "fewloc/harness/evaluate.hpp"
#include "fewloc/harness/train.hpp"
#include "fewloc/protonet/learner.hpp"
#include "fewloc/synthdata/synthdata.hpp"

namespace fewloc::cli {

inline constexpr int kConfigVersion = 1;
inline constexpr const char* kOutputRootVariable = "FEWLOC_OUTPUT_ROOT";

/// Malformed or inconsistent run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Everything a command needs. One master seed drives dataset generation,
/// the split, model initialization and training.
struct RunConfig {
  std::uint64_t seed = 1;
  synth::DatasetConfig dataset;
  synth::SplitConfig split;
  protonet::ExtractorConfig extractor = protonet::ExtractorConfig::desk_scale();
  protonet::ModelFlags model{true, protonet::Localization::FewShot, false};
  localizer::PoolNormalization fg_pooling = localizer::PoolNormalization::MaskSum;
  harness::Schedule schedule;
  harness::EvalOptions evaluation;
  /// Softmax rows appended to the ablation table.
  bool ablate_baselines = true;
  harness::SoftmaxOptions baseline;

  std::string data = "data";
  std::string output = "run";
  std::string checkpoint;
  /// Query image ids for visualize; empty picks the first few.
  std::vector<std::size_t> images;
  std::size_t visualize_count = 5;

  /// Pushes the master seed into every component.
  void apply_seed();
  void validate() const;
};

/// Parses JSON over the defaults. Unknown keys and type mismatches are
/// errors, so a misspelled flag cannot silently fall back to its default.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string config_json(const RunConfig& config);

/// `path` under the output-root override when it is relative and the
/// environment variable is set.
std::filesystem::path resolve_output(const std::string& path);

}  // namespace fewloc::cli

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fewloc/protonet/learner.hpp"
#include "fewloc/synthdata/synthdata.hpp"

namespace fewloc::harness {

struct Schedule {
  std::size_t epochs = 5;
  std::size_t passes_per_epoch = 10;
  std::size_t classes_per_batch = 10;
  std::size_t images_per_class = 10;
  double initial_learning_rate = 1e-3;
  bool flip = true;
  /// Share of each training batch carrying boxes for few-shot localization;
  /// at least two images are always annotated.
  double annotation_fraction = 0.1;
  /// Batches drawn from the evaluation references after each pass to track
  /// held-out loss; 0 disables it.
  std::size_t held_out_batches = 0;
  bool single_precision = true;
  std::uint64_t seed = 1;

  void validate() const;
};

/// initial_learning_rate * 2^-epoch.
double learning_rate(const Schedule& schedule, std::size_t epoch);

/// Boxes per training batch of `batch` images.
std::size_t annotated_per_batch(std::size_t batch, double fraction);

struct PassRecord {
  std::size_t pass = 0;  // counted from 0 over the whole run
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  std::size_t batches = 0;
  double train_loss = 0.0;
  std::optional<double> held_out_loss;
};

struct TrainingResult {
  std::vector<PassRecord> curve;
  std::size_t steps = 0;
  /// Set when a non-finite loss or gradient stopped training. The model then
  /// holds the parameters from the end of the last finite pass.
  bool diverged = false;
  std::string message;
};

using PassCallback = std::function<void(const PassRecord&)>;

/// Trains on the representation images of `split` with Adam and the halving
/// schedule. Input normalization is measured on the same images and stored
/// in the learner. Batch-folding models train in folded mode, the others in
/// split mode with half of each class as references.
TrainingResult train(protonet::Learner& learner, const synth::Dataset& dataset,
                     const synth::BenchmarkSplit& split, const Schedule& schedule,
                     const PassCallback& on_pass = {});

/// Tab-separated table: pass, epoch, learning_rate, batches, train_loss,
/// held_out_loss (empty when not tracked).
void write_loss_table(const std::filesystem::path& path, const TrainingResult& result);

}  // namespace fewloc::harness

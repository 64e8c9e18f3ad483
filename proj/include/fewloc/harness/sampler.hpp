#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace fewloc::harness {

/// Image ids of one sampled batch, class-major: the images of local class j
/// occupy positions [j*per_class, (j+1)*per_class).
struct BatchDraw {
  std::vector<std::size_t> image_ids;
  std::vector<int> labels;        // local class index per image
  std::vector<int> class_ids;     // dataset class id per local class
  std::size_t per_class = 0;
};

/// Draws n classes x p images without replacement within a pass. Classes are
/// picked with probability proportional to their remaining pool; a class
/// stays eligible while it still holds p images. Once fewer than n classes
/// are eligible the pass is over and every pool is refilled.
class TrainSampler {
 public:
  /// pools[k] are the image ids of class class_ids[k]. Throws
  /// synth::ConfigError when not even a fresh pass can supply one batch.
  TrainSampler(std::vector<int> class_ids, std::vector<std::vector<std::size_t>> pools,
               std::size_t classes_per_batch, std::size_t images_per_class, std::uint64_t seed);

  BatchDraw next();

  /// True when the next call to next() starts a new pass.
  bool pass_exhausted() const;
  std::size_t passes_completed() const { return passes_; }
  std::size_t remaining(std::size_t pool) const { return remaining_[pool].size(); }

 private:
  void refill();
  std::size_t eligible() const;

  std::vector<int> class_ids_;
  std::vector<std::vector<std::size_t>> pools_;
  std::vector<std::vector<std::size_t>> remaining_;
  std::size_t n_, p_;
  std::mt19937_64 rng_;
  std::size_t passes_ = 0;
};

/// One n-way episode: k references then q queries per class, classes drawn
/// uniformly at random. Throws synth::ConfigError when fewer than n classes
/// have k+q images.
BatchDraw episodic_batch(const std::vector<int>& class_ids,
                         const std::vector<std::vector<std::size_t>>& pools, std::size_t ways,
                         std::size_t shots, std::size_t queries, std::uint64_t seed);

}  // namespace fewloc::harness

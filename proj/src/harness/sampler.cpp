#include "fewloc/harness/sampler.hpp"

#include <algorithm>
#include <numeric>

#include "fewloc/synthdata/synthdata.hpp"

namespace fewloc::harness {

TrainSampler::TrainSampler(std::vector<int> class_ids, std::vector<std::vector<std::size_t>> pools,
                           std::size_t classes_per_batch, std::size_t images_per_class,
                           std::uint64_t seed)
    : class_ids_(std::move(class_ids)),
      pools_(std::move(pools)),
      n_(classes_per_batch),
      p_(images_per_class),
      rng_(seed) {
  if (class_ids_.size() != pools_.size()) {
    throw synth::ConfigError("sampler needs one pool per class");
  }
  if (n_ == 0 || p_ == 0) throw synth::ConfigError("batch geometry must be positive");
  refill();
  passes_ = 0;
  if (eligible() < n_) {
    throw synth::ConfigError("only " + std::to_string(eligible()) + " classes hold " +
                             std::to_string(p_) + " images; a batch needs " + std::to_string(n_));
  }
}

void TrainSampler::refill() {
  remaining_ = pools_;
  for (auto& pool : remaining_) std::shuffle(pool.begin(), pool.end(), rng_);
  ++passes_;
}

std::size_t TrainSampler::eligible() const {
  return static_cast<std::size_t>(std::count_if(remaining_.begin(), remaining_.end(),
                                                [&](const auto& r) { return r.size() >= p_; }));
}

bool TrainSampler::pass_exhausted() const { return eligible() < n_; }

BatchDraw TrainSampler::next() {
  if (pass_exhausted()) refill();
  BatchDraw out;
  out.per_class = p_;
  std::vector<double> weights(remaining_.size());
  for (std::size_t k = 0; k < remaining_.size(); ++k) {
    weights[k] = remaining_[k].size() >= p_ ? static_cast<double>(remaining_[k].size()) : 0.0;
  }
  for (std::size_t j = 0; j < n_; ++j) {
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    const std::size_t k = pick(rng_);
    weights[k] = 0.0;
    out.class_ids.push_back(class_ids_[k]);
    auto& pool = remaining_[k];
    for (std::size_t i = 0; i < p_; ++i) {
      out.image_ids.push_back(pool.back());
      out.labels.push_back(static_cast<int>(j));
      pool.pop_back();
    }
  }
  return out;
}

BatchDraw episodic_batch(const std::vector<int>& class_ids,
                         const std::vector<std::vector<std::size_t>>& pools, std::size_t ways,
                         std::size_t shots, std::size_t queries, std::uint64_t seed) {
  if (class_ids.size() != pools.size()) throw synth::ConfigError("episode needs one pool per class");
  std::vector<std::size_t> candidates;
  for (std::size_t k = 0; k < pools.size(); ++k) {
    if (pools[k].size() >= shots + queries) candidates.push_back(k);
  }
  if (ways == 0 || shots == 0 || candidates.size() < ways) {
    throw synth::ConfigError(std::to_string(candidates.size()) + " classes hold " +
                             std::to_string(shots + queries) + " images; a " +
                             std::to_string(ways) + "-way episode needs " + std::to_string(ways));
  }
  std::mt19937_64 rng(seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  BatchDraw out;
  out.per_class = shots + queries;
  for (std::size_t j = 0; j < ways; ++j) {
    const std::size_t k = candidates[j];
    out.class_ids.push_back(class_ids[k]);
    std::vector<std::size_t> ids = pools[k];
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t i = 0; i < shots + queries; ++i) {
      out.image_ids.push_back(ids[i]);
      out.labels.push_back(static_cast<int>(j));
    }
  }
  return out;
}

}  // namespace fewloc::harness

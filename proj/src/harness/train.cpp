#include "fewloc/harness/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "fewloc/common/memory.hpp"
#include "fewloc/common/seed.hpp"
#include "fewloc/diffcore/adam.hpp"
#include "fewloc/harness/data.hpp"
#include "fewloc/harness/sampler.hpp"

namespace fewloc::harness {

namespace {
constexpr std::uint64_t kSamplerStream = 0x7a1;
constexpr std::uint64_t kAugmentStream = 0x7a2;
constexpr std::uint64_t kHeldOutStream = 0x7a3;

struct Episode {
  protonet::EpisodeBatch batch;
  protonet::EpisodeMode mode;
  std::size_t references;
};

Episode make_episode(const protonet::Learner& learner, const synth::Dataset& dataset,
                     const BatchDraw& draw, const Schedule& schedule, bool augment,
                     std::mt19937_64& rng) {
  Episode e;
  e.mode = learner.flags().batch_folding ? protonet::EpisodeMode::Folded : protonet::EpisodeMode::Split;
  e.references = draw.per_class / 2;
  const std::size_t n = draw.image_ids.size();
  std::vector<bool> flips(n, false);
  if (augment && schedule.flip) {
    std::bernoulli_distribution coin(0.5);
    for (std::size_t i = 0; i < n; ++i) flips[i] = coin(rng);
  }
  auto& b = e.batch;
  b.images = image_tensor(dataset, draw.image_ids, learner.normalization(), flips);
  b.labels = draw.labels;
  b.classes = draw.class_ids.size();
  b.annotated.assign(n, false);
  if (learner.flags().localization == protonet::Localization::FewShot) {
    b.coverage = box_coverage(dataset, draw.image_ids, learner.map_extent(), flips);
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < n; ++i) {
      const bool reference = i % draw.per_class < e.references;
      if (e.mode == protonet::EpisodeMode::Folded || reference) candidates.push_back(i);
    }
    std::shuffle(candidates.begin(), candidates.end(), rng);
    const std::size_t take =
        std::min(candidates.size(), annotated_per_batch(n, schedule.annotation_fraction));
    for (std::size_t i = 0; i < take; ++i) b.annotated[candidates[i]] = true;
  }
  return e;
}

}  // namespace

void Schedule::validate() const {
  if (epochs == 0 || passes_per_epoch == 0) throw synth::ConfigError("schedule needs epochs and passes");
  if (classes_per_batch < 2) throw synth::ConfigError("a training batch needs at least two classes");
  if (images_per_class < 2) throw synth::ConfigError("a training batch needs two images per class");
  if (!(initial_learning_rate > 0.0)) throw synth::ConfigError("learning rate must be positive");
  if (!(annotation_fraction > 0.0 && annotation_fraction <= 1.0)) {
    throw synth::ConfigError("annotation fraction must lie in (0,1]");
  }
}

double learning_rate(const Schedule& schedule, std::size_t epoch) {
  return std::ldexp(schedule.initial_learning_rate, -static_cast<int>(epoch));
}

std::size_t annotated_per_batch(std::size_t batch, double fraction) {
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(batch) - 1e-9));
  return std::min(batch, std::max<std::size_t>(2, k));
}

TrainingResult train(protonet::Learner& learner, const synth::Dataset& dataset,
                     const synth::BenchmarkSplit& split, const Schedule& schedule,
                     const PassCallback& on_pass) {
  schedule.validate();
  check_resolution(dataset, learner.extractor_config());
  retain_freed_memory();
  diff::ScopedMatmulPrecision precision(schedule.single_precision ? diff::MatmulPrecision::Single
                                                                  : diff::MatmulPrecision::Double);

  const auto representation = split.images_with_role(synth::Role::Representation);
  const auto stats = channel_statistics(dataset, representation);
  learner.normalization() = stats;

  TrainSampler sampler(split.representation_classes,
                       pools_by_class(dataset, split, split.representation_classes,
                                      synth::Role::Representation),
                       schedule.classes_per_batch, schedule.images_per_class,
                       derive_seed(schedule.seed, kSamplerStream));
  std::mt19937_64 augment(derive_seed(schedule.seed, kAugmentStream));

  std::optional<TrainSampler> held_out;
  if (schedule.held_out_batches > 0) {
    const auto refs = pools_by_class(dataset, split, split.evaluation_classes, synth::Role::Reference);
    std::size_t usable = 0;
    for (const auto& r : refs) usable += r.size() >= 2 ? 1 : 0;
    const std::size_t n = std::min(schedule.classes_per_batch, usable);
    std::size_t p = 2;
    while (p < schedule.images_per_class &&
           std::count_if(refs.begin(), refs.end(), [&](const auto& r) { return r.size() >= p + 1; }) >=
               static_cast<long>(n)) {
      ++p;
    }
    if (n >= 2) {
      held_out.emplace(split.evaluation_classes, refs, n, p, derive_seed(schedule.seed, kHeldOutStream));
    }
  }

  auto params = learner.parameters();
  diff::AdamState adam;
  TrainingResult result;
  diff::Checkpoint last_good;
  learner.save(last_good);

  std::size_t pass_index = 0;
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    adam.learning_rate = learning_rate(schedule, epoch);
    for (std::size_t pass = 0; pass < schedule.passes_per_epoch; ++pass, ++pass_index) {
      PassRecord record;
      record.pass = pass_index;
      record.epoch = epoch;
      record.learning_rate = adam.learning_rate;
      double total = 0.0;
      do {
        Episode e = make_episode(learner, dataset, sampler.next(), schedule, true, augment);
        diff::Tensor loss = learner.episode_loss(e.batch, e.mode, e.references);
        const double value = loss.item();
        bool finite = std::isfinite(value);
        if (finite) {
          loss.backward();
          try {
            diff::adam_step(params, adam);
          } catch (const diff::NonFiniteGradient& err) {
            finite = false;
            result.message = err.what();
          }
          for (auto& p : params) p.tensor.zero_grad();
        } else {
          result.message = "non-finite training loss";
        }
        if (!finite) {
          learner.load(last_good);
          result.diverged = true;
          result.message += " at pass " + std::to_string(pass_index) + ", batch " +
                            std::to_string(record.batches);
          return result;
        }
        total += value;
        record.batches += 1;
        result.steps += 1;
      } while (!sampler.pass_exhausted());
      record.train_loss = total / static_cast<double>(record.batches);

      if (held_out) {
        double h = 0.0;
        for (std::size_t k = 0; k < schedule.held_out_batches; ++k) {
          Episode e = make_episode(learner, dataset, held_out->next(), schedule, false, augment);
          h += learner.episode_loss(e.batch, e.mode, e.references, diff::BatchNormMode::Eval).item();
        }
        record.held_out_loss = h / static_cast<double>(schedule.held_out_batches);
      }
      last_good = diff::Checkpoint{};
      learner.save(last_good);
      result.curve.push_back(record);
      if (on_pass) on_pass(record);
    }
  }
  return result;
}

void write_loss_table(const std::filesystem::path& path, const TrainingResult& result) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "pass\tepoch\tlearning_rate\tbatches\ttrain_loss\theld_out_loss\n";
  out.precision(10);
  for (const auto& r : result.curve) {
    out << r.pass << '\t' << r.epoch << '\t' << r.learning_rate << '\t' << r.batches << '\t'
        << r.train_loss << '\t';
    if (r.held_out_loss) out << *r.held_out_loss;
    out << '\n';
  }
}

}  // namespace fewloc::harness

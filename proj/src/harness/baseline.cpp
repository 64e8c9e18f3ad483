#include "fewloc/harness/baseline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "fewloc/common/memory.hpp"
#include "fewloc/common/seed.hpp"
#include "fewloc/diffcore/adam.hpp"
#include "fewloc/harness/data.hpp"

namespace fewloc::harness {

namespace {
constexpr std::uint64_t kExtractorStream = 0xb01;
constexpr std::uint64_t kHeadStream = 0xb02;
constexpr std::uint64_t kOrderStream = 0xb03;
constexpr std::uint64_t kFineTuneStream = 0xb04;

std::vector<double> label_weights(std::span<const int> labels, std::size_t classes, Reweight mode) {
  if (mode == Reweight::None) return std::vector<double>(classes, 1.0);
  std::vector<std::size_t> sizes(classes, 0);
  for (int l : labels) sizes.at(static_cast<std::size_t>(l)) += 1;
  return inverse_frequency_weights(sizes);
}
}  // namespace

std::vector<double> inverse_frequency_weights(std::span<const std::size_t> class_sizes) {
  std::vector<double> w(class_sizes.size(), 0.0);
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (class_sizes[k] == 0) continue;
    w[k] = 1.0 / static_cast<double>(class_sizes[k]);
    total += w[k];
    ++present;
  }
  if (present == 0) return w;
  const double mean = total / static_cast<double>(present);
  for (auto& v : w) v /= mean;
  return w;
}

SoftmaxModel::SoftmaxModel(protonet::ExtractorConfig config, std::size_t classes, std::uint64_t seed)
    : extractor_(config, derive_seed(seed, kExtractorStream)) {
  reset_head(classes, derive_seed(seed, kHeadStream));
}

void SoftmaxModel::reset_head(std::size_t classes, std::uint64_t seed) {
  const std::size_t c = extractor_.config().channels;
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(c));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> w(classes * c);
  for (auto& v : w) v = u(rng);
  head_weight_ = diff::Tensor({classes, c}, std::move(w), true);
  head_bias_ = diff::Tensor::zeros({classes}, true);
}

diff::Tensor SoftmaxModel::features(const diff::Tensor& images, diff::BatchNormMode mode) {
  return diff::global_avgpool(extractor_.forward(images, mode));
}

diff::Tensor SoftmaxModel::head(const diff::Tensor& features) const {
  return diff::linear(features, head_weight_, head_bias_);
}

std::vector<diff::NamedParameter> SoftmaxModel::parameters(bool include_extractor) const {
  std::vector<diff::NamedParameter> out;
  if (include_extractor) {
    out = extractor_.parameters();
    for (auto& p : out) p.name = "extractor." + p.name;
  }
  out.push_back({"head.weight", head_weight_});
  out.push_back({"head.bias", head_bias_});
  return out;
}

TrainingResult train_softmax(SoftmaxModel& model, const synth::Dataset& dataset,
                             std::span<const std::size_t> image_ids, std::span<const int> labels,
                             const SoftmaxOptions& options, bool freeze_extractor) {
  if (image_ids.size() != labels.size() || image_ids.empty()) {
    throw synth::ConfigError("softmax training needs one label per image");
  }
  if (options.batch_size < 2 || options.epochs == 0 || options.passes_per_epoch == 0) {
    throw synth::ConfigError("softmax schedule needs a batch of two and at least one pass");
  }
  check_resolution(dataset, model.extractor().config());
  retain_freed_memory();
  diff::ScopedMatmulPrecision precision(options.single_precision ? diff::MatmulPrecision::Single
                                                                 : diff::MatmulPrecision::Double);
  const std::size_t classes = model.classes();
  const auto weights = label_weights(labels, classes, options.reweight);

  diff::Tensor frozen;
  if (freeze_extractor) {
    EvalOptions eval;
    std::vector<double> feats;
    for (std::size_t s = 0; s < image_ids.size(); s += eval.chunk) {
      const auto ids = image_ids.subspan(s, std::min(eval.chunk, image_ids.size() - s));
      diff::Tensor f = model.features(image_tensor(dataset, ids, model.normalization()),
                                      diff::BatchNormMode::Eval);
      feats.insert(feats.end(), f.values().begin(), f.values().end());
    }
    frozen = diff::Tensor({image_ids.size(), model.extractor().config().channels}, std::move(feats));
  }

  auto params = model.parameters(!freeze_extractor);
  diff::AdamState adam;
  std::mt19937_64 rng(derive_seed(options.seed, freeze_extractor ? kFineTuneStream : kOrderStream));
  std::bernoulli_distribution coin(0.5);
  std::vector<std::size_t> order(image_ids.size());
  std::iota(order.begin(), order.end(), 0);

  TrainingResult result;
  std::size_t pass_index = 0;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    adam.learning_rate = std::ldexp(options.initial_learning_rate, -static_cast<int>(epoch));
    for (std::size_t pass = 0; pass < options.passes_per_epoch; ++pass, ++pass_index) {
      std::shuffle(order.begin(), order.end(), rng);
      PassRecord record{pass_index, epoch, adam.learning_rate, 0, 0.0, std::nullopt};
      for (std::size_t s = 0; s < order.size(); s += options.batch_size) {
        const std::size_t e = std::min(order.size(), s + options.batch_size);
        std::vector<std::size_t> rows(order.begin() + static_cast<long>(s), order.begin() + static_cast<long>(e));
        std::vector<int> y;
        for (std::size_t r : rows) y.push_back(labels[r]);
        diff::Tensor feats;
        if (freeze_extractor) {
          feats = diff::gather_rows(frozen, rows);
        } else {
          std::vector<std::size_t> ids;
          std::vector<bool> flips;
          for (std::size_t r : rows) {
            ids.push_back(image_ids[r]);
            flips.push_back(options.flip && coin(rng));
          }
          feats = model.features(image_tensor(dataset, ids, model.normalization(), flips),
                                 diff::BatchNormMode::Train);
        }
        diff::Tensor loss = diff::softmax_xent(model.head(feats), y, std::span<const double>(weights));
        const double value = loss.item();
        if (!std::isfinite(value)) {
          result.diverged = true;
          result.message = "non-finite softmax loss at pass " + std::to_string(pass_index);
          return result;
        }
        loss.backward();
        diff::adam_step(params, adam);
        for (auto& p : params) p.tensor.zero_grad();
        record.train_loss += value;
        record.batches += 1;
        result.steps += 1;
      }
      record.train_loss /= static_cast<double>(record.batches);
      result.curve.push_back(record);
    }
  }
  return result;
}

MetricsReport evaluate_softmax(SoftmaxModel& model, const synth::Dataset& dataset,
                               const synth::BenchmarkSplit& split, const EvalOptions& options) {
  if (model.classes() != split.evaluation_classes.size()) {
    throw synth::ConfigError("softmax head has " + std::to_string(model.classes()) + " outputs for " +
                             std::to_string(split.evaluation_classes.size()) + " evaluation classes");
  }
  diff::ScopedMatmulPrecision precision(options.single_precision ? diff::MatmulPrecision::Single
                                                                 : diff::MatmulPrecision::Double);
  const auto queries = split.images_with_role(synth::Role::Query);
  std::vector<double> scores;
  for (std::size_t s = 0; s < queries.size(); s += options.chunk) {
    const auto ids = std::span<const std::size_t>(queries).subspan(s, std::min(options.chunk, queries.size() - s));
    diff::Tensor logits = model.head(model.features(image_tensor(dataset, ids, model.normalization()),
                                                    diff::BatchNormMode::Eval));
    scores.insert(scores.end(), logits.values().begin(), logits.values().end());
  }
  return report_from_scores(queries, scores, split.evaluation_classes, dataset, options.top_k);
}

MetricsReport baseline_softmax(const synth::Dataset& dataset, const synth::BenchmarkSplit& split,
                               const protonet::ExtractorConfig& config,
                               const SoftmaxOptions& options, const EvalOptions& eval) {
  std::map<int, int> eval_label;
  for (std::size_t k = 0; k < split.evaluation_classes.size(); ++k) {
    eval_label[split.evaluation_classes[k]] = static_cast<int>(k);
  }
  const auto refs = split.images_with_role(synth::Role::Reference);
  std::vector<int> ref_labels;
  for (std::size_t id : refs) ref_labels.push_back(eval_label.at(dataset.images[id].class_id));

  SoftmaxModel model(config, split.evaluation_classes.size(), options.seed);
  std::string name = options.reweight == Reweight::InverseFrequency ? "softmax-reweighted" : "softmax";
  if (options.scope == BaselineScope::Scratch) {
    model.normalization() = channel_statistics(dataset, refs);
    train_softmax(model, dataset, refs, ref_labels, options, false);
    name += "-scratch";
  } else {
    const auto rep = split.images_with_role(synth::Role::Representation);
    std::map<int, int> rep_label;
    for (std::size_t k = 0; k < split.representation_classes.size(); ++k) {
      rep_label[split.representation_classes[k]] = static_cast<int>(k);
    }
    std::vector<int> rep_labels;
    for (std::size_t id : rep) rep_labels.push_back(rep_label.at(dataset.images[id].class_id));
    model.normalization() = channel_statistics(dataset, rep);
    model.reset_head(split.representation_classes.size(), derive_seed(options.seed, kHeadStream, 1));
    train_softmax(model, dataset, rep, rep_labels, options, false);
    model.reset_head(split.evaluation_classes.size(), derive_seed(options.seed, kHeadStream, 2));
    train_softmax(model, dataset, refs, ref_labels, options, true);
    name += "-transfer";
  }
  MetricsReport r = evaluate_softmax(model, dataset, split, eval);
  r.model = name;
  return r;
}

}  // namespace fewloc::harness

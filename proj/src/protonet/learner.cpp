#include "fewloc/protonet/learner.hpp"

#include <algorithm>
#include <stdexcept>

#include "fewloc/common/log.hpp"
#include "fewloc/common/seed.hpp"
#include "fewloc/covpool/covpool.hpp"
#include "fewloc/protonet/prototypes.hpp"

namespace fewloc::protonet {

using diff::Tensor;

std::string ModelFlags::code() const {
  std::string out;
  out += batch_folding ? '1' : '0';
  out += static_cast<char>('0' + static_cast<int>(localization));
  out += covariance_pooling ? '1' : '0';
  return out;
}

std::string ModelFlags::label() const {
  std::string out = "PN";
  if (batch_folding) out += "+BF";
  if (localization == Localization::FewShot) out += "+fsL";
  if (localization == Localization::Unsupervised) out += "+usL";
  if (covariance_pooling) out += "+CP";
  return out;
}

ModelFlags ModelFlags::from_code(const std::string& code) {
  if (code.size() != 3 || (code[0] != '0' && code[0] != '1') || code[1] < '0' || code[1] > '2' ||
      (code[2] != '0' && code[2] != '1')) {
    throw std::invalid_argument("model code '" + code + "' is not of the form [01][012][01]");
  }
  return {code[0] == '1', static_cast<Localization>(code[1] - '0'), code[2] == '1'};
}

namespace {

localizer::PoolNormalization stored_pooling(const diff::Checkpoint& ck) {
  return ck.at("model.fg_pooling").values.at(0) == 0.0f ? localizer::PoolNormalization::MaskSum
                                                        : localizer::PoolNormalization::CellCount;
}

}  // namespace

Learner::Learner(ExtractorConfig config, ModelFlags flags, std::uint64_t seed,
                 localizer::PoolNormalization fg_pooling)
    : flags_(flags), fg_pooling_(fg_pooling), extractor_(config, derive_seed(seed, 0xe7)) {
  if (flags_.localization == Localization::Unsupervised) {
    learned_.emplace(config.channels, derive_seed(seed, 0x10c));
  }
}

std::size_t Learner::feature_dim() const {
  const std::size_t c = channels();
  if (flags_.covariance_pooling) return c * c;
  return flags_.localizing() ? 2 * c : c;
}

Tensor Learner::feature_maps(const Tensor& images, diff::BatchNormMode mode) {
  return extractor_.forward(images, mode);
}

Tensor Learner::mask(const Tensor& maps, const localizer::FgBgVectors* fewshot) const {
  switch (flags_.localization) {
    case Localization::None:
      return {};
    case Localization::Unsupervised:
      return localizer::predict_mask(maps, learned_->tensor());
    case Localization::FewShot: {
      if (!fewshot) throw std::invalid_argument("few-shot localization needs fg/bg vectors");
      if (fewshot->degenerate_background()) {
        return Tensor::full({maps.dim(0), maps.dim(2), maps.dim(3)}, 1.0);
      }
      std::vector<double> v = fewshot->foreground;
      v.insert(v.end(), fewshot->background.begin(), fewshot->background.end());
      return localizer::predict_mask(maps, Tensor({2, fewshot->dim()}, std::move(v)));
    }
  }
  return {};
}

Tensor Learner::pool(const Tensor& maps, const Tensor& mask) const {
  if (flags_.covariance_pooling) {
    if (mask.defined()) return covpool::pooled_feature(maps, mask);
    return covpool::pooled_feature(maps);
  }
  if (mask.defined()) return localizer::fg_bg_pool(maps, mask, fg_pooling_);
  return diff::global_avgpool(maps);
}

Tensor Learner::localized_mask(const EpisodeBatch& batch, const Tensor& maps, bool folded) const {
  if (flags_.localization == Localization::Unsupervised) {
    return localizer::predict_mask(maps, learned_->tensor());
  }
  try {
    Tensor vectors = folded ? localizer::folded_localizer_vectors(maps, batch.coverage, batch.annotated)
                            : localizer::localizer_vectors(maps, batch.coverage, batch.annotated);
    return localizer::predict_mask(maps, vectors);
  } catch (const localizer::DegenerateBackgroundError&) {
    warn("annotated boxes in this episode cover their whole images; using a uniform mask");
    return Tensor::full({maps.dim(0), maps.dim(2), maps.dim(3)}, 1.0);
  }
}

Tensor Learner::episode_loss(const EpisodeBatch& batch, EpisodeMode mode,
                             std::optional<std::size_t> references_per_class,
                             diff::BatchNormMode bn) {
  const std::size_t B = batch.images.dim(0);
  if (batch.labels.size() != B) throw diff::ShapeError("episode_loss", "labels", B, batch.labels.size());
  Tensor maps = feature_maps(batch.images, bn);

  if (mode == EpisodeMode::Folded) {
    Tensor m;
    if (flags_.localizing()) m = localized_mask(batch, maps, true);
    Tensor emb = pool(maps, m);
    return diff::softmax_xent(folded_logits(emb, batch.labels, batch.classes), batch.labels);
  }

  // Split mode: per class, the first r images are references.
  std::vector<std::size_t> per_class(batch.classes, 0);
  for (int l : batch.labels) per_class.at(static_cast<std::size_t>(l)) += 1;
  const std::size_t p = *std::min_element(per_class.begin(), per_class.end());
  const std::size_t r = references_per_class.value_or(p / 2);
  if (r == 0 || r >= p) {
    throw std::invalid_argument("split episode needs both references and queries in every class (p=" +
                                std::to_string(p) + ", references=" + std::to_string(r) + ")");
  }
  std::vector<std::size_t> refs, queries;
  std::vector<int> ref_labels, query_labels;
  std::vector<std::size_t> seen(batch.classes, 0);
  for (std::size_t i = 0; i < B; ++i) {
    const int l = batch.labels[i];
    if (seen[static_cast<std::size_t>(l)]++ < r) {
      refs.push_back(i);
      ref_labels.push_back(l);
    } else {
      queries.push_back(i);
      query_labels.push_back(l);
    }
  }
  Tensor m;
  if (flags_.localizing()) {
    // Only references may carry boxes in split mode.
    EpisodeBatch masked = batch;
    for (std::size_t q : queries) masked.annotated[q] = false;
    if (flags_.localization == Localization::FewShot &&
        std::none_of(masked.annotated.begin(), masked.annotated.end(), [](bool b) { return b; })) {
      throw std::invalid_argument("split episode has no annotated reference image");
    }
    m = localized_mask(masked, maps, false);
  }
  Tensor emb = pool(maps, m);
  Tensor centroids = class_means(diff::gather_rows(emb, refs), ref_labels, batch.classes);
  Tensor logits = neg_sq_distances(diff::gather_rows(emb, queries), centroids);
  return diff::softmax_xent(logits, query_labels);
}

std::vector<diff::NamedParameter> Learner::parameters() const {
  auto out = extractor_.parameters();
  for (auto& p : out) p.name = "extractor." + p.name;
  if (learned_) out.push_back({"localizer.vectors", learned_->tensor()});
  return out;
}

std::size_t Learner::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

localizer::FgBgVectors Learner::learned_vectors() const {
  if (!learned_) throw std::logic_error("model " + flags_.label() + " has no learned localizer");
  return learned_->snapshot();
}

void Learner::save(diff::Checkpoint& ck) const {
  const auto& c = extractor_.config();
  ck.put("model.extractor", {4},
         std::vector<double>{static_cast<double>(c.stages), static_cast<double>(c.channels),
                             static_cast<double>(c.resolution), c.final_batchnorm ? 1.0 : 0.0});
  ck.put("model.flags", {3},
         std::vector<double>{flags_.batch_folding ? 1.0 : 0.0,
                             static_cast<double>(static_cast<int>(flags_.localization)),
                             flags_.covariance_pooling ? 1.0 : 0.0});
  ck.put("model.fg_pooling", {1},
         std::vector<double>{fg_pooling_ == localizer::PoolNormalization::MaskSum ? 0.0 : 1.0});
  ck.put("input.mean", {3}, normalization_.mean);
  ck.put("input.std", {3}, normalization_.std);
  extractor_.save(ck, "extractor.");
  if (learned_) ck.put("localizer.vectors", learned_->tensor().shape(), learned_->tensor().values());
}

void Learner::load(const diff::Checkpoint& ck) {
  const auto& flags = ck.at("model.flags").values;
  ModelFlags stored{flags.at(0) != 0.0f, static_cast<Localization>(static_cast<int>(flags.at(1))),
                    flags.at(2) != 0.0f};
  if (!(stored == flags_)) {
    throw diff::CheckpointError("checkpoint holds model " + stored.label() + ", expected " +
                                flags_.label());
  }
  if (stored_pooling(ck) != fg_pooling_) {
    throw diff::CheckpointError("checkpoint pools by " +
                                localizer::pool_normalization_name(stored_pooling(ck)) + ", expected " +
                                localizer::pool_normalization_name(fg_pooling_));
  }
  const auto& mean = ck.at("input.mean").values;
  const auto& sd = ck.at("input.std").values;
  for (std::size_t c = 0; c < 3; ++c) {
    normalization_.mean[c] = mean.at(c);
    normalization_.std[c] = sd.at(c);
  }
  extractor_.load(ck, "extractor.");
  if (learned_) {
    const auto& v = ck.at("localizer.vectors").values;
    auto dst = learned_->tensor().mutable_values();
    if (v.size() != dst.size()) throw diff::CheckpointError("localizer.vectors has the wrong size");
    std::copy(v.begin(), v.end(), dst.begin());
  }
}

Learner Learner::from_checkpoint(const diff::Checkpoint& ck) {
  const auto& e = ck.at("model.extractor").values;
  const auto& f = ck.at("model.flags").values;
  ExtractorConfig cfg{static_cast<std::size_t>(e.at(0)), static_cast<std::size_t>(e.at(1)),
                      static_cast<std::size_t>(e.at(2)), e.at(3) != 0.0f};
  ModelFlags flags{f.at(0) != 0.0f, static_cast<Localization>(static_cast<int>(f.at(1))),
                   f.at(2) != 0.0f};
  Learner learner(cfg, flags, 0, stored_pooling(ck));
  learner.load(ck);
  return learner;
}

}  // namespace fewloc::protonet

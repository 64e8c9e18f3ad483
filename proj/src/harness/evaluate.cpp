#include "fewloc/harness/evaluate.hpp"

#include <algorithm>

#include "fewloc/common/log.hpp"
#include "fewloc/harness/data.hpp"

namespace fewloc::harness {

namespace {

diff::MatmulPrecision precision_of(const EvalOptions& o) {
  return o.single_precision ? diff::MatmulPrecision::Single : diff::MatmulPrecision::Double;
}

void check_top_k(std::size_t classes, std::size_t top_k) {
  if (top_k == 0 || top_k > classes) {
    throw synth::ConfigError("top-" + std::to_string(top_k) + " accuracy needs at least " +
                             std::to_string(top_k) + " evaluation classes, have " +
                             std::to_string(classes));
  }
}

}  // namespace

diff::Tensor feature_maps(protonet::Learner& learner, const synth::Dataset& dataset,
                          std::span<const std::size_t> image_ids, const EvalOptions& options,
                          FeatureCache* cache) {
  check_resolution(dataset, learner.extractor_config());
  diff::ScopedMatmulPrecision precision(precision_of(options));
  const std::size_t c = learner.channels(), e = learner.map_extent();
  const std::size_t block = c * e * e;
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk);
  std::vector<double> out(image_ids.size() * block);

  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < image_ids.size(); ++i) {
    if (cache && cache->contains(image_ids[i])) {
      auto m = cache->at(image_ids[i]);
      std::copy(m.begin(), m.end(), out.begin() + static_cast<long>(i * block));
    } else {
      todo.push_back(i);
    }
  }
  for (std::size_t start = 0; start < todo.size(); start += chunk) {
    const std::size_t end = std::min(todo.size(), start + chunk);
    std::vector<std::size_t> ids;
    for (std::size_t k = start; k < end; ++k) ids.push_back(image_ids[todo[k]]);
    diff::Tensor maps = learner.feature_maps(image_tensor(dataset, ids, learner.normalization()),
                                             diff::BatchNormMode::Eval);
    const auto v = maps.values();
    for (std::size_t k = start; k < end; ++k) {
      const auto src = v.subspan((k - start) * block, block);
      std::copy(src.begin(), src.end(), out.begin() + static_cast<long>(todo[k] * block));
      if (cache) cache->put(image_ids[todo[k]], std::vector<double>(src.begin(), src.end()));
    }
  }
  return diff::Tensor({image_ids.size(), c, e, e}, std::move(out));
}

std::vector<double> embed(protonet::Learner& learner, const synth::Dataset& dataset,
                          std::span<const std::size_t> image_ids,
                          const localizer::FgBgVectors* vectors, const EvalOptions& options,
                          FeatureCache* cache) {
  const std::size_t dim = learner.feature_dim();
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk);
  std::vector<double> out;
  out.reserve(image_ids.size() * dim);
  for (std::size_t start = 0; start < image_ids.size(); start += chunk) {
    const auto ids = image_ids.subspan(start, std::min(chunk, image_ids.size() - start));
    diff::Tensor maps = feature_maps(learner, dataset, ids, options, cache);
    diff::Tensor e = learner.pool(maps, learner.mask(maps, vectors));
    out.insert(out.end(), e.values().begin(), e.values().end());
  }
  return out;
}

TrialPrototypes reference_pass(protonet::Learner& learner, const synth::Dataset& dataset,
                               const synth::BenchmarkSplit& split, std::size_t trial,
                               const EvalOptions& options, FeatureCache* cache) {
  if (trial >= split.trials()) {
    throw std::out_of_range("trial " + std::to_string(trial) + " of " + std::to_string(split.trials()));
  }
  TrialPrototypes out;
  if (learner.flags().localization == protonet::Localization::FewShot) {
    const auto& annotated = split.annotated[trial];
    const std::size_t c = learner.channels(), e = learner.map_extent();
    localizer::VectorAccumulator acc(c, e * e);
    const std::size_t chunk = std::max<std::size_t>(1, options.chunk);
    for (std::size_t start = 0; start < annotated.size(); start += chunk) {
      const auto ids = std::span<const std::size_t>(annotated).subspan(
          start, std::min(chunk, annotated.size() - start));
      diff::Tensor maps = feature_maps(learner, dataset, ids, options, cache);
      const auto cov = box_coverage(dataset, ids, e);
      for (std::size_t k = 0; k < ids.size(); ++k) {
        acc.add(ids[k], maps.values().subspan(k * c * e * e, c * e * e),
                std::span<const double>(cov).subspan(k * e * e, e * e));
      }
    }
    if (acc.images() == 0) throw std::invalid_argument("trial has no annotated reference image");
    out.localizer = acc.vectors();
    if (out.localizer->degenerate_background()) {
      warn("every annotated box covers its whole image; the localizer mask is uniform");
    }
  }

  const auto refs = split.images_with_role(synth::Role::Reference);
  const auto emb = embed(learner, dataset, refs, out.localizer ? &*out.localizer : nullptr, options, cache);
  const std::size_t dim = learner.feature_dim();
  protonet::PrototypeAccumulator acc(split.evaluation_classes, dim);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    acc.add(dataset.images[refs[i]].class_id, std::span<const double>(emb).subspan(i * dim, dim));
  }
  out.prototypes = acc.finish();
  return out;
}

MetricsReport report_from_scores(std::span<const std::size_t> query_ids,
                                 std::span<const double> scores, const std::vector<int>& class_ids,
                                 const synth::Dataset& dataset, std::size_t top_k) {
  check_top_k(class_ids.size(), top_k);
  const std::size_t k = class_ids.size();
  MetricsReport r;
  r.top_k = top_k;
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    const auto& im = dataset.images.at(query_ids[q]);
    const auto best = protonet::top_k_indices(scores.subspan(q * k, k), top_k);
    ImageOutcome o;
    o.image_id = query_ids[q];
    o.class_id = im.class_id;
    o.area_fraction = im.area_fraction();
    o.top1 = class_ids[best[0]] == im.class_id ? 1.0 : 0.0;
    o.top5 = std::any_of(best.begin(), best.end(), [&](std::size_t b) { return class_ids[b] == im.class_id; })
                 ? 1.0
                 : 0.0;
    r.images.push_back(o);
  }
  r.mean = summarize(r.images);
  r.trials = {r.mean};
  r.per_class = per_class_table(r.images);
  return r;
}

MetricsReport query_pass(protonet::Learner& learner, const synth::Dataset& dataset,
                         const synth::BenchmarkSplit& split, const TrialPrototypes& prototypes,
                         const EvalOptions& options, FeatureCache* cache) {
  const auto& protos = prototypes.prototypes;
  check_top_k(protos.size(), options.top_k);
  for (int c : split.evaluation_classes) protos.row_of(c);
  const auto queries = split.images_with_role(synth::Role::Query);
  const auto emb = embed(learner, dataset, queries,
                         prototypes.localizer ? &*prototypes.localizer : nullptr, options, cache);
  const auto cls = protonet::classify(emb, protos.dim, protos);
  MetricsReport r = report_from_scores(queries, cls.log_probs, protos.class_ids, dataset, options.top_k);
  r.model = learner.flags().label();
  return r;
}

MetricsReport run_trials(protonet::Learner& learner, const synth::Dataset& dataset,
                         const synth::BenchmarkSplit& split, const EvalOptions& options) {
  if (split.trials() == 0) throw synth::ConfigError("evaluation needs at least one trial");
  FeatureCache cache;
  std::vector<MetricsReport> trials;
  const bool per_trial = learner.flags().localization == protonet::Localization::FewShot;
  for (std::size_t t = 0; t < split.trials(); ++t) {
    if (!per_trial && t > 0) {
      trials.push_back(trials.front());
      continue;
    }
    const auto protos = reference_pass(learner, dataset, split, t, options, &cache);
    trials.push_back(query_pass(learner, dataset, split, protos, options, &cache));
  }
  MetricsReport out = combine_trials(trials);
  out.model = learner.flags().label();
  return out;
}

MaskContrast mask_contrast(protonet::Learner& learner, const synth::Dataset& dataset,
                           const synth::BenchmarkSplit& split, std::size_t trial,
                           const EvalOptions& options) {
  if (!learner.flags().localizing()) {
    throw std::invalid_argument("model " + learner.flags().label() + " has no localizer");
  }
  FeatureCache cache;
  std::optional<localizer::FgBgVectors> vectors;
  if (learner.flags().localization == protonet::Localization::FewShot) {
    vectors = reference_pass(learner, dataset, split, trial, options, &cache).localizer;
  }
  const auto queries = split.images_with_role(synth::Role::Query);
  const std::size_t e = learner.map_extent();
  double in = 0.0, in_w = 0.0, out = 0.0, out_w = 0.0;
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk);
  for (std::size_t start = 0; start < queries.size(); start += chunk) {
    const auto ids = std::span<const std::size_t>(queries).subspan(
        start, std::min(chunk, queries.size() - start));
    diff::Tensor maps = feature_maps(learner, dataset, ids, options, nullptr);
    diff::Tensor m = learner.mask(maps, vectors ? &*vectors : nullptr);
    const auto cov = box_coverage(dataset, ids, e);
    for (std::size_t i = 0; i < cov.size(); ++i) {
      in += m.values()[i] * cov[i];
      in_w += cov[i];
      out += m.values()[i] * (1.0 - cov[i]);
      out_w += 1.0 - cov[i];
    }
  }
  MaskContrast r;
  r.images = queries.size();
  r.inside = in_w > 0.0 ? in / in_w : 0.0;
  r.outside = out_w > 0.0 ? out / out_w : 0.0;
  return r;
}

}  // namespace fewloc::harness

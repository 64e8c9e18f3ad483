#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "fewloc/common/seed.hpp"
#include "fewloc/synthdata/synthdata.hpp"

namespace fewloc::synth {

namespace {
constexpr std::uint64_t kClassStream = 0x5b1;
constexpr std::uint64_t kReferenceStream = 0x5b2;
constexpr std::uint64_t kTrialStream = 0x5b3;
}  // namespace

std::string role_name(Role role) {
  switch (role) {
    case Role::Representation:
      return "representation";
    case Role::Reference:
      return "reference";
    case Role::Query:
      return "query";
  }
  return "?";
}

Role role_from_name(const std::string& name) {
  if (name == "representation") return Role::Representation;
  if (name == "reference") return Role::Reference;
  if (name == "query") return Role::Query;
  throw ConfigError("unknown image role '" + name + "'");
}

void SplitConfig::validate() const {
  auto open_unit = [](double v) { return v > 0.0 && v < 1.0; };
  if (!open_unit(representation_fraction)) {
    throw ConfigError("representation fraction must lie in (0,1)");
  }
  if (!open_unit(reference_fraction)) throw ConfigError("reference fraction must lie in (0,1)");
  if (!(annotation_fraction > 0.0 && annotation_fraction <= 1.0)) {
    throw ConfigError("annotation fraction must lie in (0,1]");
  }
  if (trials == 0) throw ConfigError("at least one trial is required");
  if (mode == SplitMode::Supercategory && evaluation_families.empty()) {
    throw ConfigError("supercategory split needs at least one evaluation family");
  }
}

std::vector<std::size_t> BenchmarkSplit::images_with_role(Role role) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < roles.size(); ++i) {
    if (roles[i] == role) out.push_back(i);
  }
  return out;
}

bool BenchmarkSplit::is_annotated(std::size_t trial, std::size_t image) const {
  const auto& a = annotated.at(trial);
  return std::binary_search(a.begin(), a.end(), image);
}

BenchmarkSplit build_split(const Dataset& dataset, const SplitConfig& config) {
  config.validate();
  const std::size_t n = dataset.classes.size();
  const auto by_class = dataset.images_by_class();
  std::vector<bool> is_eval(n, false);

  if (config.mode == SplitMode::Random) {
    const std::size_t n_eval = static_cast<std::size_t>(
        std::lround((1.0 - config.representation_fraction) * static_cast<double>(n)));
    if (n_eval == 0 || n_eval >= n) {
      throw ConfigError(std::to_string(n) + " classes cannot be split at representation fraction " +
                        std::to_string(config.representation_fraction));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return by_class[a].size() > by_class[b].size();
    });
    std::mt19937_64 rng(derive_seed(config.seed, kClassStream));
    for (std::size_t k = 0; k < n_eval; ++k) {
      const std::size_t lo = k * n / n_eval, hi = (k + 1) * n / n_eval;
      const std::size_t pick = std::uniform_int_distribution<std::size_t>(lo, hi - 1)(rng);
      is_eval[order[pick]] = true;
    }
  } else {
    std::set<ShapeFamily> families;
    for (const auto& c : dataset.classes) families.insert(c.family);
    if (families.size() < 2) throw ConfigError("supercategory split needs at least two families");
    for (std::size_t k = 0; k < n; ++k) {
      const auto fam = dataset.classes[k].family;
      is_eval[k] = std::find(config.evaluation_families.begin(), config.evaluation_families.end(),
                             fam) != config.evaluation_families.end();
    }
    const auto n_eval = std::count(is_eval.begin(), is_eval.end(), true);
    if (n_eval == 0 || static_cast<std::size_t>(n_eval) == n) {
      throw ConfigError("supercategory split leaves one side without classes");
    }
  }

  BenchmarkSplit split;
  split.roles.assign(dataset.images.size(), Role::Representation);
  std::vector<std::vector<std::size_t>> references(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (!is_eval[k]) {
      split.representation_classes.push_back(static_cast<int>(k));
      continue;
    }
    split.evaluation_classes.push_back(static_cast<int>(k));
    std::vector<std::size_t> ids = by_class[k];
    const std::size_t refs = static_cast<std::size_t>(
        std::lround(config.reference_fraction * static_cast<double>(ids.size())));
    if (refs == 0 || refs >= ids.size()) {
      throw ConfigError("class " + std::to_string(k) + " with " + std::to_string(ids.size()) +
                        " images cannot provide both reference and query images");
    }
    std::mt19937_64 rng(derive_seed(config.seed, kReferenceStream, k));
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      split.roles[ids[i]] = i < refs ? Role::Reference : Role::Query;
    }
    references[k].assign(ids.begin(), ids.begin() + static_cast<long>(refs));
    std::sort(references[k].begin(), references[k].end());
  }

  split.annotated.resize(config.trials);
  for (std::size_t t = 0; t < config.trials; ++t) {
    std::mt19937_64 rng(derive_seed(config.seed, kTrialStream, t));
    auto& chosen = split.annotated[t];
    for (int k : split.evaluation_classes) {
      auto refs = references[static_cast<std::size_t>(k)];
      const std::size_t take = static_cast<std::size_t>(
          std::ceil(config.annotation_fraction * static_cast<double>(refs.size()) - 1e-9));
      std::shuffle(refs.begin(), refs.end(), rng);
      chosen.insert(chosen.end(), refs.begin(), refs.begin() + static_cast<long>(take));
    }
    std::sort(chosen.begin(), chosen.end());
  }
  return split;
}

}  // namespace fewloc::synth

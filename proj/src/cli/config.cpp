#include "fewloc/cli/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fewloc/common/seed.hpp"

namespace fewloc::cli {

using Json = nlohmann::ordered_json;

namespace {

std::string localization_name(protonet::Localization l) {
  switch (l) {
    case protonet::Localization::None:
      return "none";
    case protonet::Localization::FewShot:
      return "fewshot";
    case protonet::Localization::Unsupervised:
      return "unsupervised";
  }
  return "?";
}

// Reads the keys of one JSON object and reports any it did not consume.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void read(const std::string& key, T& dst) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    const Json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw mismatch(key, "a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned()) throw mismatch(key, "a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw mismatch(key, "a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw mismatch(key, "a string");
    }
    dst = v.get<T>();
  }

  template <typename T>
  void read_list(const std::string& key, std::vector<T>& dst) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    const Json& v = j_.at(key);
    if (!v.is_array()) throw mismatch(key, "an array");
    dst.clear();
    for (const auto& e : v) {
      if constexpr (std::is_integral_v<T>) {
        if (!e.is_number_unsigned()) throw mismatch(key, "an array of non-negative integers");
      } else {
        if (!e.is_string()) throw mismatch(key, "an array of strings");
      }
      dst.push_back(e.get<T>());
    }
  }

  ObjectReader child(const std::string& key) {
    used_.insert(key);
    return ObjectReader(j_.at(key), path_.empty() ? key : path_ + "." + key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError("unknown configuration key '" + qualified(key) + "'");
    }
  }

 private:
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "configuration" : "'" + path_ + "'"; }
  ConfigError mismatch(const std::string& key, const std::string& what) const {
    return ConfigError("configuration key '" + qualified(key) + "' must be " + what);
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace

void RunConfig::apply_seed() {
  dataset.seed = seed;
  split.seed = derive_seed(seed, 0x5e);
  schedule.seed = derive_seed(seed, 0x5c);
  baseline.seed = derive_seed(seed, 0xba);
}

void RunConfig::validate() const {
  try {
    dataset.validate();
    split.validate();
    schedule.validate();
    extractor.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (dataset.image_size != extractor.resolution) {
    throw ConfigError("dataset.image_size (" + std::to_string(dataset.image_size) +
                      ") must equal model.extractor.resolution (" +
                      std::to_string(extractor.resolution) + ")");
  }
  if (evaluation.chunk == 0) throw ConfigError("evaluation.chunk must be positive");
  if (evaluation.top_k == 0) throw ConfigError("evaluation.top_k must be positive");
  if (baseline.batch_size < 2) throw ConfigError("baseline.batch_size must be at least 2");
}

RunConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  RunConfig c;
  ObjectReader root(j, "");
  int version = kConfigVersion;
  root.read("format_version", version);
  if (version != kConfigVersion) {
    throw ConfigError("configuration format version " + std::to_string(version) + " is not supported");
  }
  root.read("seed", c.seed);
  root.read("data", c.data);
  root.read("output", c.output);
  root.read("checkpoint", c.checkpoint);

  if (root.has("dataset")) {
    auto d = root.child("dataset");
    d.read("classes", c.dataset.classes);
    d.read("min_class_size", c.dataset.min_class_size);
    d.read("max_class_size", c.dataset.max_class_size);
    d.read("image_size", c.dataset.image_size);
    d.read("clutter", c.dataset.clutter);
    d.read("min_area", c.dataset.min_area);
    d.read("max_area", c.dataset.max_area);
    d.finish();
  }
  if (root.has("split")) {
    auto s = root.child("split");
    std::string mode = c.split.mode == synth::SplitMode::Random ? "random" : "supercategory";
    s.read("mode", mode);
    if (mode == "random") {
      c.split.mode = synth::SplitMode::Random;
    } else if (mode == "supercategory") {
      c.split.mode = synth::SplitMode::Supercategory;
    } else {
      throw ConfigError("split.mode must be \"random\" or \"supercategory\", got \"" + mode + "\"");
    }
    s.read("representation_fraction", c.split.representation_fraction);
    s.read("reference_fraction", c.split.reference_fraction);
    s.read("trials", c.split.trials);
    s.read("annotation_fraction", c.split.annotation_fraction);
    std::vector<std::string> families;
    s.read_list("evaluation_families", families);
    if (!families.empty()) {
      c.split.evaluation_families.clear();
      try {
        for (const auto& f : families) c.split.evaluation_families.push_back(synth::family_from_name(f));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("split.evaluation_families: ") + e.what());
      }
    }
    s.finish();
  }
  if (root.has("model")) {
    auto m = root.child("model");
    if (m.has("code")) {
      std::string code;
      m.read("code", code);
      try {
        c.model = protonet::ModelFlags::from_code(code);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("model.code: ") + e.what());
      }
    }
    const protonet::ModelFlags from_code = c.model;
    m.read("batch_folding", c.model.batch_folding);
    std::string loc = localization_name(c.model.localization);
    m.read("localization", loc);
    if (loc == "none") {
      c.model.localization = protonet::Localization::None;
    } else if (loc == "fewshot") {
      c.model.localization = protonet::Localization::FewShot;
    } else if (loc == "unsupervised") {
      c.model.localization = protonet::Localization::Unsupervised;
    } else {
      throw ConfigError("model.localization must be none, fewshot or unsupervised, got \"" + loc + "\"");
    }
    m.read("covariance_pooling", c.model.covariance_pooling);
    if (m.has("code") && c.model != from_code) {
      throw ConfigError("model.code " + from_code.code() + " disagrees with the model flags (" +
                        c.model.code() + ")");
    }
    std::string pooling = localizer::pool_normalization_name(c.fg_pooling);
    m.read("fg_pooling", pooling);
    try {
      c.fg_pooling = localizer::pool_normalization_from_name(pooling);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("model.fg_pooling: ") + e.what());
    }
    if (m.has("extractor")) {
      auto e = m.child("extractor");
      e.read("stages", c.extractor.stages);
      e.read("channels", c.extractor.channels);
      e.read("resolution", c.extractor.resolution);
      e.read("final_batchnorm", c.extractor.final_batchnorm);
      e.finish();
    }
    m.finish();
  }
  if (root.has("schedule")) {
    auto s = root.child("schedule");
    s.read("epochs", c.schedule.epochs);
    s.read("passes_per_epoch", c.schedule.passes_per_epoch);
    s.read("classes_per_batch", c.schedule.classes_per_batch);
    s.read("images_per_class", c.schedule.images_per_class);
    s.read("initial_learning_rate", c.schedule.initial_learning_rate);
    s.read("flip", c.schedule.flip);
    s.read("annotation_fraction", c.schedule.annotation_fraction);
    s.read("held_out_batches", c.schedule.held_out_batches);
    s.read("single_precision", c.schedule.single_precision);
    s.finish();
  }
  if (root.has("evaluation")) {
    auto e = root.child("evaluation");
    e.read("chunk", c.evaluation.chunk);
    e.read("top_k", c.evaluation.top_k);
    e.read("single_precision", c.evaluation.single_precision);
    e.finish();
  }
  if (root.has("baseline")) {
    auto b = root.child("baseline");
    b.read("in_ablation", c.ablate_baselines);
    std::string reweight = c.baseline.reweight == harness::Reweight::None ? "none" : "inverse_frequency";
    b.read("reweight", reweight);
    if (reweight == "none") {
      c.baseline.reweight = harness::Reweight::None;
    } else if (reweight == "inverse_frequency") {
      c.baseline.reweight = harness::Reweight::InverseFrequency;
    } else {
      throw ConfigError("baseline.reweight must be none or inverse_frequency");
    }
    std::string scope = c.baseline.scope == harness::BaselineScope::Scratch ? "scratch" : "transfer";
    b.read("scope", scope);
    if (scope == "scratch") {
      c.baseline.scope = harness::BaselineScope::Scratch;
    } else if (scope == "transfer") {
      c.baseline.scope = harness::BaselineScope::Transfer;
    } else {
      throw ConfigError("baseline.scope must be scratch or transfer");
    }
    b.read("batch_size", c.baseline.batch_size);
    b.read("epochs", c.baseline.epochs);
    b.read("passes_per_epoch", c.baseline.passes_per_epoch);
    b.read("initial_learning_rate", c.baseline.initial_learning_rate);
    b.finish();
  }
  if (root.has("visualize")) {
    auto v = root.child("visualize");
    v.read_list("images", c.images);
    v.read("count", c.visualize_count);
    v.finish();
  }
  root.finish();
  c.apply_seed();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read configuration " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_json(const RunConfig& c) {
  Json fams = Json::array();
  for (auto f : c.split.evaluation_families) fams.push_back(synth::family_name(f));
  Json j{
      {"format_version", kConfigVersion},
      {"seed", c.seed},
      {"data", c.data},
      {"output", c.output},
      {"checkpoint", c.checkpoint},
      {"dataset",
       {{"classes", c.dataset.classes},
        {"min_class_size", c.dataset.min_class_size},
        {"max_class_size", c.dataset.max_class_size},
        {"image_size", c.dataset.image_size},
        {"clutter", c.dataset.clutter},
        {"min_area", c.dataset.min_area},
        {"max_area", c.dataset.max_area}}},
      {"split",
       {{"mode", c.split.mode == synth::SplitMode::Random ? "random" : "supercategory"},
        {"representation_fraction", c.split.representation_fraction},
        {"reference_fraction", c.split.reference_fraction},
        {"trials", c.split.trials},
        {"annotation_fraction", c.split.annotation_fraction},
        {"evaluation_families", fams}}},
      {"model",
       {{"code", c.model.code()},
        {"batch_folding", c.model.batch_folding},
        {"localization", localization_name(c.model.localization)},
        {"covariance_pooling", c.model.covariance_pooling},
        {"fg_pooling", localizer::pool_normalization_name(c.fg_pooling)},
        {"extractor",
         {{"stages", c.extractor.stages},
          {"channels", c.extractor.channels},
          {"resolution", c.extractor.resolution},
          {"final_batchnorm", c.extractor.final_batchnorm}}}}},
      {"schedule",
       {{"epochs", c.schedule.epochs},
        {"passes_per_epoch", c.schedule.passes_per_epoch},
        {"classes_per_batch", c.schedule.classes_per_batch},
        {"images_per_class", c.schedule.images_per_class},
        {"initial_learning_rate", c.schedule.initial_learning_rate},
        {"flip", c.schedule.flip},
        {"annotation_fraction", c.schedule.annotation_fraction},
        {"held_out_batches", c.schedule.held_out_batches},
        {"single_precision", c.schedule.single_precision}}},
      {"evaluation",
       {{"chunk", c.evaluation.chunk},
        {"top_k", c.evaluation.top_k},
        {"single_precision", c.evaluation.single_precision}}},
      {"baseline",
       {{"in_ablation", c.ablate_baselines},
        {"reweight", c.baseline.reweight == harness::Reweight::None ? "none" : "inverse_frequency"},
        {"scope", c.baseline.scope == harness::BaselineScope::Scratch ? "scratch" : "transfer"},
        {"batch_size", c.baseline.batch_size},
        {"epochs", c.baseline.epochs},
        {"passes_per_epoch", c.baseline.passes_per_epoch},
        {"initial_learning_rate", c.baseline.initial_learning_rate}}},
      {"visualize", {{"images", c.images}, {"count", c.visualize_count}}}};
  return j.dump(2);
}

std::filesystem::path resolve_output(const std::string& path) {
  std::filesystem::path p(path);
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutputRootVariable); root && *root) {
      return std::filesystem::path(root) / p;
    }
  }
  return p;
}

}  // namespace fewloc::cli

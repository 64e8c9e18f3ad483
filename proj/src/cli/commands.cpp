#include "fewloc/cli/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "fewloc/common/log.hpp"
#include "fewloc/harness/baseline.hpp"
#include "fewloc/harness/data.hpp"
#include "fewloc/harness/evaluate.hpp"
#include "fewloc/harness/metrics.hpp"
#include "fewloc/harness/train.hpp"
#include "fewloc/localizer/localizer.hpp"

namespace fewloc::cli {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text << '\n';
}

void write_resolved(const fs::path& dir, const RunConfig& config) {
  write_text(dir / "config.json", config_json(config));
}

synth::StoredDataset load_data(const RunConfig& config) {
  const fs::path dir = resolve_output(config.data);
  if (!fs::exists(dir / "manifest.json")) {
    throw RefusalError("no dataset at " + dir.string() + "; run 'generate' first");
  }
  return synth::read_dataset(dir);
}

std::string percent(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(1) << 100.0 * v;
  return s.str();
}

std::string fixed(double v, int digits = 3) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string with_ci(double mean, const std::optional<harness::Accuracy>& ci, double harness::Accuracy::*field) {
  std::string out = percent(mean);
  if (ci) out += " ± " + percent((*ci).*field);
  return out;
}

struct TrainedModel {
  protonet::Learner learner;
  harness::TrainingResult result;
};

TrainedModel train_model(const RunConfig& config, const protonet::ModelFlags& flags,
                         const synth::StoredDataset& data, std::ostream& log) {
  TrainedModel m{protonet::Learner(config.extractor, flags, config.seed, config.fg_pooling), {}};
  const auto start = std::chrono::steady_clock::now();
  log << "training " << flags.label() << " (" << flags.code() << "), "
      << m.learner.parameter_count() << " parameters\n";
  m.result = harness::train(m.learner, data.dataset, data.split, config.schedule,
                            [&](const harness::PassRecord& r) {
                              const double secs = std::chrono::duration<double>(
                                                      std::chrono::steady_clock::now() - start)
                                                      .count();
                              log << "  pass " << r.pass << " epoch " << r.epoch << " lr "
                                  << r.learning_rate << " loss " << fixed(r.train_loss, 4);
                              if (r.held_out_loss) log << " held-out " << fixed(*r.held_out_loss, 4);
                              log << " (" << r.batches << " batches, " << fixed(secs, 0) << "s)\n";
                              log.flush();
                            });
  return m;
}

void print_report(const harness::MetricsReport& r, std::ostream& log) {
  log << r.model << ": top-1 " << with_ci(r.mean.top1_image, r.ci_half_width, &harness::Accuracy::top1_image)
      << " (images) " << with_ci(r.mean.top1_class, r.ci_half_width, &harness::Accuracy::top1_class)
      << " (classes); top-" << r.top_k << " "
      << with_ci(r.mean.top5_image, r.ci_half_width, &harness::Accuracy::top5_image) << " (images) "
      << with_ci(r.mean.top5_class, r.ci_half_width, &harness::Accuracy::top5_class) << " (classes); "
      << r.trials.size() << " trials\n";
}

}  // namespace

void prepare_output(const fs::path& dir, bool overwrite) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw RefusalError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !overwrite) {
      throw RefusalError(dir.string() + " is not empty; pass --overwrite to reuse it");
    }
  }
  fs::create_directories(dir);
}

std::vector<std::string> ablation_codes() {
  std::vector<std::string> out;
  for (char f : {'0', '1'}) {
    for (char l : {'0', '1', '2'}) {
      for (char c : {'0', '1'}) out.push_back(std::string{f, l, c});
    }
  }
  return out;
}

void cmd_generate(const RunConfig& config, bool overwrite, std::ostream& log) {
  config.validate();
  const fs::path dir = resolve_output(config.output);
  prepare_output(dir, overwrite);
  const auto dataset = synth::generate_dataset(config.dataset);
  const auto split = synth::build_split(dataset, config.split);
  synth::write_dataset(dir, dataset, split, config.split);
  RunConfig resolved = config;
  resolved.data = config.output;
  write_resolved(dir, resolved);

  std::vector<std::size_t> sizes;
  for (const auto& c : dataset.classes) sizes.push_back(dataset.class_size(c.class_id));
  std::sort(sizes.begin(), sizes.end());
  const std::size_t n = sizes.size();
  const double median = n % 2 ? static_cast<double>(sizes[n / 2])
                              : 0.5 * static_cast<double>(sizes[n / 2 - 1] + sizes[n / 2]);
  const double total = static_cast<double>(dataset.images.size());
  const auto count = [&](synth::Role r) { return static_cast<double>(split.images_with_role(r).size()); };
  log << "wrote " << dataset.images.size() << " images of " << n << " classes to " << dir.string() << "\n"
      << "class sizes: min " << sizes.front() << ", median " << median << ", max " << sizes.back() << "\n"
      << "classes: " << split.representation_classes.size() << " representation, "
      << split.evaluation_classes.size() << " evaluation\n"
      << "images: representation/reference/query = " << percent(count(synth::Role::Representation) / total)
      << "/" << percent(count(synth::Role::Reference) / total) << "/"
      << percent(count(synth::Role::Query) / total) << " %\n"
      << "annotated references per trial: " << split.annotated.front().size() << " over "
      << split.trials() << " trials\n";
}

void cmd_train(const RunConfig& config, bool overwrite, std::ostream& log) {
  config.validate();
  const auto data = load_data(config);
  const fs::path dir = resolve_output(config.output);
  prepare_output(dir, overwrite);
  RunConfig resolved = config;
  resolved.checkpoint = (fs::path(config.output) / "checkpoint.bin").string();
  write_resolved(dir, resolved);

  auto m = train_model(config, config.model, data, log);
  diff::Checkpoint ck;
  m.learner.save(ck);
  diff::write_checkpoint(dir / "checkpoint.bin", ck);
  harness::write_loss_table(dir / "loss.tsv", m.result);
  if (m.result.diverged) {
    throw std::runtime_error("training stopped: " + m.result.message +
                             "; the checkpoint holds the last finite parameters");
  }
  log << "wrote " << (dir / "checkpoint.bin").string() << " after " << m.result.steps << " steps\n";
}

void cmd_eval(const RunConfig& config, bool overwrite, std::ostream& log) {
  config.validate();
  if (config.checkpoint.empty()) throw ConfigError("eval needs a checkpoint (--checkpoint)");
  const auto data = load_data(config);
  const fs::path ck_path = resolve_output(config.checkpoint);
  if (!fs::exists(ck_path)) throw RefusalError("no checkpoint at " + ck_path.string());
  auto learner = protonet::Learner::from_checkpoint(diff::read_checkpoint(ck_path));
  const fs::path dir = resolve_output(config.output);
  prepare_output(dir, overwrite);
  RunConfig resolved = config;
  resolved.model = learner.flags();
  resolved.extractor = learner.extractor_config();
  write_resolved(dir, resolved);

  const auto report = harness::run_trials(learner, data.dataset, data.split, config.evaluation);
  harness::write_metrics(dir / "metrics.json", report);
  print_report(report, log);
  if (learner.flags().localization != protonet::Localization::FewShot) {
    log << "note: " << learner.flags().label()
        << " does not use the annotated boxes, so every trial is identical and the CI width is 0\n";
  }
  if (learner.flags().localization == protonet::Localization::Unsupervised &&
      learner.flags().covariance_pooling) {
    log << "caveat: " << kUnsupervisedCovarianceCaveat << "\n";
  }
}

void cmd_ablate(const RunConfig& config, bool overwrite, std::ostream& log) {
  config.validate();
  const auto data = load_data(config);
  const fs::path dir = resolve_output(config.output);
  prepare_output(dir, overwrite);
  write_resolved(dir, config);

  struct Row {
    std::string code, label;
    harness::MetricsReport report;
    std::string note;
  };
  std::vector<Row> rows;
  for (const auto& code : ablation_codes()) {
    const auto flags = protonet::ModelFlags::from_code(code);
    auto m = train_model(config, flags, data, log);
    const fs::path sub = dir / code;
    fs::create_directories(sub);
    diff::Checkpoint ck;
    m.learner.save(ck);
    diff::write_checkpoint(sub / "checkpoint.bin", ck);
    harness::write_loss_table(sub / "loss.tsv", m.result);
    Row row{code, flags.label(), {}, ""};
    if (m.result.diverged) {
      row.note = "training diverged: " + m.result.message;
      warn(code + ": " + row.note);
    }
    row.report = harness::run_trials(m.learner, data.dataset, data.split, config.evaluation);
    harness::write_metrics(sub / "metrics.json", row.report);
    if (flags.localization == protonet::Localization::Unsupervised && flags.covariance_pooling) {
      row.note += (row.note.empty() ? "" : "; ") + std::string(kUnsupervisedCovarianceCaveat);
    }
    print_report(row.report, log);
    rows.push_back(row);
  }
  if (config.ablate_baselines) {
    auto report = harness::baseline_softmax(data.dataset, data.split, config.extractor, config.baseline,
                                            config.evaluation);
    harness::write_metrics(dir / (report.model + ".json"), report);
    print_report(report, log);
    rows.push_back({"-", report.model, report, "single run; no trials"});
  }

  // Localization gains against the matching non-localizing model.
  for (const auto& row : rows) {
    if (row.code.size() != 3 || row.code[1] == '0') continue;
    const std::string base_code{row.code[0], '0', row.code[2]};
    const auto base = std::find_if(rows.begin(), rows.end(), [&](const Row& r) { return r.code == base_code; });
    std::optional<harness::Regression> size_gain;
    try {
      size_gain = harness::class_size_gain(base->report, row.report, data.dataset);
    } catch (const harness::RegressionError& e) {
      warn(row.code + ": " + e.what());
    }
    harness::write_metrics(dir / row.code / "metrics.json", row.report, size_gain,
                           harness::area_bin_gains(base->report, row.report));
  }

  std::ostringstream md, tsv;
  md << "| code | model | top-1 mean | top-1 per-class | top-5 mean | top-5 per-class | note |\n"
     << "|---|---|---|---|---|---|---|\n";
  tsv << "code\tmodel\ttop1_image\ttop1_image_ci\ttop1_class\ttop1_class_ci\ttop5_image\ttop5_image_ci"
         "\ttop5_class\ttop5_class_ci\tnote\n";
  for (const auto& r : rows) {
    const auto& a = r.report.mean;
    const auto& ci = r.report.ci_half_width;
    md << "| " << r.code << " | " << r.label << " | "
       << with_ci(a.top1_image, ci, &harness::Accuracy::top1_image) << " | "
       << with_ci(a.top1_class, ci, &harness::Accuracy::top1_class) << " | "
       << with_ci(a.top5_image, ci, &harness::Accuracy::top5_image) << " | "
       << with_ci(a.top5_class, ci, &harness::Accuracy::top5_class) << " | " << r.note << " |\n";
    auto half = [&](double harness::Accuracy::*f) { return ci ? fixed((*ci).*f, 6) : std::string(); };
    tsv << r.code << '\t' << r.label << '\t' << fixed(a.top1_image, 6) << '\t'
        << half(&harness::Accuracy::top1_image) << '\t' << fixed(a.top1_class, 6) << '\t'
        << half(&harness::Accuracy::top1_class) << '\t' << fixed(a.top5_image, 6) << '\t'
        << half(&harness::Accuracy::top5_image) << '\t' << fixed(a.top5_class, 6) << '\t'
        << half(&harness::Accuracy::top5_class) << '\t' << r.note << '\n';
  }
  write_text(dir / "table.md", md.str());
  write_text(dir / "table.tsv", tsv.str());
  log << "\n" << md.str();
}

void cmd_visualize(const RunConfig& config, bool overwrite, std::ostream& log) {
  if (config.checkpoint.empty()) throw ConfigError("visualize needs a checkpoint (--checkpoint)");
  const fs::path ck_path = resolve_output(config.checkpoint);
  if (!fs::exists(ck_path)) throw RefusalError("no checkpoint at " + ck_path.string());
  auto learner = protonet::Learner::from_checkpoint(diff::read_checkpoint(ck_path));
  if (!learner.flags().localizing()) {
    throw RefusalError("model " + learner.flags().label() + " (" + learner.flags().code() +
                       ") has no localizer, so there is no mask to draw; use a few-shot or "
                       "unsupervised localization checkpoint");
  }
  const auto data = load_data(config);
  const fs::path dir = resolve_output(config.output);
  prepare_output(dir, overwrite);
  RunConfig resolved = config;
  resolved.model = learner.flags();
  resolved.extractor = learner.extractor_config();

  std::vector<std::size_t> ids = config.images;
  if (ids.empty()) {
    const auto queries = data.split.images_with_role(synth::Role::Query);
    ids.assign(queries.begin(), queries.begin() + static_cast<long>(std::min(config.visualize_count, queries.size())));
    resolved.images = ids;
  }
  write_resolved(dir, resolved);
  for (std::size_t id : ids) {
    if (id >= data.dataset.images.size()) {
      throw ConfigError("image " + std::to_string(id) + " is not in the dataset");
    }
  }

  std::optional<localizer::FgBgVectors> vectors;
  if (learner.flags().localization == protonet::Localization::FewShot) {
    vectors = harness::reference_pass(learner, data.dataset, data.split, 0, config.evaluation).localizer;
  }
  const auto maps = harness::feature_maps(learner, data.dataset, ids, config.evaluation);
  const auto mask = learner.mask(maps, vectors ? &*vectors : nullptr);
  const std::size_t e = learner.map_extent();
  const std::size_t side = data.dataset.config.image_size;
  const std::size_t up = side / e;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto m = mask.values().subspan(k * e * e, e * e);
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << ids[k];
    localizer::write_mask_pgm(dir / ("mask_" + name.str() + ".pgm"), m, e, e, up);

    const auto& src = data.dataset.images[ids[k]];
    synth::LabeledImage pair;
    pair.width = 2 * side;
    pair.height = side;
    pair.pixels.resize(pair.width * pair.height * 3);
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        for (std::size_t c = 0; c < 3; ++c) {
          pair.pixels[(y * pair.width + x) * 3 + c] = src.pixels[(y * side + x) * 3 + c];
        }
        const double v = std::clamp(m[(y / up) * e + x / up], 0.0, 1.0);
        const auto g = static_cast<std::uint8_t>(std::lround(v * 255.0));
        for (std::size_t c = 0; c < 3; ++c) pair.pixels[(y * pair.width + side + x) * 3 + c] = g;
      }
    }
    synth::write_ppm(dir / ("pair_" + name.str() + ".ppm"), pair);
  }
  log << "wrote " << ids.size() << " masks for " << learner.flags().label() << " to " << dir.string() << "\n";
}

}  // namespace fewloc::cli

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fewloc/cli/commands.hpp"
#include "fewloc/cli/config.hpp"

namespace cli = fewloc::cli;

int main(int argc, char** argv) {
  CLI::App app{"Few-shot learning with localization on a synthetic heavy-tailed benchmark"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, data, checkpoint;
  std::vector<std::size_t> images;
  bool overwrite = false;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "master seed");
  app.add_option("--out", out, "output directory (under $FEWLOC_OUTPUT_ROOT when relative)");
  app.add_flag("--overwrite", overwrite, "reuse a non-empty output directory");

  auto* generate = app.add_subcommand("generate", "render the synthetic dataset and its split");
  auto* train = app.add_subcommand("train", "train one model on the representation classes");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint over every trial");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate the twelve ablation models");
  auto* visualize = app.add_subcommand("visualize", "write localizer masks for query images");
  for (auto* sub : {train, eval, ablate, visualize}) {
    sub->add_option("--data", data, "dataset directory written by generate");
  }
  for (auto* sub : {eval, visualize}) {
    sub->add_option("--checkpoint", checkpoint, "checkpoint written by train");
  }
  visualize->add_option("--images", images, "image ids (default: the first query images)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    cli::RunConfig config = config_path.empty() ? cli::RunConfig{} : cli::load_config(config_path);
    if (seed) config.seed = *seed;
    config.apply_seed();
    if (out) config.output = *out;
    if (data) config.data = *data;
    if (checkpoint) config.checkpoint = *checkpoint;
    if (!images.empty()) config.images = images;

    if (*generate) cli::cmd_generate(config, overwrite, std::cout);
    if (*train) cli::cmd_train(config, overwrite, std::cout);
    if (*eval) cli::cmd_eval(config, overwrite, std::cout);
    if (*ablate) cli::cmd_ablate(config, overwrite, std::cout);
    if (*visualize) cli::cmd_visualize(config, overwrite, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

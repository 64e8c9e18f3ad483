#pragma once

#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>

#include "fewloc/cli/config.hpp"

namespace fewloc::cli {

/// A command declined to run, e.g. it would overwrite earlier results or the
/// checkpoint cannot do what was asked.
class RefusalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caveat printed next to models combining unsupervised localization with
/// covariance pooling.
inline constexpr const char* kUnsupervisedCovarianceCaveat =
    "unsupervised localization does not interact well with covariance pooling";

/// Throws RefusalError when `dir` exists, is not empty and overwriting was
/// not requested; creates it otherwise.
void prepare_output(const std::filesystem::path& dir, bool overwrite);

/// Each command writes its resolved configuration as config.json in its
/// output directory and reports progress on `log`. Failures throw.
void cmd_generate(const RunConfig& config, bool overwrite, std::ostream& log);
void cmd_train(const RunConfig& config, bool overwrite, std::ostream& log);
void cmd_eval(const RunConfig& config, bool overwrite, std::ostream& log);
void cmd_ablate(const RunConfig& config, bool overwrite, std::ostream& log);
void cmd_visualize(const RunConfig& config, bool overwrite, std::ostream& log);

/// The twelve ablation codes: folding x {none, few-shot, unsupervised} x
/// covariance pooling, in numeric order.
std::vector<std::string> ablation_codes();

}  // namespace fewloc::cli

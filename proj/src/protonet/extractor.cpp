#include "fewloc/protonet/extractor.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace fewloc::protonet {

using diff::BatchNormMode;
using diff::Tensor;

std::size_t ExtractorConfig::map_extent() const { return resolution >> stages; }

void ExtractorConfig::validate() const {
  if (stages == 0 || channels == 0) {
    throw std::invalid_argument("extractor needs at least one stage and one channel");
  }
  const std::size_t factor = std::size_t{1} << stages;
  if (resolution == 0 || resolution % factor != 0) {
    throw std::invalid_argument("extractor resolution " + std::to_string(resolution) +
                                " is not divisible by 2^" + std::to_string(stages));
  }
}

Extractor::Extractor(ExtractorConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  std::size_t in_channels = 3;
  for (std::size_t s = 0; s < config_.stages; ++s) {
    Stage stage;
    const std::size_t fan_in = in_channels * 9;
    // Kaiming-uniform with ReLU gain.
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> w(config_.channels * fan_in);
    for (auto& v : w) v = dist(rng);
    stage.weight = Tensor({config_.channels, in_channels, 3, 3}, std::move(w), true);
    stage.bias = Tensor::zeros({config_.channels}, true);
    stage.has_batchnorm = !(config_.final_batchnorm && s + 1 == config_.stages);
    if (stage.has_batchnorm) {
      stage.gamma = Tensor::full({config_.channels}, 1.0, true);
      stage.beta = Tensor::zeros({config_.channels}, true);
      stage.stats = diff::BatchNormStats(config_.channels);
    }
    stages_.push_back(std::move(stage));
    in_channels = config_.channels;
  }
  if (config_.final_batchnorm) {
    final_gamma_ = Tensor::full({config_.channels}, 1.0, true);
    final_beta_ = Tensor::zeros({config_.channels}, true);
    final_stats_ = diff::BatchNormStats(config_.channels);
  }
}

Tensor Extractor::forward(const Tensor& images, BatchNormMode mode) {
  diff::expect_rank("extractor input", images, 4);
  if (images.dim(1) != 3) throw diff::ShapeError("extractor", "channels", 3, images.dim(1));
  if (images.dim(2) != config_.resolution) {
    throw diff::ShapeError("extractor", "height", config_.resolution, images.dim(2));
  }
  if (images.dim(3) != config_.resolution) {
    throw diff::ShapeError("extractor", "width", config_.resolution, images.dim(3));
  }
  Tensor x = images;
  for (auto& stage : stages_) {
    x = diff::conv2d(x, stage.weight, stage.bias);
    if (stage.has_batchnorm) {
      x = diff::batchnorm(x, stage.gamma, stage.beta, stage.stats, mode);
      x = diff::relu(x);
    }
    x = diff::maxpool2(x);
  }
  if (config_.final_batchnorm) {
    x = diff::batchnorm(x, final_gamma_, final_beta_, final_stats_, mode);
  }
  return x;
}

std::vector<diff::NamedParameter> Extractor::parameters() const {
  std::vector<diff::NamedParameter> out;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::string p = "stage" + std::to_string(s);
    const auto& st = stages_[s];
    out.push_back({p + ".conv.weight", st.weight});
    out.push_back({p + ".conv.bias", st.bias});
    if (st.has_batchnorm) {
      out.push_back({p + ".bn.gamma", st.gamma});
      out.push_back({p + ".bn.beta", st.beta});
    }
  }
  if (config_.final_batchnorm) {
    out.push_back({"final_bn.gamma", final_gamma_});
    out.push_back({"final_bn.beta", final_beta_});
  }
  return out;
}

std::size_t Extractor::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

namespace {

void save_stats(diff::Checkpoint& ck, const std::string& name, const diff::BatchNormStats& st) {
  ck.put(name + ".running_mean", {st.running_mean.size()}, st.running_mean);
  ck.put(name + ".running_var", {st.running_var.size()}, st.running_var);
}

void load_values(const diff::Checkpoint& ck, const std::string& name, std::span<double> dst) {
  const auto& e = ck.at(name);
  if (e.values.size() != dst.size()) {
    throw diff::CheckpointError("checkpoint entry '" + name + "' has " +
                                std::to_string(e.values.size()) + " values, model expects " +
                                std::to_string(dst.size()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = e.values[i];
}

void load_stats(const diff::Checkpoint& ck, const std::string& name, diff::BatchNormStats& st) {
  load_values(ck, name + ".running_mean", st.running_mean);
  load_values(ck, name + ".running_var", st.running_var);
}

}  // namespace

void Extractor::save(diff::Checkpoint& checkpoint, const std::string& prefix) const {
  for (const auto& p : parameters()) {
    checkpoint.put(prefix + p.name, p.tensor.shape(), p.tensor.values());
  }
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    if (stages_[s].has_batchnorm) {
      save_stats(checkpoint, prefix + "stage" + std::to_string(s) + ".bn", stages_[s].stats);
    }
  }
  if (config_.final_batchnorm) save_stats(checkpoint, prefix + "final_bn", final_stats_);
}

void Extractor::load(const diff::Checkpoint& checkpoint, const std::string& prefix) {
  for (auto& p : parameters()) {
    load_values(checkpoint, prefix + p.name, p.tensor.mutable_values());
  }
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    if (stages_[s].has_batchnorm) {
      load_stats(checkpoint, prefix + "stage" + std::to_string(s) + ".bn", stages_[s].stats);
    }
  }
  if (config_.final_batchnorm) load_stats(checkpoint, prefix + "final_bn", final_stats_);
}

}  // namespace fewloc::protonet

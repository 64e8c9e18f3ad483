#include "fewloc/localizer/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <string>

namespace fewloc::localizer {

using diff::Node;
using diff::Tensor;

void BoxAnnotation::validate(std::size_t width, std::size_t height) const {
  const bool ok = x0 >= 0 && x0 < x1 && static_cast<std::size_t>(x1) <= width && y0 >= 0 &&
                  y0 < y1 && static_cast<std::size_t>(y1) <= height;
  if (!ok) {
    throw BoxError("box (" + std::to_string(x0) + "," + std::to_string(y0) + "," +
                   std::to_string(x1) + "," + std::to_string(y1) + ") of image " +
                   std::to_string(image_id) + " does not fit a " + std::to_string(width) + "x" +
                   std::to_string(height) + " image");
  }
}

BoxAnnotation BoxAnnotation::flipped(std::size_t width) const {
  BoxAnnotation out = *this;
  out.x0 = static_cast<int>(width) - x1;
  out.x1 = static_cast<int>(width) - x0;
  return out;
}

std::vector<double> rasterize_box(const BoxAnnotation& box, std::size_t image_width,
                                  std::size_t image_height, std::size_t map_width,
                                  std::size_t map_height) {
  box.validate(image_width, image_height);
  constexpr std::size_t kPre = 4;
  if (image_width % kPre != 0 || image_height % kPre != 0 || map_width == 0 || map_height == 0 ||
      (image_width / kPre) % map_width != 0 || (image_height / kPre) % map_height != 0) {
    throw diff::ShapeError("rasterize_box: map " + std::to_string(map_width) + "x" +
                           std::to_string(map_height) + " does not divide the 4x4-pooled " +
                           std::to_string(image_width) + "x" + std::to_string(image_height) +
                           " image");
  }
  const std::size_t pw = image_width / kPre, ph = image_height / kPre;
  std::vector<double> pooled(pw * ph, 0.0);
  for (std::size_t y = static_cast<std::size_t>(box.y0); y < static_cast<std::size_t>(box.y1); ++y) {
    for (std::size_t x = static_cast<std::size_t>(box.x0); x < static_cast<std::size_t>(box.x1);
         ++x) {
      pooled[(y / kPre) * pw + x / kPre] += 1.0 / (kPre * kPre);
    }
  }
  const std::size_t fx = pw / map_width, fy = ph / map_height;
  std::vector<double> out(map_width * map_height, 0.0);
  for (std::size_t y = 0; y < ph; ++y) {
    for (std::size_t x = 0; x < pw; ++x) {
      out[(y / fy) * map_width + x / fx] += pooled[y * pw + x] / static_cast<double>(fx * fy);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

VectorAccumulator::VectorAccumulator(std::size_t channels, std::size_t cells)
    : channels_(channels), cells_(cells) {
  total_.fg.assign(channels, 0.0);
  total_.bg.assign(channels, 0.0);
}

void VectorAccumulator::add(std::size_t image_id, std::span<const double> map,
                            std::span<const double> coverage) {
  if (map.size() != channels_ * cells_) {
    throw diff::ShapeError("VectorAccumulator", "map", channels_ * cells_, map.size());
  }
  if (coverage.size() != cells_) {
    throw diff::ShapeError("VectorAccumulator", "coverage", cells_, coverage.size());
  }
  Sums s;
  s.fg.assign(channels_, 0.0);
  s.bg.assign(channels_, 0.0);
  for (std::size_t i = 0; i < cells_; ++i) {
    s.fg_weight += coverage[i];
    s.bg_weight += 1.0 - coverage[i];
  }
  for (std::size_t c = 0; c < channels_; ++c) {
    const double* row = map.data() + c * cells_;
    double f = 0.0, b = 0.0;
    for (std::size_t i = 0; i < cells_; ++i) {
      f += coverage[i] * row[i];
      b += (1.0 - coverage[i]) * row[i];
    }
    s.fg[c] = f;
    s.bg[c] = b;
    total_.fg[c] += f;
    total_.bg[c] += b;
  }
  total_.fg_weight += s.fg_weight;
  total_.bg_weight += s.bg_weight;
  contributions_.emplace_back(image_id, std::move(s));
}

FgBgVectors VectorAccumulator::finish(const Sums& s) const {
  FgBgVectors v;
  v.foreground.assign(channels_, 0.0);
  v.background.assign(channels_, 0.0);
  // Weights below this are rounding residue from subtraction.
  constexpr double kTiny = 1e-9;
  v.foreground_weight = s.fg_weight > kTiny ? s.fg_weight : 0.0;
  v.background_weight = s.bg_weight > kTiny ? s.bg_weight : 0.0;
  for (std::size_t c = 0; c < channels_; ++c) {
    if (v.foreground_weight > 0.0) v.foreground[c] = s.fg[c] / s.fg_weight;
    if (v.background_weight > 0.0) v.background[c] = s.bg[c] / s.bg_weight;
  }
  return v;
}

FgBgVectors VectorAccumulator::vectors() const { return finish(total_); }

FgBgVectors VectorAccumulator::vectors_without(std::size_t image_id) const {
  Sums s = total_;
  std::size_t removed = 0;
  for (const auto& [id, part] : contributions_) {
    if (id != image_id) continue;
    ++removed;
    for (std::size_t c = 0; c < channels_; ++c) {
      s.fg[c] -= part.fg[c];
      s.bg[c] -= part.bg[c];
    }
    s.fg_weight -= part.fg_weight;
    s.bg_weight -= part.bg_weight;
  }
  if (removed > 0 && removed == contributions_.size()) {
    throw LocalizerFoldError("folding out image " + std::to_string(image_id) +
                             " leaves no annotated image");
  }
  return finish(s);
}

namespace {

VectorAccumulator accumulate(std::span<const double> maps, std::size_t channels,
                             const std::vector<std::vector<double>>& coverages) {
  if (coverages.empty()) throw std::invalid_argument("few-shot vectors need an annotated image");
  const std::size_t cells = coverages.front().size();
  if (maps.size() != coverages.size() * channels * cells) {
    throw diff::ShapeError("fewshot_vectors", "maps", coverages.size() * channels * cells,
                           maps.size());
  }
  VectorAccumulator acc(channels, cells);
  for (std::size_t i = 0; i < coverages.size(); ++i) {
    acc.add(i, maps.subspan(i * channels * cells, channels * cells), coverages[i]);
  }
  return acc;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

FgBgVectors fewshot_vectors(std::span<const double> maps, std::size_t channels,
                            const std::vector<std::vector<double>>& coverages) {
  return accumulate(maps, channels, coverages).vectors();
}

FgBgVectors folded_fewshot_vectors(std::span<const double> maps, std::size_t channels,
                                   const std::vector<std::vector<double>>& coverages,
                                   std::size_t exclude) {
  if (coverages.size() < 2) {
    throw LocalizerFoldError("folded few-shot vectors need at least two annotated images");
  }
  return accumulate(maps, channels, coverages).vectors_without(exclude);
}

std::vector<double> predict_mask(std::span<const double> map, std::size_t channels,
                                 const FgBgVectors& vectors) {
  if (vectors.dim() != channels) {
    throw diff::ShapeError("predict_mask", "channels", channels, vectors.dim());
  }
  if (channels == 0 || map.size() % channels != 0) {
    throw diff::ShapeError("predict_mask: map size is not a multiple of the channel count");
  }
  const std::size_t cells = map.size() / channels;
  std::vector<double> out(cells);
  for (std::size_t i = 0; i < cells; ++i) {
    double z = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const double e = map[c * cells + i];
      const double df = e - vectors.foreground[c];
      const double db = e - vectors.background[c];
      z += db * db - df * df;
    }
    out[i] = sigmoid(z);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct MapDims {
  std::size_t batch, channels, cells;
};

MapDims map_dims(const std::string& op, const Tensor& maps) {
  diff::expect_rank(op, maps, 4);
  return {maps.dim(0), maps.dim(1), maps.dim(2) * maps.dim(3)};
}

// Weighted sums of one image's cells against coverage (fg) and 1 - coverage (bg).
void image_sums(const double* map, const double* cov, const MapDims& d, double* fg, double* bg,
                double& wf, double& wb) {
  wf = wb = 0.0;
  for (std::size_t i = 0; i < d.cells; ++i) {
    wf += cov[i];
    wb += 1.0 - cov[i];
  }
  for (std::size_t c = 0; c < d.channels; ++c) {
    const double* row = map + c * d.cells;
    double f = 0.0, b = 0.0;
    for (std::size_t i = 0; i < d.cells; ++i) {
      f += cov[i] * row[i];
      b += (1.0 - cov[i]) * row[i];
    }
    fg[c] = f;
    bg[c] = b;
  }
}

// Shared forward for the plain and folded vector ops. Row r of the result is
// built from the totals minus the contribution of `excluded[r]` (if any).
Tensor vectors_op(const Tensor& maps, std::span<const double> coverage,
                  const std::vector<bool>& annotated, bool folded) {
  const MapDims d = map_dims("localizer_vectors", maps);
  if (coverage.size() != d.batch * d.cells) {
    throw diff::ShapeError("localizer_vectors", "coverage", d.batch * d.cells, coverage.size());
  }
  if (annotated.size() != d.batch) {
    throw diff::ShapeError("localizer_vectors", "annotated", d.batch, annotated.size());
  }
  const std::size_t n_annotated =
      static_cast<std::size_t>(std::count(annotated.begin(), annotated.end(), true));
  if (n_annotated == 0) throw std::invalid_argument("localizer_vectors: no annotated image");

  const std::size_t C = d.channels;
  std::vector<double> img_fg(d.batch * C, 0.0), img_bg(d.batch * C, 0.0);
  std::vector<double> img_wf(d.batch, 0.0), img_wb(d.batch, 0.0);
  std::vector<double> tot_fg(C, 0.0), tot_bg(C, 0.0);
  double tot_wf = 0.0, tot_wb = 0.0;
  const auto x = maps.values();
  for (std::size_t b = 0; b < d.batch; ++b) {
    if (!annotated[b]) continue;
    image_sums(x.data() + b * C * d.cells, coverage.data() + b * d.cells, d, &img_fg[b * C],
               &img_bg[b * C], img_wf[b], img_wb[b]);
    for (std::size_t c = 0; c < C; ++c) {
      tot_fg[c] += img_fg[b * C + c];
      tot_bg[c] += img_bg[b * C + c];
    }
    tot_wf += img_wf[b];
    tot_wb += img_wb[b];
  }

  const std::size_t rows = folded ? d.batch : 1;
  std::vector<double> out(rows * 2 * C);
  std::vector<double> denom_f(rows), denom_b(rows);
  std::vector<char> excl(rows, 0);
  constexpr double kTiny = 1e-9;
  for (std::size_t r = 0; r < rows; ++r) {
    excl[r] = folded && annotated[r];
    if (excl[r] && n_annotated == 1) {
      throw LocalizerFoldError("folding out image " + std::to_string(r) +
                               " leaves no annotated image");
    }
    denom_f[r] = tot_wf - (excl[r] ? img_wf[r] : 0.0);
    denom_b[r] = tot_wb - (excl[r] ? img_wb[r] : 0.0);
    if (denom_b[r] <= kTiny) {
      throw DegenerateBackgroundError(
          "annotated boxes cover their whole images; no background cells to average");
    }
    if (denom_f[r] <= kTiny) throw std::invalid_argument("localizer_vectors: empty foreground");
    for (std::size_t c = 0; c < C; ++c) {
      const double sf = tot_fg[c] - (excl[r] ? img_fg[r * C + c] : 0.0);
      const double sb = tot_bg[c] - (excl[r] ? img_bg[r * C + c] : 0.0);
      out[(r * 2) * C + c] = sf / denom_f[r];
      out[(r * 2 + 1) * C + c] = sb / denom_b[r];
    }
  }

  diff::Shape shape = folded ? diff::Shape{d.batch, 2, C} : diff::Shape{2, C};
  std::vector<double> cov(coverage.begin(), coverage.end());
  return diff::make_result(
      std::move(shape), std::move(out), {maps},
      [d, rows, cov = std::move(cov), annotated, excl = std::move(excl),
       denom_f = std::move(denom_f), denom_b = std::move(denom_b)](Node& self) {
        const std::size_t C = d.channels;
        // U = sum over rows of G / denominator; each annotated image then
        // removes its own row when that row excluded it.
        std::vector<double> uf(C, 0.0), ub(C, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < C; ++c) {
            uf[c] += self.grad[(r * 2) * C + c] / denom_f[r];
            ub[c] += self.grad[(r * 2 + 1) * C + c] / denom_b[r];
          }
        }
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t b = 0; b < d.batch; ++b) {
          if (!annotated[b]) continue;
          const double* cv = cov.data() + b * d.cells;
          for (std::size_t c = 0; c < C; ++c) {
            double af = uf[c], ab = ub[c];
            if (b < rows && excl[b]) {
              af -= self.grad[(b * 2) * C + c] / denom_f[b];
              ab -= self.grad[(b * 2 + 1) * C + c] / denom_b[b];
            }
            double* gr = g.data() + (b * C + c) * d.cells;
            for (std::size_t i = 0; i < d.cells; ++i) gr[i] += cv[i] * af + (1.0 - cv[i]) * ab;
          }
        }
      });
}

}  // namespace

Tensor localizer_vectors(const Tensor& maps, std::span<const double> coverage,
                         const std::vector<bool>& annotated) {
  return vectors_op(maps, coverage, annotated, false);
}

Tensor folded_localizer_vectors(const Tensor& maps, std::span<const double> coverage,
                                const std::vector<bool>& annotated) {
  return vectors_op(maps, coverage, annotated, true);
}

Tensor predict_mask(const Tensor& maps, const Tensor& vectors) {
  const MapDims d = map_dims("predict_mask", maps);
  const std::size_t C = d.channels;
  bool per_image = false;
  if (vectors.rank() == 2) {
    if (vectors.dim(0) != 2) throw diff::ShapeError("predict_mask", "vector rows", 2, vectors.dim(0));
    if (vectors.dim(1) != C) throw diff::ShapeError("predict_mask", "channels", C, vectors.dim(1));
  } else if (vectors.rank() == 3) {
    per_image = true;
    if (vectors.dim(0) != d.batch) {
      throw diff::ShapeError("predict_mask", "batch", d.batch, vectors.dim(0));
    }
    if (vectors.dim(1) != 2) throw diff::ShapeError("predict_mask", "vector rows", 2, vectors.dim(1));
    if (vectors.dim(2) != C) throw diff::ShapeError("predict_mask", "channels", C, vectors.dim(2));
  } else {
    throw diff::ShapeError("predict_mask: vectors must be [2,C] or [B,2,C], got " +
                           diff::to_string(vectors.shape()));
  }
  const auto x = maps.values();
  const auto v = vectors.values();
  std::vector<double> out(d.batch * d.cells);
  for (std::size_t b = 0; b < d.batch; ++b) {
    const double* fg = v.data() + (per_image ? b * 2 * C : 0);
    const double* bg = fg + C;
    const double* m = x.data() + b * C * d.cells;
    for (std::size_t i = 0; i < d.cells; ++i) {
      double z = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double e = m[c * d.cells + i];
        z += (e - bg[c]) * (e - bg[c]) - (e - fg[c]) * (e - fg[c]);
      }
      out[b * d.cells + i] = sigmoid(z);
    }
  }
  return diff::make_result(
      {d.batch, maps.dim(2), maps.dim(3)}, std::move(out), {maps, vectors},
      [d, per_image](Node& self) {
        Node& mn = *self.parents[0];
        Node& vn = *self.parents[1];
        const std::size_t C = d.channels;
        double* gx = mn.requires_grad ? mn.grad_buffer().data() : nullptr;
        double* gv = vn.requires_grad ? vn.grad_buffer().data() : nullptr;
        for (std::size_t b = 0; b < d.batch; ++b) {
          const std::size_t voff = per_image ? b * 2 * C : 0;
          const double* fg = vn.value.data() + voff;
          const double* bg = fg + C;
          const double* m = mn.value.data() + b * C * d.cells;
          for (std::size_t i = 0; i < d.cells; ++i) {
            const double s = self.value[b * d.cells + i];
            const double dz = self.grad[b * d.cells + i] * s * (1.0 - s);
            if (dz == 0.0) continue;
            for (std::size_t c = 0; c < C; ++c) {
              const double e = m[c * d.cells + i];
              if (gx) gx[(b * C + c) * d.cells + i] += dz * 2.0 * (fg[c] - bg[c]);
              if (gv) {
                gv[voff + c] += dz * 2.0 * (e - fg[c]);
                gv[voff + C + c] -= dz * 2.0 * (e - bg[c]);
              }
            }
          }
        }
      });
}

namespace {

void check_mask(const std::string& op, const Tensor& maps, const Tensor& mask) {
  diff::expect_rank(op + " mask", mask, 3);
  if (mask.dim(0) != maps.dim(0)) throw diff::ShapeError(op, "batch", maps.dim(0), mask.dim(0));
  if (mask.dim(1) != maps.dim(2)) throw diff::ShapeError(op, "height", maps.dim(2), mask.dim(1));
  if (mask.dim(2) != maps.dim(3)) throw diff::ShapeError(op, "width", maps.dim(3), mask.dim(2));
}

}  // namespace

Tensor apply_mask(const Tensor& maps, const Tensor& mask, bool inverse) {
  const MapDims d = map_dims("apply_mask", maps);
  check_mask("apply_mask", maps, mask);
  const auto x = maps.values();
  const auto m = mask.values();
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < d.channels; ++c) {
      const std::size_t off = (b * d.channels + c) * d.cells;
      for (std::size_t i = 0; i < d.cells; ++i) {
        const double w = inverse ? 1.0 - m[b * d.cells + i] : m[b * d.cells + i];
        out[off + i] = x[off + i] * w;
      }
    }
  }
  return diff::make_result(maps.shape(), std::move(out), {maps, mask}, [d, inverse](Node& self) {
    Node& xn = *self.parents[0];
    Node& mn = *self.parents[1];
    double* gx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
    double* gm = mn.requires_grad ? mn.grad_buffer().data() : nullptr;
    const double sign = inverse ? -1.0 : 1.0;
    for (std::size_t b = 0; b < d.batch; ++b) {
      for (std::size_t c = 0; c < d.channels; ++c) {
        const std::size_t off = (b * d.channels + c) * d.cells;
        for (std::size_t i = 0; i < d.cells; ++i) {
          const double m = mn.value[b * d.cells + i];
          const double g = self.grad[off + i];
          if (gx) gx[off + i] += g * (inverse ? 1.0 - m : m);
          if (gm) gm[b * d.cells + i] += sign * g * xn.value[off + i];
        }
      }
    }
  });
}

std::string pool_normalization_name(PoolNormalization n) {
  return n == PoolNormalization::MaskSum ? "mask_sum" : "cell_count";
}

PoolNormalization pool_normalization_from_name(const std::string& name) {
  if (name == "mask_sum") return PoolNormalization::MaskSum;
  if (name == "cell_count") return PoolNormalization::CellCount;
  throw std::invalid_argument("unknown pool normalization '" + name + "' (mask_sum, cell_count)");
}

Tensor fg_bg_pool(const Tensor& maps, const Tensor& mask, PoolNormalization normalization) {
  const MapDims d = map_dims("fg_bg_pool", maps);
  check_mask("fg_bg_pool", maps, mask);
  const std::size_t C = d.channels;
  const double cells = static_cast<double>(d.cells);
  const bool by_mask = normalization == PoolNormalization::MaskSum;
  const auto x = maps.values();
  const auto m = mask.values();
  std::vector<double> out(d.batch * 2 * C);
  std::vector<double> fg_weight(d.batch, cells), bg_weight(d.batch, cells);
  for (std::size_t b = 0; b < d.batch; ++b) {
    const double* mb = m.data() + b * d.cells;
    if (by_mask) {
      double s = 0.0;
      for (std::size_t i = 0; i < d.cells; ++i) s += mb[i];
      fg_weight[b] = std::max(s, kMinPoolWeight);
      bg_weight[b] = std::max(cells - s, kMinPoolWeight);
    }
    for (std::size_t c = 0; c < C; ++c) {
      const double* row = x.data() + (b * C + c) * d.cells;
      double f = 0.0, g = 0.0;
      for (std::size_t i = 0; i < d.cells; ++i) {
        f += row[i] * mb[i];
        g += row[i] * (1.0 - mb[i]);
      }
      out[b * 2 * C + c] = f / fg_weight[b];
      out[b * 2 * C + C + c] = g / bg_weight[b];
    }
  }
  // With MaskSum the averages also move with the mask through their weights.
  std::vector<double> pooled;
  if (by_mask) pooled = out;
  return diff::make_result(
      {d.batch, 2 * C}, std::move(out), {maps, mask},
      [d, fg_weight = std::move(fg_weight), bg_weight = std::move(bg_weight),
       pooled = std::move(pooled)](Node& self) {
        Node& xn = *self.parents[0];
        Node& mn = *self.parents[1];
        const std::size_t C = d.channels;
        double* gx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
        double* gm = mn.requires_grad ? mn.grad_buffer().data() : nullptr;
        for (std::size_t b = 0; b < d.batch; ++b) {
          for (std::size_t c = 0; c < C; ++c) {
            const double gf = self.grad[b * 2 * C + c] / fg_weight[b];
            const double gb = self.grad[b * 2 * C + C + c] / bg_weight[b];
            const double pf = pooled.empty() ? 0.0 : pooled[b * 2 * C + c];
            const double pb = pooled.empty() ? 0.0 : pooled[b * 2 * C + C + c];
            const std::size_t off = (b * C + c) * d.cells;
            for (std::size_t i = 0; i < d.cells; ++i) {
              const double m = mn.value[b * d.cells + i];
              const double xv = xn.value[off + i];
              if (gx) gx[off + i] += gf * m + gb * (1.0 - m);
              if (gm) gm[b * d.cells + i] += gf * (xv - pf) - gb * (xv - pb);
            }
          }
        }
      });
}

LearnedVectors::LearnedVectors(std::size_t channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(2 * channels);
  for (auto& x : v) x = dist(rng);
  vectors_ = Tensor({2, channels}, std::move(v), true);
}

FgBgVectors LearnedVectors::snapshot() const {
  const std::size_t C = vectors_.dim(1);
  const auto v = vectors_.values();
  FgBgVectors out;
  out.foreground.assign(v.begin(), v.begin() + static_cast<long>(C));
  out.background.assign(v.begin() + static_cast<long>(C), v.end());
  out.foreground_weight = 1.0;
  out.background_weight = 1.0;
  return out;
}

void write_mask_pgm(const std::filesystem::path& path, std::span<const double> mask,
                    std::size_t width, std::size_t height, std::size_t upscale) {
  if (mask.size() != width * height) {
    throw diff::ShapeError("write_mask_pgm", "cells", width * height, mask.size());
  }
  upscale = std::max<std::size_t>(upscale, 1);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::size_t W = width * upscale, H = height * upscale;
  out << "P5\n" << W << ' ' << H << "\n255\n";
  std::vector<unsigned char> row(W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double m = std::clamp(mask[(y / upscale) * width + x / upscale], 0.0, 1.0);
      row[x] = static_cast<unsigned char>(std::lround(m * 255.0));
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(W));
  }
}

}  // namespace fewloc::localizer

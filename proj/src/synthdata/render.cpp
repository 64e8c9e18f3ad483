#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fewloc/common/seed.hpp"
#include "fewloc/synthdata/synthdata.hpp"

namespace fewloc::synth {

namespace {

constexpr std::array<const char*, kFamilyCount> kFamilyNames = {
    "ellipse", "rectangle", "cross", "ring", "wedge", "diamond", "triangle"};
constexpr std::array<const char*, kTextureCount> kTextureNames = {"hstripes", "vstripes", "checker",
                                                                  "concentric"};
constexpr std::array<int, 2> kPeriods = {4, 8};

// Seed streams inside one image.
constexpr std::uint64_t kTargetStream = 1;
constexpr std::uint64_t kBackgroundStream = 2;
constexpr std::uint64_t kDistractorStream = 3;

}  // namespace

const std::array<Rgb, kPaletteSize>& palette() {
  static const std::array<Rgb, kPaletteSize> colors = {{
      {0.90, 0.12, 0.10},  // red
      {0.10, 0.70, 0.20},  // green
      {0.15, 0.25, 0.90},  // blue
      {0.95, 0.85, 0.10},  // yellow
      {0.80, 0.15, 0.80},  // magenta
      {0.10, 0.80, 0.85},  // cyan
      {0.95, 0.95, 0.95},  // white
      {0.95, 0.50, 0.05},  // orange
  }};
  return colors;
}

std::string family_name(ShapeFamily family) { return kFamilyNames.at(static_cast<std::size_t>(family)); }

ShapeFamily family_from_name(const std::string& name) {
  for (std::size_t i = 0; i < kFamilyCount; ++i) {
    if (name == kFamilyNames[i]) return static_cast<ShapeFamily>(i);
  }
  throw ConfigError("unknown shape family '" + name + "'");
}

std::string texture_name(Texture texture) {
  return kTextureNames.at(static_cast<std::size_t>(texture));
}

Texture texture_from_name(const std::string& name) {
  for (std::size_t i = 0; i < kTextureCount; ++i) {
    if (name == kTextureNames[i]) return static_cast<Texture>(i);
  }
  throw ConfigError("unknown texture '" + name + "'");
}

std::vector<ClassSpec> make_class_specs(std::size_t classes, std::uint64_t seed) {
  struct Fill {
    Texture texture;
    int period, a, b;
  };
  std::vector<Fill> fills;
  for (std::size_t t = 0; t < kTextureCount; ++t)
    for (int period : kPeriods)
      for (int a = 0; a < static_cast<int>(kPaletteSize); ++a)
        for (int b = a + 1; b < static_cast<int>(kPaletteSize); ++b)
          fills.push_back({static_cast<Texture>(t), period, a, b});
  const std::size_t capacity = fills.size() * kFamilyCount;
  if (classes == 0 || classes > capacity) {
    throw ConfigError("class count must be in [1," + std::to_string(capacity) + "], got " +
                      std::to_string(classes));
  }
  std::vector<std::vector<Fill>> per_family(kFamilyCount, fills);
  for (std::size_t f = 0; f < kFamilyCount; ++f) {
    std::mt19937_64 rng(derive_seed(seed, 0xc1a55, f));
    std::shuffle(per_family[f].begin(), per_family[f].end(), rng);
  }
  std::vector<ClassSpec> out(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    const std::size_t f = k % kFamilyCount;
    const Fill& fill = per_family[f][k / kFamilyCount];
    out[k] = {static_cast<int>(k), static_cast<ShapeFamily>(f), fill.texture, fill.period, fill.a,
              fill.b};
  }
  return out;
}

std::vector<std::size_t> sample_class_sizes(std::size_t classes, std::size_t min_size,
                                            std::size_t max_size, std::uint64_t seed) {
  if (min_size == 0) throw ConfigError("minimum class size must be positive");
  if (min_size > max_size) {
    throw ConfigError("minimum class size " + std::to_string(min_size) + " exceeds maximum " +
                      std::to_string(max_size));
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(std::log(static_cast<double>(min_size)),
                                           std::log(static_cast<double>(max_size)));
  std::vector<std::size_t> out(classes);
  for (auto& s : out) {
    s = min_size == max_size ? min_size : static_cast<std::size_t>(std::lround(std::exp(u(rng))));
    s = std::clamp(s, min_size, max_size);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct Canvas {
  std::size_t size;
  std::vector<double> rgb;  // [size*size*3]

  void put(std::size_t x, std::size_t y, const Rgb& c) {
    double* p = &rgb[(y * size + x) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }
};

// u, v in [-1,1] across the shape's square.
bool inside(ShapeFamily family, double u, double v) {
  const double r2 = u * u + v * v;
  switch (family) {
    case ShapeFamily::Ellipse:
      return r2 <= 1.0;
    case ShapeFamily::Rectangle:
      return std::abs(u) <= 1.0 && std::abs(v) <= 0.6;
    case ShapeFamily::Cross:
      return std::abs(u) <= 0.35 || std::abs(v) <= 0.35;
    case ShapeFamily::Ring:
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    case ShapeFamily::Wedge:
      return r2 <= 1.0 && !(u > 0.0 && std::abs(v) < 0.7 * u);
    case ShapeFamily::Diamond:
      return std::abs(u) + std::abs(v) <= 1.0;
    case ShapeFamily::Triangle:
      return std::abs(u) <= (v + 1.0) * 0.5;
  }
  return false;
}

bool texture_phase(Texture texture, int period, double px, double py, double cx, double cy) {
  const double half = period * 0.5;
  switch (texture) {
    case Texture::HorizontalStripes:
      return static_cast<long>(std::floor(py / half)) % 2 == 0;
    case Texture::VerticalStripes:
      return static_cast<long>(std::floor(px / half)) % 2 == 0;
    case Texture::Checker:
      return (static_cast<long>(std::floor(px / half)) + static_cast<long>(std::floor(py / half))) %
                 2 ==
             0;
    case Texture::Concentric:
      return static_cast<long>(std::floor(std::hypot(px - cx, py - cy) / half)) % 2 == 0;
  }
  return true;
}

struct Placement {
  long x0, y0, side;
  double phase_x, phase_y;
  double brightness;
};

Placement place(std::mt19937_64& rng, double scale, std::size_t size) {
  Placement p{};
  p.side = std::max<long>(3, std::lround(scale * static_cast<double>(size)));
  std::uniform_int_distribution<long> pos(0, static_cast<long>(size) - p.side);
  p.x0 = pos(rng);
  p.y0 = pos(rng);
  std::uniform_real_distribution<double> phase(0.0, 8.0);
  p.phase_x = phase(rng);
  p.phase_y = phase(rng);
  p.brightness = std::uniform_real_distribution<double>(0.85, 1.15)(rng);
  return p;
}

// Draws one textured shape; returns the tight box of the pixels it set.
template <typename Visit>
void for_each_pixel(ShapeFamily family, const Placement& p, std::size_t size, Visit&& visit) {
  const double side = static_cast<double>(p.side);
  for (long y = p.y0; y < p.y0 + p.side; ++y) {
    for (long x = p.x0; x < p.x0 + p.side; ++x) {
      if (x < 0 || y < 0 || x >= static_cast<long>(size) || y >= static_cast<long>(size)) continue;
      const double u = ((x - p.x0) + 0.5) / side * 2.0 - 1.0;
      const double v = ((y - p.y0) + 0.5) / side * 2.0 - 1.0;
      if (inside(family, u, v)) visit(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
    }
  }
}

void draw(Canvas& canvas, const ClassSpec& spec, const Placement& p) {
  const auto& pal = palette();
  Rgb a = pal[static_cast<std::size_t>(spec.color_a)];
  Rgb b = pal[static_cast<std::size_t>(spec.color_b)];
  for (auto& c : a) c = std::min(1.0, c * p.brightness);
  for (auto& c : b) c = std::min(1.0, c * p.brightness);
  const double cx = p.side * 0.5 + p.phase_x, cy = p.side * 0.5 + p.phase_y;
  for_each_pixel(spec.family, p, canvas.size, [&](std::size_t x, std::size_t y) {
    const double px = static_cast<double>(static_cast<long>(x) - p.x0) + p.phase_x;
    const double py = static_cast<double>(static_cast<long>(y) - p.y0) + p.phase_y;
    canvas.put(x, y, texture_phase(spec.texture, spec.period, px, py, cx, cy) ? a : b);
  });
}

// Clutter shares shapes and colours with the classes but is filled with
// per-pixel noise instead of a regular pattern.
void draw_speckled(Canvas& canvas, const ClassSpec& spec, const Placement& p, std::mt19937_64& rng) {
  const auto& pal = palette();
  const Rgb& a = pal[static_cast<std::size_t>(spec.color_a)];
  const Rgb& b = pal[static_cast<std::size_t>(spec.color_b)];
  std::bernoulli_distribution coin(0.5);
  for_each_pixel(spec.family, p, canvas.size,
                 [&](std::size_t x, std::size_t y) { canvas.put(x, y, coin(rng) ? a : b); });
}

void paint_background(Canvas& canvas, std::mt19937_64& rng) {
  // Bilinear blend of a coarse grid of muted random colours, plus pixel noise.
  constexpr std::size_t kGrid = 5;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::array<Rgb, kGrid * kGrid> grid;
  for (auto& g : grid) {
    const Rgb& base = palette()[std::uniform_int_distribution<std::size_t>(0, kPaletteSize - 1)(rng)];
    const double mix = 0.3 + 0.4 * u(rng);
    for (std::size_t c = 0; c < 3; ++c) g[c] = 0.5 * (mix * base[c] + (1.0 - mix) * 0.45);
  }
  const std::size_t n = canvas.size;
  const double step = static_cast<double>(n - 1) / (kGrid - 1);
  for (std::size_t y = 0; y < n; ++y) {
    const double gy = y / step;
    const std::size_t iy = std::min<std::size_t>(static_cast<std::size_t>(gy), kGrid - 2);
    const double fy = gy - iy;
    for (std::size_t x = 0; x < n; ++x) {
      const double gx = x / step;
      const std::size_t ix = std::min<std::size_t>(static_cast<std::size_t>(gx), kGrid - 2);
      const double fx = gx - ix;
      Rgb c;
      for (std::size_t k = 0; k < 3; ++k) {
        const double top = grid[iy * kGrid + ix][k] * (1 - fx) + grid[iy * kGrid + ix + 1][k] * fx;
        const double bot =
            grid[(iy + 1) * kGrid + ix][k] * (1 - fx) + grid[(iy + 1) * kGrid + ix + 1][k] * fx;
        c[k] = std::clamp(top * (1 - fy) + bot * fy + (u(rng) - 0.5) * 0.16, 0.0, 1.0);
      }
      canvas.put(x, y, c);
    }
  }
}

ClassSpec random_distractor(const ClassSpec& target, std::mt19937_64& rng) {
  ClassSpec d;
  std::uniform_int_distribution<int> fam(0, static_cast<int>(kFamilyCount) - 2);
  int f = fam(rng);
  if (f >= static_cast<int>(target.family)) ++f;
  d.family = static_cast<ShapeFamily>(f);
  d.texture = static_cast<Texture>(std::uniform_int_distribution<int>(0, kTextureCount - 1)(rng));
  d.period = kPeriods[std::uniform_int_distribution<std::size_t>(0, kPeriods.size() - 1)(rng)];
  std::uniform_int_distribution<int> col(0, static_cast<int>(kPaletteSize) - 1);
  d.color_a = col(rng);
  do {
    d.color_b = col(rng);
  } while (d.color_b == d.color_a);
  return d;
}

void check_scale(double scale) {
  if (!(scale >= 0.05 && scale <= 0.9)) {
    throw ConfigError("target scale " + std::to_string(scale) + " outside [0.05, 0.9]");
  }
}

}  // namespace

LabeledImage render_image(const ClassSpec& spec, double scale, std::size_t clutter,
                          std::uint64_t seed, const RenderOptions& options) {
  check_scale(scale);
  const std::size_t n = options.image_size;
  Canvas canvas{n, std::vector<double>(n * n * 3, 0.0)};

  std::mt19937_64 bg_rng(derive_seed(seed, kBackgroundStream));
  paint_background(canvas, bg_rng);

  std::mt19937_64 d_rng(derive_seed(seed, kDistractorStream));
  const std::size_t distractors = std::uniform_int_distribution<std::size_t>(0, clutter)(d_rng);
  for (std::size_t i = 0; i < distractors; ++i) {
    ClassSpec d = random_distractor(spec, d_rng);
    const double s = std::uniform_real_distribution<double>(0.15, 0.5)(d_rng);
    draw_speckled(canvas, d, place(d_rng, s, n), d_rng);
  }

  std::mt19937_64 t_rng(derive_seed(seed, kTargetStream));
  const Placement p = place(t_rng, scale, n);
  draw(canvas, spec, p);

  LabeledImage img;
  img.width = img.height = n;
  img.class_id = spec.class_id;
  long x0 = static_cast<long>(n), y0 = static_cast<long>(n), x1 = -1, y1 = -1;
  for_each_pixel(spec.family, p, n, [&](std::size_t x, std::size_t y) {
    x0 = std::min<long>(x0, static_cast<long>(x));
    y0 = std::min<long>(y0, static_cast<long>(y));
    x1 = std::max<long>(x1, static_cast<long>(x));
    y1 = std::max<long>(y1, static_cast<long>(y));
  });
  img.box = {0, static_cast<int>(x0), static_cast<int>(y0), static_cast<int>(x1 + 1),
             static_cast<int>(y1 + 1)};
  img.pixels.resize(canvas.rgb.size());
  for (std::size_t i = 0; i < canvas.rgb.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(canvas.rgb[i], 0.0, 1.0) * 255.0));
  }
  return img;
}

std::vector<bool> render_target_mask(const ClassSpec& spec, double scale, std::uint64_t seed,
                                     std::size_t image_size) {
  check_scale(scale);
  std::mt19937_64 t_rng(derive_seed(seed, kTargetStream));
  const Placement p = place(t_rng, scale, image_size);
  std::vector<bool> mask(image_size * image_size, false);
  for_each_pixel(spec.family, p, image_size,
                 [&](std::size_t x, std::size_t y) { mask[y * image_size + x] = true; });
  return mask;
}

// ---------------------------------------------------------------------------

void DatasetConfig::validate() const {
  if (classes == 0) throw ConfigError("dataset needs at least one class");
  if (min_class_size == 0 || min_class_size > max_class_size) {
    throw ConfigError("class size bounds [" + std::to_string(min_class_size) + "," +
                      std::to_string(max_class_size) + "] are invalid");
  }
  if (image_size < 16 || image_size % 16 != 0) {
    throw ConfigError("image size must be a positive multiple of 16");
  }
  if (!(min_area > 0.0 && min_area <= max_area && std::sqrt(min_area) >= 0.05 &&
        std::sqrt(max_area) <= 0.9)) {
    throw ConfigError("target area range must satisfy 0.0025 <= min <= max <= 0.81");
  }
}

std::size_t Dataset::class_size(int class_id) const {
  return static_cast<std::size_t>(std::count_if(
      images.begin(), images.end(), [&](const LabeledImage& im) { return im.class_id == class_id; }));
}

std::vector<std::vector<std::size_t>> Dataset::images_by_class() const {
  std::vector<std::vector<std::size_t>> out(classes.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.at(static_cast<std::size_t>(images[i].class_id)).push_back(i);
  }
  return out;
}

Dataset generate_dataset(const DatasetConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  ds.classes = make_class_specs(config.classes, config.seed);
  const auto sizes = sample_class_sizes(config.classes, config.min_class_size,
                                        config.max_class_size, derive_seed(config.seed, 0x517e));
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  ds.images.reserve(total);
  RenderOptions opts{config.image_size};
  std::size_t index = 0;
  for (std::size_t k = 0; k < config.classes; ++k) {
    for (std::size_t i = 0; i < sizes[k]; ++i, ++index) {
      const std::uint64_t seed = derive_seed(config.seed, 0x1a6e, index);
      std::mt19937_64 rng(seed);
      const double area = std::uniform_real_distribution<double>(config.min_area, config.max_area)(rng);
      LabeledImage img = render_image(ds.classes[k], std::sqrt(area), config.clutter, seed, opts);
      img.box.image_id = index;
      ds.images.push_back(std::move(img));
    }
  }
  return ds;
}

}  // namespace fewloc::synth

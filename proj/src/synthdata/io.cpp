#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "fewloc/synthdata/synthdata.hpp"

namespace fewloc::synth {

using Json = nlohmann::ordered_json;

void write_ppm(const std::filesystem::path& path, const LabeledImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
}

void read_ppm(const std::filesystem::path& path, LabeledImage& image) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0) {
    throw std::runtime_error(path.string() + " is not an 8-bit binary pixmap");
  }
  in.get();
  image.width = w;
  image.height = h;
  image.pixels.resize(w * h * 3);
  in.read(reinterpret_cast<char*>(image.pixels.data()),
          static_cast<std::streamsize>(image.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(image.pixels.size())) {
    throw std::runtime_error(path.string() + " is truncated");
  }
}

namespace {

std::string image_file(std::size_t id) {
  std::ostringstream s;
  s << "images/" << std::setw(6) << std::setfill('0') << id << ".ppm";
  return s.str();
}

Json dataset_config_json(const DatasetConfig& c) {
  return Json{{"classes", c.classes},
              {"min_class_size", c.min_class_size},
              {"max_class_size", c.max_class_size},
              {"image_size", c.image_size},
              {"clutter", c.clutter},
              {"min_area", c.min_area},
              {"max_area", c.max_area},
              {"seed", c.seed}};
}

Json split_config_json(const SplitConfig& c) {
  Json fams = Json::array();
  for (auto f : c.evaluation_families) fams.push_back(family_name(f));
  return Json{{"representation_fraction", c.representation_fraction},
              {"reference_fraction", c.reference_fraction},
              {"trials", c.trials},
              {"annotation_fraction", c.annotation_fraction},
              {"mode", c.mode == SplitMode::Random ? "random" : "supercategory"},
              {"evaluation_families", fams},
              {"seed", c.seed}};
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset,
                   const BenchmarkSplit& split, const SplitConfig& split_config) {
  std::filesystem::create_directories(dir / "images");
  Json classes = Json::array();
  for (const auto& c : dataset.classes) {
    classes.push_back({{"id", c.class_id},
                       {"family", family_name(c.family)},
                       {"supercategory", c.supercategory()},
                       {"texture", texture_name(c.texture)},
                       {"period", c.period},
                       {"colors", {c.color_a, c.color_b}}});
  }
  Json images = Json::array();
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    const auto& im = dataset.images[i];
    const std::string file = image_file(i);
    write_ppm(dir / file, im);
    Json flags = Json::array();
    for (std::size_t t = 0; t < split.trials(); ++t) flags.push_back(split.is_annotated(t, i) ? 1 : 0);
    images.push_back({{"file", file},
                      {"class", im.class_id},
                      {"supercategory", dataset.classes.at(static_cast<std::size_t>(im.class_id)).supercategory()},
                      {"box", {im.box.x0, im.box.y0, im.box.x1, im.box.y1}},
                      {"role", role_name(split.roles.at(i))},
                      {"annotated", flags}});
  }
  Json manifest{{"format_version", kManifestVersion},
                {"dataset", dataset_config_json(dataset.config)},
                {"split", split_config_json(split_config)},
                {"representation_classes", split.representation_classes},
                {"evaluation_classes", split.evaluation_classes},
                {"classes", classes},
                {"images", images}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << manifest.dump(1) << '\n';
}

StoredDataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
  const Json m = Json::parse(in);
  const int version = m.at("format_version").get<int>();
  if (version != kManifestVersion) {
    throw std::runtime_error("manifest format version " + std::to_string(version) +
                             " is not supported (expected " + std::to_string(kManifestVersion) + ")");
  }
  StoredDataset out;
  const Json& dc = m.at("dataset");
  auto& cfg = out.dataset.config;
  cfg.classes = dc.at("classes").get<std::size_t>();
  cfg.min_class_size = dc.at("min_class_size").get<std::size_t>();
  cfg.max_class_size = dc.at("max_class_size").get<std::size_t>();
  cfg.image_size = dc.at("image_size").get<std::size_t>();
  cfg.clutter = dc.at("clutter").get<std::size_t>();
  cfg.min_area = dc.at("min_area").get<double>();
  cfg.max_area = dc.at("max_area").get<double>();
  cfg.seed = dc.at("seed").get<std::uint64_t>();

  const Json& sc = m.at("split");
  auto& scfg = out.split_config;
  scfg.representation_fraction = sc.at("representation_fraction").get<double>();
  scfg.reference_fraction = sc.at("reference_fraction").get<double>();
  scfg.trials = sc.at("trials").get<std::size_t>();
  scfg.annotation_fraction = sc.at("annotation_fraction").get<double>();
  scfg.mode = sc.at("mode").get<std::string>() == "random" ? SplitMode::Random
                                                          : SplitMode::Supercategory;
  for (const auto& f : sc.at("evaluation_families")) {
    scfg.evaluation_families.push_back(family_from_name(f.get<std::string>()));
  }
  scfg.seed = sc.at("seed").get<std::uint64_t>();

  for (const auto& c : m.at("classes")) {
    ClassSpec s;
    s.class_id = c.at("id").get<int>();
    s.family = family_from_name(c.at("family").get<std::string>());
    s.texture = texture_from_name(c.at("texture").get<std::string>());
    s.period = c.at("period").get<int>();
    s.color_a = c.at("colors").at(0).get<int>();
    s.color_b = c.at("colors").at(1).get<int>();
    out.dataset.classes.push_back(s);
  }
  out.split.representation_classes = m.at("representation_classes").get<std::vector<int>>();
  out.split.evaluation_classes = m.at("evaluation_classes").get<std::vector<int>>();
  out.split.annotated.assign(scfg.trials, {});
  const Json& images = m.at("images");
  out.dataset.images.resize(images.size());
  out.split.roles.resize(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Json& j = images[i];
    LabeledImage& im = out.dataset.images[i];
    im.class_id = j.at("class").get<int>();
    const auto& b = j.at("box");
    im.box = {i, b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
    read_ppm(dir / j.at("file").get<std::string>(), im);
    out.split.roles[i] = role_from_name(j.at("role").get<std::string>());
    const auto& flags = j.at("annotated");
    for (std::size_t t = 0; t < flags.size() && t < scfg.trials; ++t) {
      if (flags[t].get<int>() != 0) out.split.annotated[t].push_back(i);
    }
  }
  return out;
}

}  // namespace fewloc::synth

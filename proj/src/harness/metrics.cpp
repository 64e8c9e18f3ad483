#include "fewloc/harness/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

namespace fewloc::harness {

using Json = nlohmann::ordered_json;

Accuracy summarize(std::span<const ImageOutcome> images) {
  Accuracy out;
  if (images.empty()) return out;
  for (const auto& im : images) {
    out.top1_image += im.top1;
    out.top5_image += im.top5;
  }
  out.top1_image /= static_cast<double>(images.size());
  out.top5_image /= static_cast<double>(images.size());
  const auto table = per_class_table(images);
  for (const auto& c : table) {
    out.top1_class += c.top1;
    out.top5_class += c.top5;
  }
  out.top1_class /= static_cast<double>(table.size());
  out.top5_class /= static_cast<double>(table.size());
  return out;
}

std::vector<ClassOutcome> per_class_table(std::span<const ImageOutcome> images) {
  std::map<int, ClassOutcome> by_class;
  for (const auto& im : images) {
    auto& c = by_class[im.class_id];
    c.class_id = im.class_id;
    c.queries += 1;
    c.top1 += im.top1;
    c.top5 += im.top5;
  }
  std::vector<ClassOutcome> out;
  for (auto& [id, c] : by_class) {
    c.top1 /= static_cast<double>(c.queries);
    c.top5 /= static_cast<double>(c.queries);
    out.push_back(c);
  }
  return out;
}

double t_interval_half_width(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n < 2) return 0.0;
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  boost::math::students_t dist(static_cast<double>(n - 1));
  const double t = boost::math::quantile(boost::math::complement(dist, 0.025));
  return t * sd / std::sqrt(static_cast<double>(n));
}

MetricsReport combine_trials(const std::vector<MetricsReport>& trials) {
  if (trials.empty()) throw std::invalid_argument("no trials to combine");
  MetricsReport out;
  out.model = trials.front().model;
  out.top_k = trials.front().top_k;
  out.images = trials.front().images;
  for (auto& im : out.images) im.top1 = im.top5 = 0.0;
  for (const auto& t : trials) {
    if (t.images.size() != out.images.size()) {
      throw std::invalid_argument("trials cover different query sets");
    }
    for (std::size_t i = 0; i < out.images.size(); ++i) {
      if (t.images[i].image_id != out.images[i].image_id) {
        throw std::invalid_argument("trials list query images in different orders");
      }
      out.images[i].top1 += t.images[i].top1;
      out.images[i].top5 += t.images[i].top5;
    }
    out.trials.push_back(t.mean);
  }
  const double n = static_cast<double>(trials.size());
  for (auto& im : out.images) {
    im.top1 /= n;
    im.top5 /= n;
  }
  out.per_class = per_class_table(out.images);

  auto column = [&](double Accuracy::*field) {
    std::vector<double> v;
    for (const auto& a : out.trials) v.push_back(a.*field);
    return v;
  };
  Accuracy half;
  for (double Accuracy::*field : {&Accuracy::top1_image, &Accuracy::top1_class,
                                  &Accuracy::top5_image, &Accuracy::top5_class}) {
    const auto v = column(field);
    out.mean.*field = std::accumulate(v.begin(), v.end(), 0.0) / n;
    half.*field = t_interval_half_width(v);
  }
  if (trials.size() >= 2) out.ci_half_width = half;
  return out;
}

Regression ols(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw RegressionError("covariate and response differ in length");
  const std::size_t n = x.size();
  if (n < 3) throw RegressionError("regression needs at least three points, got " + std::to_string(n));
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0) throw RegressionError("covariate is constant");
  Regression r;
  r.points = n;
  r.slope = sxy / sxx;
  r.intercept = my - r.slope * mx;
  if (syy > 0.0) {
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = y[i] - (r.slope * x[i] + r.intercept);
      sse += e * e;
    }
    r.r2 = 1.0 - sse / syy;
  }
  return r;
}

Regression class_size_gain(const MetricsReport& base, const MetricsReport& improved,
                           const synth::Dataset& dataset) {
  if (base.per_class.size() != improved.per_class.size()) {
    throw RegressionError("reports cover different class sets");
  }
  std::vector<double> x, y;
  for (std::size_t k = 0; k < base.per_class.size(); ++k) {
    const auto& a = base.per_class[k];
    const auto& b = improved.per_class[k];
    if (a.class_id != b.class_id) throw RegressionError("reports cover different class sets");
    x.push_back(std::log(static_cast<double>(dataset.class_size(a.class_id))));
    y.push_back(b.top1 - a.top1);
  }
  return ols(x, y);
}

std::vector<BinGain> area_bin_gains(const MetricsReport& base, const MetricsReport& improved,
                                    double width, double upper) {
  if (base.images.size() != improved.images.size()) {
    throw RegressionError("reports cover different query images");
  }
  const auto bins = static_cast<std::size_t>(std::lround(upper / width));
  std::vector<BinGain> out(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lower = static_cast<double>(b) * width;
    out[b].upper = static_cast<double>(b + 1) * width;
  }
  for (std::size_t i = 0; i < base.images.size(); ++i) {
    const auto& a = base.images[i];
    const auto& b = improved.images[i];
    if (a.image_id != b.image_id) throw RegressionError("reports list query images differently");
    const auto bin = std::min(bins - 1, static_cast<std::size_t>(std::max(0.0, a.area_fraction / width)));
    out[bin].images += 1;
    out[bin].gain += b.top1 - a.top1;
  }
  for (auto& g : out) {
    if (g.images > 0) g.gain /= static_cast<double>(g.images);
  }
  return out;
}

namespace {

Json accuracy_json(const Accuracy& a) {
  return Json{{"top1_image", a.top1_image},
              {"top1_class", a.top1_class},
              {"top5_image", a.top5_image},
              {"top5_class", a.top5_class}};
}

}  // namespace

std::string metrics_json(const MetricsReport& report, const std::optional<Regression>& size_gain,
                         const std::vector<BinGain>& area_gains) {
  Json trials = Json::array();
  for (const auto& t : report.trials) trials.push_back(accuracy_json(t));
  Json classes = Json::array();
  for (const auto& c : report.per_class) {
    classes.push_back({{"class", c.class_id}, {"queries", c.queries}, {"top1", c.top1}, {"top5", c.top5}});
  }
  Json images = Json::array();
  for (const auto& im : report.images) {
    images.push_back({{"image", im.image_id},
                      {"class", im.class_id},
                      {"area_fraction", im.area_fraction},
                      {"top1", im.top1},
                      {"top5", im.top5}});
  }
  Json j{{"format_version", kMetricsFormatVersion},
         {"model", report.model},
         {"top_k", report.top_k},
         {"mean", accuracy_json(report.mean)},
         {"ci95_half_width", report.ci_half_width ? accuracy_json(*report.ci_half_width) : Json()},
         {"trials", trials}};
  if (size_gain) {
    j["class_size_gain"] = {{"slope", size_gain->slope},
                            {"intercept", size_gain->intercept},
                            {"r2", size_gain->r2},
                            {"points", size_gain->points}};
  }
  if (!area_gains.empty()) {
    Json bins = Json::array();
    for (const auto& g : area_gains) {
      bins.push_back({{"lower", g.lower}, {"upper", g.upper}, {"images", g.images}, {"gain", g.gain}});
    }
    j["area_gain"] = bins;
  }
  j["per_class"] = classes;
  j["images"] = images;
  return j.dump(1);
}

void write_metrics(const std::filesystem::path& path, const MetricsReport& report,
                   const std::optional<Regression>& size_gain, const std::vector<BinGain>& area_gains) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << metrics_json(report, size_gain, area_gains) << '\n';
}

}  // namespace fewloc::harness

#include "usam/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "usam/error.hpp"
#include "usam/image_io.hpp"

namespace usam {

namespace F = torch::nn::functional;
using nlohmann::json;

std::vector<std::string> default_class_names() { return {"background", "normal", "tumor"}; }

void CTVolume::validate() const {
  if (!hu.defined() || hu.dim() != 3) throw ShapeError("CT volume must be (slices, height, width)");
  if (hu.size(0) < 1) throw ShapeError("CT volume has no slices");
  if (hu.size(1) < 32 || hu.size(2) < 32) throw ShapeError("CT slices must be at least 32 x 32");
}

void LabelVolume::validate() const {
  if (!labels.defined() || labels.dim() != 3) throw ShapeError("label volume must be 3-D");
  if (class_names.size() < 2) throw InvalidValue("need at least background and one class");
  if (labels.numel() > 0) {
    const auto lo = labels.min().item<int64_t>();
    const auto hi = labels.max().item<int64_t>();
    if (lo < 0 || hi >= num_classes()) {
      throw InvalidValue("label id " + std::to_string(lo < 0 ? lo : hi) + " outside 0.." +
                         std::to_string(num_classes() - 1));
    }
  }
}

Window Window::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw InvalidValue("window must be center:width, got '" + text + "'");
  Window w;
  try {
    w.center = std::stod(text.substr(0, colon));
    w.width = std::stod(text.substr(colon + 1));
  } catch (const std::exception&) {
    throw InvalidValue("window must be center:width, got '" + text + "'");
  }
  if (!(w.width > 0)) throw InvalidValue("window width must be positive");
  return w;
}

torch::Tensor window_normalize(const torch::Tensor& hu, Window window) {
  if (!(window.width > 0)) throw InvalidValue("window width must be positive");
  auto values = hu.to(torch::kFloat32);
  auto bad = torch::logical_not(torch::isfinite(values));
  if (bad.any().item<bool>()) {
    auto idx = torch::nonzero(bad)[0];
    std::ostringstream os;
    os << "non-finite HU at index (";
    for (int64_t i = 0; i < idx.numel(); ++i) os << (i ? ", " : "") << idx[i].item<int64_t>();
    os << ")";
    throw InvalidValue(os.str());
  }
  const double lower = window.center - window.width / 2.0;
  return ((values - lower) / window.width).clamp(0.0, 1.0);
}

torch::Tensor window_normalize(const CTVolume& volume, Window window) {
  volume.validate();
  return window_normalize(volume.hu, window);
}

torch::Tensor resize_image(const torch::Tensor& image, int64_t height, int64_t width) {
  if (image.size(0) == height && image.size(1) == width) return image.to(torch::kFloat32).clone();
  auto out = F::interpolate(image.to(torch::kFloat32).unsqueeze(0).unsqueeze(0),
                            F::InterpolateFuncOptions()
                                .size(std::vector<int64_t>{height, width})
                                .mode(torch::kBilinear)
                                .align_corners(false));
  return out.squeeze(0).squeeze(0).clamp(0.0, 1.0);
}

torch::Tensor resize_label(const torch::Tensor& label, int64_t height, int64_t width) {
  if (label.size(0) == height && label.size(1) == width) return label.to(torch::kInt64).clone();
  auto out = F::interpolate(label.to(torch::kFloat32).unsqueeze(0).unsqueeze(0),
                            F::InterpolateFuncOptions()
                                .size(std::vector<int64_t>{height, width})
                                .mode(torch::kNearest));
  return out.squeeze(0).squeeze(0).round().to(torch::kInt64);
}

std::vector<SlicePair> build_slice_pairs(const CTVolume& volume, const LabelVolume& labels,
                                         Window window) {
  volume.validate();
  labels.validate();
  if (volume.hu.sizes() != labels.labels.sizes()) {
    throw ShapeError("volume and label shapes differ");
  }
  const auto normalized = window_normalize(volume.hu, window);
  const auto has_foreground = (labels.labels > 0).flatten(1).any(1);
  std::vector<SlicePair> pairs;
  for (int64_t s = 0; s < volume.hu.size(0); ++s) {
    if (!has_foreground[s].item<bool>()) continue;
    pairs.push_back({resize_image(normalized[s], kPairSize, kPairSize),
                     resize_label(labels.labels[s], kPairSize, kPairSize),
                     {volume.patient_id, s}});
  }
  if (pairs.empty()) {
    throw EmptyDatasetError("empty dataset: volume '" + volume.patient_id +
                            "' has no foreground slices");
  }
  return pairs;
}

AugmentParams draw_augment_params(std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> angle(-kMaxRotationDegrees, kMaxRotationDegrees);
  AugmentParams p;
  p.flip_horizontal = coin(rng);
  p.flip_vertical = coin(rng);
  p.angle_degrees = angle(rng);
  return p;
}

namespace {

torch::Tensor rotate(const torch::Tensor& plane, double degrees, bool nearest) {
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad);
  const double s = std::sin(rad);
  auto theta = torch::tensor({c, -s, 0.0, s, c, 0.0}, torch::kFloat32).view({1, 2, 3});
  auto input = plane.to(torch::kFloat32).unsqueeze(0).unsqueeze(0);
  auto grid = F::affine_grid(theta, {1, 1, plane.size(0), plane.size(1)}, false);
  auto opts = F::GridSampleFuncOptions().padding_mode(torch::kReflection).align_corners(false);
  if (nearest) {
    opts.mode(torch::kNearest);
  } else {
    opts.mode(torch::kBilinear);
  }
  auto out = F::grid_sample(input, grid, opts);
  return out.squeeze(0).squeeze(0);
}

}  // namespace

SlicePair apply_augment(const SlicePair& pair, const AugmentParams& params) {
  SlicePair out{pair.image, pair.label, pair.source};
  if (params.flip_horizontal) {
    out.image = out.image.flip({1});
    out.label = out.label.flip({1});
  }
  if (params.flip_vertical) {
    out.image = out.image.flip({0});
    out.label = out.label.flip({0});
  }
  // A zero angle is the identity; skip resampling so it stays bit-exact.
  if (params.angle_degrees != 0.0 && std::isfinite(params.angle_degrees)) {
    out.image = rotate(out.image, params.angle_degrees, false).clamp(0.0, 1.0);
    out.label = rotate(out.label, params.angle_degrees, true).round().to(torch::kInt64);
  }
  return out;
}

SlicePair augment(const SlicePair& pair, std::mt19937_64& rng) {
  return apply_augment(pair, draw_augment_params(rng));
}

void DatasetManifest::validate() const {
  std::set<std::pair<std::string, int64_t>> seen;
  for (const auto& p : pairs) {
    if (p.patient_id.empty() || p.patient_id.find('/') != std::string::npos) {
      throw InvalidValue("invalid patient id '" + p.patient_id + "'");
    }
    if (!seen.emplace(p.patient_id, p.slice_index).second) {
      throw InvalidValue("duplicate pair " + p.key());
    }
  }
  if (class_names.size() < 2) throw InvalidValue("manifest needs at least two classes");
  if (split != "train" && split != "test") throw InvalidValue("split must be train or test");
}

void check_disjoint(const DatasetManifest& a, const DatasetManifest& b) {
  std::set<std::pair<std::string, int64_t>> keys;
  for (const auto& p : a.pairs) keys.emplace(p.patient_id, p.slice_index);
  for (const auto& p : b.pairs) {
    if (keys.count({p.patient_id, p.slice_index})) {
      throw InvalidValue("manifests overlap at " + p.key());
    }
  }
}

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  dataset.manifest.validate();
  if (dataset.pairs.size() != dataset.manifest.pairs.size()) {
    throw ShapeError("dataset pairs and manifest entries differ in count");
  }
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "labels");

  json entries = json::array();
  for (size_t i = 0; i < dataset.pairs.size(); ++i) {
    const auto& pair = dataset.pairs[i];
    const auto& src = dataset.manifest.pairs[i];
    if (pair.image.size(0) != kPairSize || pair.image.size(1) != kPairSize) {
      throw ShapeError("slice pair " + src.key() + " is not 224 x 224");
    }
    GrayImage image{kPairSize, kPairSize, 16, {}};
    auto quantized = (pair.image.to(torch::kFloat64).clamp(0.0, 1.0) * 65535.0)
                         .round()
                         .to(torch::kInt32)
                         .contiguous();
    image.pixels.assign(quantized.data_ptr<int32_t>(),
                        quantized.data_ptr<int32_t>() + quantized.numel());
    write_png(dir / DatasetManifest::image_path(src), image);

    GrayImage label{kPairSize, kPairSize, 8, {}};
    auto ids = pair.label.to(torch::kInt32).contiguous();
    label.pixels.assign(ids.data_ptr<int32_t>(), ids.data_ptr<int32_t>() + ids.numel());
    write_png(dir / DatasetManifest::label_path(src), label);

    entries.push_back({{"patient_id", src.patient_id},
                       {"slice_index", src.slice_index},
                       {"image", DatasetManifest::image_path(src)},
                       {"label", DatasetManifest::label_path(src)}});
  }
  json manifest = {{"split", dataset.manifest.split},
                   {"class_names", dataset.manifest.class_names},
                   {"seed", dataset.manifest.seed},
                   {"pairs", entries}};
  // The manifest is written last and atomically: a directory with a manifest
  // is complete.
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << manifest.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, dir / "manifest.json");
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no manifest.json in " + dir.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  Dataset ds;
  ds.manifest.split = j.at("split").get<std::string>();
  ds.manifest.class_names = j.at("class_names").get<std::vector<std::string>>();
  ds.manifest.seed = j.value("seed", uint64_t{0});
  for (const auto& e : j.at("pairs")) {
    SliceSource src{e.at("patient_id").get<std::string>(), e.at("slice_index").get<int64_t>()};
    ds.manifest.pairs.push_back(src);
  }
  ds.manifest.validate();

  const int64_t n_classes = ds.num_classes();
  for (size_t i = 0; i < ds.manifest.pairs.size(); ++i) {
    const auto& entry = j.at("pairs")[i];
    const auto image = read_png(dir / entry.at("image").get<std::string>());
    const auto label = read_png(dir / entry.at("label").get<std::string>());
    if (image.height != kPairSize || image.width != kPairSize || label.height != kPairSize ||
        label.width != kPairSize) {
      throw ShapeError("pair " + ds.manifest.pairs[i].key() + " is not 224 x 224");
    }
    std::vector<float> pixels(image.pixels.begin(), image.pixels.end());
    auto img = torch::from_blob(pixels.data(), {kPairSize, kPairSize}, torch::kFloat32).clone() /
               static_cast<float>(image.max_value());
    std::vector<int64_t> ids(label.pixels.begin(), label.pixels.end());
    auto lbl = torch::from_blob(ids.data(), {kPairSize, kPairSize}, torch::kInt64).clone();
    if (lbl.max().item<int64_t>() >= n_classes) {
      throw InvalidValue("pair " + ds.manifest.pairs[i].key() + " has label >= " +
                         std::to_string(n_classes));
    }
    ds.pairs.push_back({img, lbl, ds.manifest.pairs[i]});
  }
  return ds;
}

Dataset pack_volumes(const std::filesystem::path& volume_dir,
                     const std::filesystem::path& label_dir, Window window,
                     const std::string& split, const std::vector<std::string>& class_names) {
  std::vector<std::filesystem::path> headers;
  for (const auto& entry : std::filesystem::directory_iterator(volume_dir)) {
    if (entry.path().extension() == ".mhd") headers.push_back(entry.path());
  }
  std::sort(headers.begin(), headers.end());

  Dataset ds;
  ds.manifest.split = split;
  ds.manifest.class_names = class_names;
  for (const auto& header : headers) {
    const auto label_header = label_dir / header.filename();
    if (!std::filesystem::exists(label_header)) {
      throw IoError("no label volume for " + header.filename().string());
    }
    auto image = read_mhd(header);
    auto labels = read_mhd(label_header);
    CTVolume vol{image.data.to(torch::kFloat32), image.spacing, header.stem().string()};
    LabelVolume lbl{labels.data.round().to(torch::kInt64), class_names};
    std::vector<SlicePair> pairs;
    try {
      pairs = build_slice_pairs(vol, lbl, window);
    } catch (const EmptyDatasetError&) {
      continue;  // a case without foreground contributes nothing
    }
    for (auto& p : pairs) {
      ds.manifest.pairs.push_back(p.source);
      ds.pairs.push_back(std::move(p));
    }
  }
  if (ds.pairs.empty()) throw EmptyDatasetError("empty dataset: no foreground slices found");
  ds.manifest.validate();
  return ds;
}

void SyntheticSpec::validate() const {
  if (n_volumes < 1 || slices_per_volume < 1) throw InvalidValue("need at least one slice");
  if (native_size < 32) throw InvalidValue("native_size must be >= 32");
  if (annulus_outer_min <= 0 || annulus_outer_min > annulus_outer_max) {
    throw InvalidValue("invalid annulus radius range");
  }
  if (wall_min <= 0 || wall_min > wall_max || wall_max >= annulus_outer_min) {
    throw InvalidValue("wall thickness must be positive and thinner than the annulus");
  }
  if (tumor_probability < 0 || tumor_probability > 1) {
    throw InvalidValue("tumor_probability must be in [0, 1]");
  }
  if (tumor_radius_min <= 0 || tumor_radius_min > tumor_radius_max) {
    throw InvalidValue("invalid tumor radius range");
  }
  if (distractors < 0) throw InvalidValue("distractors must be >= 0");
  if (noise_hu < 0) throw InvalidValue("noise_hu must be >= 0");
  if (2.0 * annulus_outer_max >= static_cast<double>(native_size)) {
    throw InvalidValue("infeasible geometry: annulus larger than image");
  }
  if (split != "train" && split != "test") throw InvalidValue("split must be train or test");
}

SyntheticSpec synthetic_spec_from_json(const json& j) {
  SyntheticSpec s;
  static const std::set<std::string> kKnown = {
      "n_volumes",        "slices_per_volume", "native_size",      "annulus_outer_min",
      "annulus_outer_max", "wall_min",         "wall_max",         "tumor_probability",
      "tumor_radius_min", "tumor_radius_max",  "distractors",      "noise_hu",
      "seed",             "split",             "patient_prefix"};
  for (const auto& [key, _] : j.items()) {
    if (!kKnown.count(key)) throw InvalidValue("unknown synthetic spec key '" + key + "'");
  }
  s.n_volumes = j.value("n_volumes", s.n_volumes);
  s.slices_per_volume = j.value("slices_per_volume", s.slices_per_volume);
  s.native_size = j.value("native_size", s.native_size);
  s.annulus_outer_min = j.value("annulus_outer_min", s.annulus_outer_min);
  s.annulus_outer_max = j.value("annulus_outer_max", s.annulus_outer_max);
  s.wall_min = j.value("wall_min", s.wall_min);
  s.wall_max = j.value("wall_max", s.wall_max);
  s.tumor_probability = j.value("tumor_probability", s.tumor_probability);
  s.tumor_radius_min = j.value("tumor_radius_min", s.tumor_radius_min);
  s.tumor_radius_max = j.value("tumor_radius_max", s.tumor_radius_max);
  s.distractors = j.value("distractors", s.distractors);
  s.noise_hu = j.value("noise_hu", s.noise_hu);
  s.seed = j.value("seed", s.seed);
  s.split = j.value("split", s.split);
  s.patient_prefix = j.value("patient_prefix", s.patient_prefix);
  s.validate();
  return s;
}

json to_json(const SyntheticSpec& s) {
  return {{"n_volumes", s.n_volumes},
          {"slices_per_volume", s.slices_per_volume},
          {"native_size", s.native_size},
          {"annulus_outer_min", s.annulus_outer_min},
          {"annulus_outer_max", s.annulus_outer_max},
          {"wall_min", s.wall_min},
          {"wall_max", s.wall_max},
          {"tumor_probability", s.tumor_probability},
          {"tumor_radius_min", s.tumor_radius_min},
          {"tumor_radius_max", s.tumor_radius_max},
          {"distractors", s.distractors},
          {"noise_hu", s.noise_hu},
          {"seed", s.seed},
          {"split", s.split},
          {"patient_prefix", s.patient_prefix}};
}

namespace {

// Tissue intensities in HU.
constexpr double kAirHu = -1000.0;
constexpr double kFatHu = -80.0;
constexpr double kLumenHu = -20.0;
constexpr double kWallHu = 70.0;
constexpr double kTumorHu = 150.0;

struct Tube {
  double cx0, cy0;  // centre at the first slice
  double dx, dy;    // drift per slice
  double outer0, outer_amp, phase;
  double wall;

  double cx(int64_t s) const { return cx0 + dx * s; }
  double cy(int64_t s) const { return cy0 + dy * s; }
  double outer(int64_t s) const { return outer0 + outer_amp * std::sin(phase + 0.4 * s); }
  double reach() const { return outer0 + outer_amp; }
};

}  // namespace

std::vector<SyntheticVolume> generate_synthetic_volumes(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const int64_t n = spec.native_size;
  const int64_t slices = spec.slices_per_volume;
  const double centre = (n - 1) / 2.0;
  const double semi_x = 0.46 * n;
  const double semi_y = 0.40 * n;
  const double max_drift = 0.75;
  const double margin = spec.tumor_radius_max + max_drift * slices + 2.0;
  const double radial_budget_x = semi_x - spec.annulus_outer_max - margin;
  const double radial_budget_y = semi_y - spec.annulus_outer_max - margin;
  if (radial_budget_x <= 0 || radial_budget_y <= 0) {
    throw InvalidValue("infeasible geometry: annulus larger than image");
  }

  auto draw_tube = [&]() {
    Tube t{};
    for (int tries = 0;; ++tries) {
      const double ox = uniform(-radial_budget_x, radial_budget_x);
      const double oy = uniform(-radial_budget_y, radial_budget_y);
      if ((ox * ox) / (radial_budget_x * radial_budget_x) +
              (oy * oy) / (radial_budget_y * radial_budget_y) <=
          1.0) {
        t.cx0 = centre + ox;
        t.cy0 = centre + oy;
        break;
      }
    }
    const double drift_angle = uniform(0.0, 2.0 * std::numbers::pi);
    const double drift = uniform(0.0, max_drift);
    t.dx = drift * std::cos(drift_angle);
    t.dy = drift * std::sin(drift_angle);
    // Centre drift is relative to the middle slice so the whole tube stays
    // inside the sampled disc.
    t.cx0 -= t.dx * slices / 2.0;
    t.cy0 -= t.dy * slices / 2.0;
    const double outer = uniform(spec.annulus_outer_min, spec.annulus_outer_max);
    t.outer_amp = std::min(2.0, 0.5 * (outer - spec.annulus_outer_min));
    t.outer0 = outer - t.outer_amp;
    t.phase = uniform(0.0, 2.0 * std::numbers::pi);
    t.wall = uniform(spec.wall_min, spec.wall_max);
    return t;
  };

  auto grid_y = torch::arange(n, torch::kFloat64).view({n, 1}).expand({n, n});
  auto grid_x = torch::arange(n, torch::kFloat64).view({1, n}).expand({n, n});
  auto body = ((grid_x - centre) / semi_x).square() + ((grid_y - centre) / semi_y).square() <= 1.0;

  std::vector<SyntheticVolume> out;
  for (int64_t v = 0; v < spec.n_volumes; ++v) {
    // Every pair of annuli keeps the same clearance so that position gives no
    // hint of which one is labelled. Redraw the layout when they do not fit.
    Tube target{};
    std::vector<Tube> distractors;
    bool layout_ok = false;
    for (int layout = 0; layout < 200 && !layout_ok; ++layout) {
      target = draw_tube();
      distractors.clear();
      layout_ok = true;
      for (int64_t d = 0; d < spec.distractors && layout_ok; ++d) {
        bool placed = false;
        for (int tries = 0; tries < 200 && !placed; ++tries) {
          Tube cand = draw_tube();
          auto clear_of = [&](const Tube& other, double extra) {
            for (int64_t s = 0; s < slices; ++s) {
              const double dist = std::hypot(cand.cx(s) - other.cx(s), cand.cy(s) - other.cy(s));
              if (dist < cand.reach() + other.reach() + extra) return false;
            }
            return true;
          };
          placed = clear_of(target, spec.tumor_radius_max + 3.0);
          for (const auto& other : distractors) {
            placed = placed && clear_of(other, spec.tumor_radius_max + 3.0);
          }
          if (placed) distractors.push_back(cand);
        }
        layout_ok = placed;
      }
    }
    if (!layout_ok) throw InvalidValue("infeasible geometry: cannot place distractor annuli");

    auto hu = torch::full({slices, n, n}, kAirHu, torch::kFloat64);
    auto labels = torch::zeros({slices, n, n}, torch::kInt64);
    for (int64_t s = 0; s < slices; ++s) {
      auto plane = torch::where(body, torch::full({n, n}, kFatHu, torch::kFloat64),
                                torch::full({n, n}, kAirHu, torch::kFloat64));
      auto label = torch::zeros({n, n}, torch::kInt64);
      auto paint_tube = [&](const Tube& t, bool labelled) {
        const auto r = ((grid_x - t.cx(s)).square() + (grid_y - t.cy(s)).square()).sqrt();
        const double outer = t.outer(s);
        const auto wall = (r <= outer) & (r > outer - t.wall);
        const auto lumen = r <= outer - t.wall;
        plane.masked_fill_(lumen, kLumenHu);
        plane.masked_fill_(wall, kWallHu);
        if (labelled) label.masked_fill_(wall, 1);
      };
      for (const auto& d : distractors) paint_tube(d, false);
      paint_tube(target, true);

      if (unit(rng) < spec.tumor_probability) {
        const double angle = uniform(0.0, 2.0 * std::numbers::pi);
        const double radius = uniform(spec.tumor_radius_min, spec.tumor_radius_max);
        const double along = target.outer(s) - target.wall / 2.0;
        const double tx = target.cx(s) + along * std::cos(angle);
        const double ty = target.cy(s) + along * std::sin(angle);
        const auto blob = (grid_x - tx).square() + (grid_y - ty).square() <= radius * radius;
        plane.masked_fill_(blob, kTumorHu);
        label.masked_fill_(blob, 2);
      }

      if (spec.noise_hu > 0) {
        std::normal_distribution<double> noise(0.0, spec.noise_hu);
        std::vector<double> values(n * n);
        for (auto& x : values) x = noise(rng);
        plane += torch::from_blob(values.data(), {n, n}, torch::kFloat64).clone();
      }
      hu[s] = plane;
      labels[s] = label;
    }

    SyntheticVolume sv;
    sv.volume.hu = hu.to(torch::kFloat32);
    sv.volume.patient_id =
        spec.patient_prefix + std::to_string(spec.seed) + "-" + std::to_string(v);
    sv.labels.labels = labels;
    sv.labels.class_names = default_class_names();
    out.push_back(std::move(sv));
  }
  return out;
}

Dataset generate_synthetic_dataset(const SyntheticSpec& spec, Window window) {
  Dataset ds;
  ds.manifest.split = spec.split;
  ds.manifest.seed = spec.seed;
  ds.manifest.class_names = default_class_names();
  for (auto& sv : generate_synthetic_volumes(spec)) {
    for (auto& pair : build_slice_pairs(sv.volume, sv.labels, window)) {
      ds.manifest.pairs.push_back(pair.source);
      ds.pairs.push_back(std::move(pair));
    }
  }
  ds.manifest.validate();
  return ds;
}

}  // namespace usam

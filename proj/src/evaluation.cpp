#include "usam/evaluation.hpp"

#include <fstream>
#include <sstream>

#include <c10/util/Logging.h>

#include "usam/error.hpp"
#include "usam/metrics.hpp"
#include "usam/training.hpp"

namespace usam {

namespace F = torch::nn::functional;

std::mt19937_64 pair_rng(uint64_t seed, uint64_t index) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(index), static_cast<uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

MetricsReport evaluate(const Predictor& predict, const Dataset& data, const EvalOptions& options) {
  if (data.pairs.empty()) throw EmptyDatasetError("evaluation manifest has no pairs");
  if (options.batch_size < 1) throw InvalidValue("batch_size must be at least 1");
  const int64_t n = data.num_classes();
  std::vector<double> dice_sum(n, 0.0), iou_sum(n, 0.0);
  std::vector<int64_t> counted(n, 0);

  for (size_t begin = 0; begin < data.pairs.size(); begin += options.batch_size) {
    const size_t end = std::min(data.pairs.size(), begin + static_cast<size_t>(options.batch_size));
    std::vector<const SlicePair*> pairs;
    std::vector<std::mt19937_64> rngs;
    for (size_t i = begin; i < end; ++i) {
      pairs.push_back(&data.pairs[i]);
      rngs.push_back(pair_rng(options.seed, i));
    }
    std::vector<std::mt19937_64*> rng_ptrs;
    for (auto& r : rngs) rng_ptrs.push_back(&r);
    const int64_t size = data.pairs[begin].label.size(0);
    auto batch = make_batch(pairs, size, options.k_points, n, false, rng_ptrs);
    const auto pred = predict(batch.images, batch.prompts);
    if (pred.dim() != 3 || pred.size(0) != batch.labels.size(0) || pred.sizes().slice(1) != batch.labels.sizes().slice(1)) {
      throw ShapeError("predictor returned a mis-shaped label map");
    }
    for (int64_t b = 0; b < pred.size(0); ++b) {
      for (int64_t c = 1; c < n; ++c) {
        const auto counts = class_counts(pred[b], batch.labels[b], c);
        auto d = dice_from(counts);
        auto j = iou_from(counts);
        if (!d) {
          if (options.undefined == UndefinedPolicy::kExclude) continue;
          d = 1.0;
          j = 1.0;
        }
        dice_sum[c] += *d;
        iou_sum[c] += *j;
        ++counted[c];
      }
    }
  }

  MetricsReport r;
  r.class_names = data.manifest.class_names;
  r.dice.assign(n, std::nullopt);
  r.iou.assign(n, std::nullopt);
  r.counted = counted;
  r.pairs = static_cast<int64_t>(data.pairs.size());
  r.k_points = options.k_points;
  r.seed = options.seed;
  int64_t classes = 0;
  for (int64_t c = 1; c < n; ++c) {
    if (counted[c] == 0) continue;
    r.dice[c] = dice_sum[c] / static_cast<double>(counted[c]);
    r.iou[c] = iou_sum[c] / static_cast<double>(counted[c]);
    r.mean_dice += *r.dice[c];
    r.mean_iou += *r.iou[c];
    ++classes;
  }
  if (classes > 0) {
    r.mean_dice /= static_cast<double>(classes);
    r.mean_iou /= static_cast<double>(classes);
  }
  return r;
}

MetricsReport evaluate(USamImpl& model, const Dataset& data, const EvalOptions& options) {
  if (data.num_classes() != model.config().num_classes) {
    throw IncompatibleCheckpoint("model class count does not match the dataset");
  }
  model.eval();
  const int64_t s = model.config().image_size;
  Predictor predict = [&](const torch::Tensor& images, const std::vector<PromptSet>& prompts) {
    torch::NoGradGuard no_grad;
    const int64_t h = images.size(2), w = images.size(3);
    auto x = images;
    std::vector<PromptSet> scaled = prompts;
    if (h != s || w != s) {
      x = F::interpolate(images, F::InterpolateFuncOptions()
                                     .size(std::vector<int64_t>{s, s})
                                     .mode(torch::kBilinear)
                                     .align_corners(false))
              .clamp(0.0, 1.0);
      for (auto& p : scaled) p = rescale_prompts(p, h, w, s, s);
    }
    auto logits = model.forward(x, scaled).logits;
    if (h != s || w != s) {
      logits = F::interpolate(logits, F::InterpolateFuncOptions()
                                          .size(std::vector<int64_t>{h, w})
                                          .mode(torch::kBilinear)
                                          .align_corners(false));
    }
    return predict_mask(logits);
  };
  auto report = evaluate(predict, data, options);
  report.config_tag = model.config().tag();
  return report;
}

json to_json(const MetricsReport& r) {
  json classes = json::array();
  for (size_t c = 1; c < r.class_names.size(); ++c) {
    json entry = {{"class_id", c}, {"name", r.class_names[c]}, {"pairs", r.counted[c]}};
    entry["dice"] = r.dice[c] ? json(*r.dice[c]) : json(nullptr);
    entry["iou"] = r.iou[c] ? json(*r.iou[c]) : json(nullptr);
    classes.push_back(entry);
  }
  return {{"classes", classes},     {"mean_dice", r.mean_dice}, {"mean_iou", r.mean_iou},
          {"pairs", r.pairs},       {"k_points", r.k_points},   {"seed", r.seed},
          {"config_tag", r.config_tag}};
}

namespace {

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << *v;
  return os.str();
}

std::string report_columns(const MetricsReport& r) {
  std::string h;
  for (size_t c = 1; c < r.class_names.size(); ++c) {
    h += "dice_" + r.class_names[c] + ",iou_" + r.class_names[c] + ",";
  }
  return h + "mean_dice,mean_iou,pairs";
}

std::string report_values(const MetricsReport& r) {
  std::string v;
  for (size_t c = 1; c < r.class_names.size(); ++c) v += fmt_opt(r.dice[c]) + "," + fmt_opt(r.iou[c]) + ",";
  return v + fmt_opt(r.mean_dice) + "," + fmt_opt(r.mean_iou) + "," + std::to_string(r.pairs);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

std::string to_csv(const MetricsReport& r) {
  return "k_points,seed," + report_columns(r) + "\n" + std::to_string(r.k_points) + "," +
         std::to_string(r.seed) + "," + report_values(r) + "\n";
}

void write_report(const std::filesystem::path& stem, const MetricsReport& r) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  auto json_path = stem;
  json_path += ".json";
  auto csv_path = stem;
  csv_path += ".csv";
  write_text(json_path, to_json(r).dump(2) + "\n");
  write_text(csv_path, to_csv(r));
}

double AblationTable::mean_dice_for(int64_t value) const {
  double sum = 0.0;
  int64_t n = 0;
  for (const auto& row : rows) {
    if (row.value != value) continue;
    sum += row.report.mean_dice;
    ++n;
  }
  if (n == 0) throw InvalidValue("no ablation rows for value " + std::to_string(value));
  return sum / static_cast<double>(n);
}

json to_json(const AblationTable& t) {
  json rows = json::array();
  for (const auto& row : t.rows) rows.push_back({{"value", row.value}, {"seed", row.seed}, {"report", to_json(row.report)}});
  return {{"axis", t.axis}, {"rows", rows}};
}

std::string to_csv(const AblationTable& t) {
  if (t.rows.empty()) return t.axis + ",seed\n";
  std::string out = t.axis + ",seed," + report_columns(t.rows.front().report) + "\n";
  for (const auto& row : t.rows) {
    out += std::to_string(row.value) + "," + std::to_string(row.seed) + "," + report_values(row.report) + "\n";
  }
  return out;
}

AblationTable ablation_run(const TrainConfig& base, const std::string& axis, const std::vector<int64_t>& values,
                           const std::vector<uint64_t>& seeds, const Dataset& train_data,
                           const Dataset& test_data, EvalOptions eval,
                           const std::function<void(const AblationRow&)>& on_row) {
  if (axis != "points" && axis != "skips") throw InvalidValue("ablation axis must be 'points' or 'skips'");
  if (values.empty() || seeds.empty()) throw InvalidValue("ablation needs at least one value and one seed");
  for (auto v : values) {
    const bool ok = axis == "points" ? (v == 0 || v == 1 || v == 3 || v == 5) : (v >= 0 && v <= 4);
    if (!ok) throw InvalidValue("value " + std::to_string(v) + " is not allowed on the " + axis + " axis");
  }
  AblationTable table;
  table.axis = axis;
  for (auto v : values) {
    for (auto seed : seeds) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      EvalOptions opts = eval;
      opts.seed = seed;
      if (axis == "points") {
        cfg.k_points = v;
        opts.k_points = v;
      } else {
        cfg.model.skips = v;
      }
      auto result = train(cfg, train_data, TrainOptions{.quiet = true});
      AblationRow row{v, seed, evaluate(*result.checkpoint.model, test_data, opts)};
      LOG(INFO) << axis << "=" << v << " seed=" << seed << " mean Dice " << row.report.mean_dice;
      if (on_row) on_row(row);
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

}  // namespace usam

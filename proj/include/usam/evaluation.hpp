#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "usam/config.hpp"
#include "usam/data.hpp"
#include "usam/model.hpp"
#include "usam/prompting.hpp"

namespace usam {

enum class UndefinedPolicy { kExclude, kCountAsOne };

struct EvalOptions {
  int64_t k_points = 3;
  uint64_t seed = 7;
  UndefinedPolicy undefined = UndefinedPolicy::kExclude;
  int64_t batch_size = 8;
};

struct MetricsReport {
  std::vector<std::string> class_names;  // all N, background first
  // Indexed by class id; entry 0 (background) is always empty.
  std::vector<std::optional<double>> dice;
  std::vector<std::optional<double>> iou;
  std::vector<int64_t> counted;  // pairs contributing to each class
  double mean_dice = 0.0;        // over foreground classes with a value
  double mean_iou = 0.0;
  int64_t pairs = 0;
  int64_t k_points = 0;
  uint64_t seed = 0;
  std::string config_tag;
};

json to_json(const MetricsReport& r);
/// One header line and one row: per-class Dice/IoU, means, pair count.
std::string to_csv(const MetricsReport& r);
/// Writes `<stem>.json` and `<stem>.csv`.
void write_report(const std::filesystem::path& stem, const MetricsReport& r);

/// Maps (B, 1, 224, 224) images and prompts in the same coordinates to
/// (B, 224, 224) label maps.
using Predictor = std::function<torch::Tensor(const torch::Tensor&, const std::vector<PromptSet>&)>;

/// Accumulates per-pair metrics. Prompts for pair i are drawn from its
/// ground truth by a generator seeded with (seed, i).
MetricsReport evaluate(const Predictor& predict, const Dataset& data, const EvalOptions& options);

/// Runs `model` at its own input size and scores at the pair size; logits are
/// resized bilinearly before the argmax.
MetricsReport evaluate(USamImpl& model, const Dataset& data, const EvalOptions& options);

/// Generator for the prompts of pair `index` under run seed `seed`.
std::mt19937_64 pair_rng(uint64_t seed, uint64_t index);

struct AblationRow {
  int64_t value;
  uint64_t seed;
  MetricsReport report;
};

struct AblationTable {
  std::string axis;  // "points" or "skips"
  std::vector<AblationRow> rows;
  /// Mean over seeds of mean Dice for `value`.
  double mean_dice_for(int64_t value) const;
};

json to_json(const AblationTable& t);
std::string to_csv(const AblationTable& t);

/// One train + evaluate cycle per (value, seed). For the points axis the
/// value is used for both training and evaluation prompts; for skips it sets
/// the number of enabled skip connections.
AblationTable ablation_run(const TrainConfig& base, const std::string& axis, const std::vector<int64_t>& values,
                           const std::vector<uint64_t>& seeds, const Dataset& train_data,
                           const Dataset& test_data, EvalOptions eval = {},
                           const std::function<void(const AblationRow&)>& on_row = {});

}  // namespace usam

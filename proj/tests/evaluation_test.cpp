#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "usam/error.hpp"
#include "usam/evaluation.hpp"
#include "usam/metrics.hpp"

namespace usam {
namespace {

// Pixel-loop reference for one class.
std::pair<double, double> brute_force(const torch::Tensor& pred, const torch::Tensor& gt, int64_t c) {
  auto p = pred.accessor<int64_t, 2>();
  auto g = gt.accessor<int64_t, 2>();
  int64_t np = 0, ng = 0, both = 0, either = 0;
  for (int64_t i = 0; i < pred.size(0); ++i) {
    for (int64_t j = 0; j < pred.size(1); ++j) {
      const bool a = p[i][j] == c, b = g[i][j] == c;
      np += a;
      ng += b;
      both += a && b;
      either += a || b;
    }
  }
  return {2.0 * both / static_cast<double>(np + ng), both / static_cast<double>(either)};
}

TEST(Metrics, HandWorkedExample) {
  // |P| = 4, |G| = 4, |P∩G| = 2.
  auto pred = torch::zeros({4, 4}, torch::kInt64);
  auto gt = torch::zeros({4, 4}, torch::kInt64);
  pred[0][0] = pred[0][1] = pred[0][2] = pred[0][3] = 1;
  gt[0][2] = gt[0][3] = gt[1][0] = gt[1][1] = 1;
  const auto counts = class_counts(pred, gt, 1);
  EXPECT_EQ(counts.pred, 4);
  EXPECT_EQ(counts.gt, 4);
  EXPECT_EQ(counts.intersection, 2);
  EXPECT_DOUBLE_EQ(*dice(pred, gt, 1), 0.5);
  EXPECT_DOUBLE_EQ(*iou(pred, gt, 1), 1.0 / 3.0);
}

TEST(Metrics, AbsentClassIsUndefined) {
  const auto zeros = torch::zeros({3, 3}, torch::kInt64);
  EXPECT_FALSE(dice(zeros, zeros, 1).has_value());
  EXPECT_FALSE(iou(zeros, zeros, 1).has_value());
  auto gt = zeros.clone();
  gt[1][1] = 1;
  EXPECT_DOUBLE_EQ(*dice(zeros, gt, 1), 0.0);
  EXPECT_THROW(class_counts(zeros, torch::zeros({2, 3}, torch::kInt64), 1), ShapeError);
}

TEST(Metrics, RandomMasksAgreeWithPixelCounting) {
  torch::manual_seed(0);
  for (int trial = 0; trial < 50; ++trial) {
    const auto pred = torch::randint(0, 3, {17, 23});
    const auto gt = torch::randint(0, 3, {17, 23});
    for (int64_t c = 1; c < 3; ++c) {
      const auto [d, j] = brute_force(pred, gt, c);
      EXPECT_DOUBLE_EQ(*dice(pred, gt, c), d);
      EXPECT_DOUBLE_EQ(*iou(pred, gt, c), j);
      EXPECT_NEAR(*dice(pred, gt, c), 2 * j / (1 + j), 1e-12);
    }
  }
}

Dataset eval_dataset() {
  SyntheticSpec spec;
  spec.n_volumes = 2;
  spec.slices_per_volume = 3;
  spec.seed = 21;
  spec.split = "test";
  return generate_synthetic_dataset(spec);
}

// Returns the reference labels of the pairs in evaluation order.
Predictor oracle_predictor(const Dataset& ds, size_t& cursor) {
  return [&ds, &cursor](const torch::Tensor& images, const std::vector<PromptSet>&) {
    std::vector<torch::Tensor> out;
    for (int64_t b = 0; b < images.size(0); ++b) out.push_back(ds.pairs[cursor++].label);
    return torch::stack(out);
  };
}

TEST(Evaluate, PerfectPredictorScoresOne) {
  const auto ds = eval_dataset();
  size_t cursor = 0;
  const auto r = evaluate(oracle_predictor(ds, cursor), ds, {.batch_size = 4});
  EXPECT_EQ(cursor, ds.size());
  EXPECT_DOUBLE_EQ(r.mean_dice, 1.0);
  EXPECT_DOUBLE_EQ(r.mean_iou, 1.0);
  EXPECT_EQ(r.pairs, static_cast<int64_t>(ds.size()));
  EXPECT_FALSE(r.dice[0].has_value());
  EXPECT_EQ(r.counted[1], static_cast<int64_t>(ds.size()));
}

TEST(Evaluate, BackgroundPredictorScoresZero) {
  const auto ds = eval_dataset();
  Predictor background = [](const torch::Tensor& images, const std::vector<PromptSet>&) {
    return torch::zeros({images.size(0), images.size(2), images.size(3)}, torch::kInt64);
  };
  const auto r = evaluate(background, ds, {});
  EXPECT_DOUBLE_EQ(r.mean_dice, 0.0);
}

TEST(Evaluate, AveragesPerPairScores) {
  const auto ds = eval_dataset();
  // Shift every reference mask one pixel to the right.
  Predictor shifted = [&ds, cursor = size_t{0}](const torch::Tensor& images,
                                                 const std::vector<PromptSet>&) mutable {
    std::vector<torch::Tensor> out;
    for (int64_t b = 0; b < images.size(0); ++b) out.push_back(ds.pairs[cursor++].label.roll(1, 1));
    return torch::stack(out);
  };
  const auto r = evaluate(shifted, ds, {.batch_size = 5});

  std::vector<double> sum(3, 0.0);
  std::vector<int> n(3, 0);
  for (const auto& p : ds.pairs) {
    for (int64_t c = 1; c < 3; ++c) {
      if (!(p.label == c).any().item<bool>()) continue;
      sum[c] += brute_force(p.label.roll(1, 1), p.label, c).first;
      ++n[c];
    }
  }
  for (int64_t c = 1; c < 3; ++c) {
    ASSERT_TRUE(r.dice[c].has_value());
    EXPECT_NEAR(*r.dice[c], sum[c] / n[c], 1e-12);
    EXPECT_EQ(r.counted[c], n[c]);
  }
  EXPECT_NEAR(r.mean_dice, (*r.dice[1] + *r.dice[2]) / 2, 1e-12);
}

TEST(Evaluate, UndefinedPolicyCountsAbsentClassesAsOne) {
  SyntheticSpec spec;
  spec.n_volumes = 1;
  spec.slices_per_volume = 2;
  spec.tumor_probability = 0.0;
  const auto ds = generate_synthetic_dataset(spec);
  size_t cursor = 0;
  const auto excluded = evaluate(oracle_predictor(ds, cursor), ds, {});
  EXPECT_FALSE(excluded.dice[2].has_value());
  EXPECT_EQ(excluded.counted[2], 0);
  cursor = 0;
  const auto as_one = evaluate(oracle_predictor(ds, cursor), ds, {.undefined = UndefinedPolicy::kCountAsOne});
  EXPECT_DOUBLE_EQ(*as_one.dice[2], 1.0);
  EXPECT_EQ(as_one.counted[2], 2);
}

TEST(Evaluate, PromptsDependOnSeedAndIndexOnly) {
  const auto ds = eval_dataset();
  auto record = [&ds](EvalOptions opts) {
    std::vector<PromptSet> seen;
    Predictor p = [&seen](const torch::Tensor& images, const std::vector<PromptSet>& prompts) {
      seen.insert(seen.end(), prompts.begin(), prompts.end());
      return torch::zeros({images.size(0), images.size(2), images.size(3)}, torch::kInt64);
    };
    evaluate(p, ds, opts);
    return seen;
  };
  const auto a = record({.seed = 3, .batch_size = 2});
  const auto b = record({.seed = 3, .batch_size = 5});
  const auto c = record({.seed = 4, .batch_size = 2});
  ASSERT_EQ(a.size(), ds.size());
  bool differs = false;
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].points, b[i].points);
    differs |= a[i].points != c[i].points;
    for (const auto& pt : a[i].points) EXPECT_EQ(ds.pairs[i].label[pt.y][pt.x].item<int64_t>(), pt.class_id);
  }
  EXPECT_TRUE(differs);
}

TEST(Evaluate, ModelEvaluationIsDeterministic) {
  const auto ds = eval_dataset();
  auto model = make_model(ModelConfig::tiny(32), 0);
  const auto a = evaluate(*model, ds, {});
  const auto b = evaluate(*model, ds, {});
  EXPECT_EQ(to_json(a), to_json(b));
  EXPECT_EQ(a.config_tag, model->config().tag());
}

TEST(Evaluate, RejectsEmptyDataAndBadPredictor) {
  Dataset empty;
  Predictor p = [](const torch::Tensor& images, const std::vector<PromptSet>&) {
    return torch::zeros({images.size(0), 3, 3}, torch::kInt64);
  };
  EXPECT_THROW(evaluate(p, empty, {}), EmptyDatasetError);
  EXPECT_THROW(evaluate(p, eval_dataset(), {}), ShapeError);
}

TEST(Report, JsonAndCsvFiles) {
  testing::TempDir dir;
  MetricsReport r;
  r.class_names = {"background", "normal", "tumor"};
  r.dice = {std::nullopt, 0.75, std::nullopt};
  r.iou = {std::nullopt, 0.6, std::nullopt};
  r.counted = {0, 4, 0};
  r.mean_dice = 0.75;
  r.mean_iou = 0.6;
  r.pairs = 4;
  r.k_points = 3;
  r.seed = 7;
  write_report(dir / "out" / "metrics", r);
  std::ifstream js(dir / "out" / "metrics.json");
  const auto j = json::parse(js);
  EXPECT_EQ(j["classes"][0]["name"], "normal");
  EXPECT_DOUBLE_EQ(j["classes"][0]["dice"].get<double>(), 0.75);
  EXPECT_TRUE(j["classes"][1]["dice"].is_null());
  EXPECT_EQ(to_csv(r),
            "k_points,seed,dice_normal,iou_normal,dice_tumor,iou_tumor,mean_dice,mean_iou,pairs\n"
            "3,7,0.750000,0.600000,,,0.750000,0.600000,4\n");
  EXPECT_TRUE(std::filesystem::exists(dir / "out" / "metrics.csv"));
}

TEST(Ablation, RejectsUnknownAxisAndValues) {
  const auto ds = eval_dataset();
  TrainConfig cfg;
  cfg.model = ModelConfig::tiny(32);
  cfg.batch_size = 2;
  cfg.steps = 1;
  EXPECT_THROW(ablation_run(cfg, "depth", {1}, {0}, ds, ds), InvalidValue);
  EXPECT_THROW(ablation_run(cfg, "points", {2}, {0}, ds, ds), InvalidValue);
  EXPECT_THROW(ablation_run(cfg, "skips", {5}, {0}, ds, ds), InvalidValue);
}

TEST(Ablation, OneRowPerValueAndSeed) {
  const auto ds = eval_dataset();
  TrainConfig cfg;
  cfg.model = ModelConfig::tiny(32);
  cfg.batch_size = 2;
  cfg.steps = 2;
  cfg.log_every = 0;
  int callbacks = 0;
  const auto t = ablation_run(cfg, "skips", {0, 4}, {1, 2}, ds, ds, {}, [&](const AblationRow&) { ++callbacks; });
  ASSERT_EQ(t.rows.size(), 4u);
  EXPECT_EQ(callbacks, 4);
  EXPECT_EQ(t.rows[0].value, 0);
  EXPECT_EQ(t.rows[0].report.config_tag, "tiny-usam-n3-s0-32");
  EXPECT_EQ(t.rows[3].report.config_tag, "tiny-usam-n3-s4-32");
  EXPECT_NEAR(t.mean_dice_for(4), (t.rows[2].report.mean_dice + t.rows[3].report.mean_dice) / 2, 1e-12);
  EXPECT_THROW(t.mean_dice_for(2), InvalidValue);
  EXPECT_EQ(to_json(t)["rows"].size(), 4u);
}

}  // namespace
}  // namespace usam

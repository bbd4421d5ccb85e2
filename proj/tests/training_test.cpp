#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "usam/training.hpp"

namespace usam {
namespace {

using testing::TempDir;

TEST(Loss, UniformLogitsGiveLogNCrossEntropy) {
  const auto logits = torch::zeros({2, 3, 4, 4});
  const auto gt = torch::randint(0, 3, {2, 4, 4});
  const auto terms = segmentation_loss(logits, gt, 1.0, 0.0);
  EXPECT_NEAR(terms.ce.item<double>(), std::log(3.0), 1e-6);
  EXPECT_NEAR(terms.total.item<double>(), std::log(3.0), 1e-6);
}

TEST(Loss, ConfidentCorrectPredictionIsNearZero) {
  const auto gt = torch::tensor({{0, 1}, {2, 1}}, torch::kInt64);
  const auto logits = torch::nn::functional::one_hot(gt, 3).permute({2, 0, 1}).to(torch::kFloat32) * 50.0;
  const auto terms = segmentation_loss(logits, gt);
  EXPECT_LT(terms.ce.item<double>(), 1e-6);
  EXPECT_LT(terms.dice.item<double>(), 1e-5);
}

TEST(Loss, SoftDiceMatchesHandComputation) {
  // One image, two classes, two pixels; gt = [0, 1].
  const auto probs = torch::tensor({{{{0.8, 0.4}}, {{0.2, 0.6}}}}, torch::kFloat64);
  const auto gt = torch::tensor({{{0, 1}}}, torch::kInt64);
  const double eps = 1e-5;
  const double d0 = (2 * 0.8 + eps) / (1.2 + 1 + eps);
  const double d1 = (2 * 0.6 + eps) / (0.8 + 1 + eps);
  EXPECT_NEAR(soft_dice_loss(probs, gt, eps).item<double>(), 1.0 - (d0 + d1) / 2, 1e-12);
}

TEST(Loss, WeightsCombineTerms) {
  torch::manual_seed(0);
  const auto logits = torch::randn({3, 8, 8});
  const auto gt = torch::randint(0, 3, {8, 8});
  const auto t = segmentation_loss(logits, gt, 0.3, 2.0);
  EXPECT_NEAR(t.total.item<double>(), 0.3 * t.ce.item<double>() + 2.0 * t.dice.item<double>(), 1e-6);
}

TEST(Loss, RejectsBadTargets) {
  EXPECT_THROW(segmentation_loss(torch::zeros({1, 3, 4, 4}), torch::full({1, 4, 4}, 3, torch::kInt64)),
               InvalidValue);
  EXPECT_THROW(segmentation_loss(torch::zeros({1, 3, 4, 4}), torch::zeros({1, 5, 4}, torch::kInt64)),
               ShapeError);
  auto nan = torch::zeros({1, 3, 4, 4});
  nan[0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(segmentation_loss(nan, torch::zeros({1, 4, 4}, torch::kInt64)), InvalidValue);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  torch::manual_seed(1);
  auto logits = torch::randn({2, 3, 5, 5}, torch::kFloat64).requires_grad_(true);
  const auto gt = torch::randint(0, 3, {2, 5, 5});
  segmentation_loss(logits, gt).total.backward();
  const auto grad = logits.grad().clone();
  torch::NoGradGuard no_grad;
  for (int64_t idx : {0, 7, 31, 77, 149}) {
    auto plus = logits.detach().clone();
    auto minus = logits.detach().clone();
    plus.view(-1)[idx] += 1e-6;
    minus.view(-1)[idx] -= 1e-6;
    const double fd = (segmentation_loss(plus, gt).total.item<double>() -
                       segmentation_loss(minus, gt).total.item<double>()) / 2e-6;
    EXPECT_NEAR(grad.view(-1)[idx].item<double>(), fd, 1e-7 + 1e-5 * std::abs(fd));
  }
}

Dataset small_dataset(int64_t volumes = 1, int64_t slices = 4) {
  SyntheticSpec spec;
  spec.n_volumes = volumes;
  spec.slices_per_volume = slices;
  spec.seed = 5;
  return generate_synthetic_dataset(spec);
}

TrainConfig tiny_config(int64_t steps) {
  TrainConfig c;
  c.model = ModelConfig::tiny(32);
  c.batch_size = 2;
  c.steps = steps;
  c.lr_encoder = 1e-3;
  c.lr_decoder = 1e-3;
  c.log_every = 0;
  return c;
}

TEST(MakeBatch, ShapesAndPromptsFromResizedLabel) {
  const auto ds = small_dataset();
  std::mt19937_64 rng(3);
  const auto batch = make_batch({&ds.pairs[0], &ds.pairs[1]}, 64, 3, 3, true, {&rng});
  EXPECT_EQ(batch.images.sizes(), (torch::IntArrayRef{2, 1, 64, 64}));
  EXPECT_EQ(batch.labels.sizes(), (torch::IntArrayRef{2, 64, 64}));
  ASSERT_EQ(batch.prompts.size(), 2u);
  for (size_t b = 0; b < 2; ++b) {
    EXPECT_FALSE(batch.prompts[b].empty());
    for (const auto& p : batch.prompts[b].points) {
      EXPECT_EQ(batch.labels[b][p.y][p.x].item<int64_t>(), p.class_id);
    }
  }
  EXPECT_EQ(batch.ids[1], ds.pairs[1].source.key());
  std::mt19937_64 a(1), b(2);
  EXPECT_THROW(make_batch({&ds.pairs[0]}, 64, 3, 3, false, {&a, &b}), InvalidValue);
}

TEST(Trainer, ZeroLearningRateLeavesParametersBitwiseEqual) {
  const auto ds = small_dataset();
  auto cfg = tiny_config(3);
  cfg.lr_encoder = 0.0;
  cfg.lr_decoder = 0.0;
  auto model = make_model(cfg.model, 0);
  std::map<std::string, torch::Tensor> before;
  for (const auto& item : model->named_parameters()) before[item.key()] = item.value().clone();
  Trainer trainer(cfg, model);
  std::mt19937_64 rng(0);
  for (int i = 0; i < 3; ++i) trainer.step(make_batch({&ds.pairs[0], &ds.pairs[1]}, 32, 3, 3, true, {&rng}));
  for (const auto& item : model->named_parameters()) {
    EXPECT_TRUE(testing::bitwise_equal(item.value(), before[item.key()])) << item.key();
  }
}

TEST(Trainer, FreezesPromptEncoderAndUpdatesEverythingElse) {
  const auto ds = small_dataset();
  const auto cfg = tiny_config(1);
  auto model = make_model(cfg.model, 0);
  std::map<std::string, torch::Tensor> before;
  for (const auto& item : model->named_parameters()) before[item.key()] = item.value().clone();
  Trainer trainer(cfg, model);
  std::mt19937_64 rng(0);
  trainer.step(make_batch({&ds.pairs[0], &ds.pairs[1]}, 32, 3, 3, false, {&rng}));
  for (const auto& item : model->named_parameters()) {
    const bool same = testing::bitwise_equal(item.value(), before[item.key()]);
    if (param_group(item.key()) == ParamGroup::kFrozen) {
      EXPECT_TRUE(same) << item.key();
    } else if (item.key().starts_with("upsampling_decoder.")) {
      EXPECT_FALSE(same) << item.key();
    }
  }
}

TEST(Trainer, GroupsGetTheirOwnLearningRates) {
  auto cfg = tiny_config(10);
  cfg.lr_encoder = 2e-3;
  cfg.lr_decoder = 5e-4;
  cfg.cosine_decay = true;
  Trainer trainer(cfg, make_model(cfg.model, 0));
  trainer.apply_schedule(0);
  EXPECT_DOUBLE_EQ(trainer.lr_encoder(), 2e-3);
  EXPECT_DOUBLE_EQ(trainer.lr_decoder(), 5e-4);
  trainer.apply_schedule(5);
  EXPECT_NEAR(trainer.lr_encoder(), 1e-3, 1e-12);
  EXPECT_NEAR(trainer.lr_decoder(), 2.5e-4, 1e-12);
  trainer.apply_schedule(10);
  EXPECT_NEAR(trainer.lr_encoder(), 0.0, 1e-12);
}

TEST(Trainer, RejectsMismatchedModel) {
  const auto cfg = tiny_config(1);
  EXPECT_THROW(Trainer(cfg, make_model(ModelConfig::tiny(64), 0)), IncompatibleCheckpoint);
}

TEST(Trainer, NonFiniteLossLeavesParametersUntouched) {
  const auto ds = small_dataset();
  const auto cfg = tiny_config(1);
  auto model = make_model(cfg.model, 0);
  std::mt19937_64 rng(0);
  auto batch = make_batch({&ds.pairs[0], &ds.pairs[1]}, 32, 3, 3, false, {&rng});
  batch.images[0][0][3][3] = std::numeric_limits<float>::infinity();
  std::map<std::string, torch::Tensor> before;
  for (const auto& item : model->named_parameters()) before[item.key()] = item.value().clone();
  Trainer trainer(cfg, model);
  try {
    trainer.step(batch);
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_EQ(e.batch_ids, batch.ids);
  }
  for (const auto& item : model->named_parameters()) {
    EXPECT_TRUE(testing::bitwise_equal(item.value(), before[item.key()])) << item.key();
  }
}

TEST(Train, LossDecreasesOverFiftySteps) {
  const auto ds = small_dataset();
  auto cfg = tiny_config(50);
  cfg.augment = false;
  const auto result = train(cfg, ds, {.quiet = true});
  ASSERT_EQ(result.log.size(), 50u);
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) {
    first += result.log[i].loss;
    last += result.log[45 + i].loss;
  }
  EXPECT_LT(last, first);
}

TEST(Train, ZeroStepsReturnsInitialisation) {
  const auto ds = small_dataset();
  auto cfg = tiny_config(0);
  cfg.seed = 4;
  const auto result = train(cfg, ds, {.quiet = true});
  EXPECT_TRUE(result.log.empty());
  auto fresh = make_model(cfg.model, 4);
  const auto trained = result.checkpoint.model->named_parameters();
  for (const auto& item : fresh->named_parameters()) {
    EXPECT_TRUE(testing::bitwise_equal(trained[item.key()], item.value())) << item.key();
  }
}

TEST(Train, SameSeedIsDeterministic) {
  const auto ds = small_dataset();
  const auto cfg = tiny_config(5);
  const auto a = train(cfg, ds, {.quiet = true});
  const auto b = train(cfg, ds, {.quiet = true});
  ASSERT_EQ(a.log.size(), b.log.size());
  EXPECT_NEAR(a.log.back().loss, b.log.back().loss, 1e-6);
}

TEST(Train, WritesLogAndCheckpoint) {
  TempDir dir;
  const auto ds = small_dataset();
  auto cfg = tiny_config(4);
  cfg.checkpoint_every = 2;
  train(cfg, ds, {.out_dir = dir.path(), .quiet = true});
  std::ifstream log(dir / "train_log.csv");
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, "step,loss,lr_encoder,lr_decoder");
  int rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 4);
  const auto meta = read_checkpoint_meta(dir / "checkpoint.safetensors");
  EXPECT_EQ(meta.step, 4);
  EXPECT_EQ(meta.class_names, ds.manifest.class_names);
}

TEST(Train, ResumeContinuesTheSameRun) {
  TempDir dir;
  const auto ds = small_dataset();
  auto cfg = tiny_config(6);
  const auto full = train(cfg, ds, {.quiet = true});

  auto first = cfg;
  first.steps = 3;
  train(first, ds, {.out_dir = dir.path(), .quiet = true});
  const auto resumed = train(cfg, ds, {.resume = dir / "checkpoint.safetensors", .quiet = true});
  ASSERT_EQ(resumed.log.size(), 3u);
  EXPECT_EQ(resumed.log.front().step, 4);
  EXPECT_NEAR(resumed.log.back().loss, full.log.back().loss, 1e-5);
  EXPECT_EQ(resumed.checkpoint.meta.step, 6);
}

TEST(Train, ResumeWithDifferentConfigIsRejected) {
  TempDir dir;
  const auto ds = small_dataset();
  auto cfg = tiny_config(2);
  train(cfg, ds, {.out_dir = dir.path(), .quiet = true});
  cfg.lr_decoder = 5e-3;
  EXPECT_THROW(train(cfg, ds, {.resume = dir / "checkpoint.safetensors", .quiet = true}),
               IncompatibleCheckpoint);
}

TEST(Train, EmptyDatasetIsRejected) {
  Dataset empty;
  EXPECT_THROW(train(tiny_config(1), empty, {.quiet = true}), EmptyDatasetError);
}

}  // namespace
}  // namespace usam

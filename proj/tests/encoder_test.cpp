#include <random>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "usam/checkpoint.hpp"
#include "usam/encoder.hpp"
#include "usam/error.hpp"
#include "usam/model.hpp"

namespace usam {
namespace {

TEST(CnnDownsampler, PyramidShapes) {
  torch::manual_seed(0);
  CnnDownsampler cnn(64);
  const auto pyr = cnn->forward(torch::rand({2, 3, 64, 48}));
  for (int64_t level = 0; level < 5; ++level) {
    const int64_t scale = int64_t{1} << level;
    EXPECT_EQ(pyr[level].sizes(),
              (torch::IntArrayRef{2, pyramid_channels(64, level), 64 / scale, 48 / scale}))
        << "level " << level;
  }
  EXPECT_EQ(pyramid_channels(64, 0), 8);
  EXPECT_EQ(pyramid_channels(64, 4), 192);
}

TEST(CnnDownsampler, RandomSizesDivisibleBy16) {
  torch::manual_seed(1);
  CnnDownsampler cnn(16);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const int64_t h = 16 * (1 + static_cast<int64_t>(rng() % 4));
    const int64_t w = 16 * (1 + static_cast<int64_t>(rng() % 4));
    const auto pyr = cnn->forward(torch::rand({1, 3, h, w}));
    EXPECT_EQ(pyr[4].size(2), h / 16);
    EXPECT_EQ(pyr[4].size(3), w / 16);
    EXPECT_EQ(pyr[4].size(1), 48);
  }
}

TEST(CnnDownsampler, RejectsNonDivisibleInput) {
  CnnDownsampler cnn(16);
  EXPECT_THROW(cnn->forward(torch::rand({1, 3, 40, 32})), ShapeError);
  EXPECT_THROW(cnn->forward(torch::rand({3, 32, 32})), ShapeError);
}

TEST(CnnDownsampler, GradientMatchesFiniteDifferences) {
  torch::manual_seed(2);
  CnnDownsampler cnn(16);
  cnn->to(torch::kFloat64);
  auto x = torch::rand({1, 3, 16, 16}, torch::kFloat64).requires_grad_(true);
  const auto weights = torch::randn({1, 48, 1, 1}, torch::kFloat64);
  auto objective = [&](const torch::Tensor& in) { return (cnn->forward(in)[4] * weights).sum(); };
  objective(x).backward();
  const auto grad = x.grad().clone();

  torch::NoGradGuard no_grad;
  std::mt19937_64 rng(8);
  const double h = 1e-6;
  for (int i = 0; i < 5; ++i) {
    const int64_t idx = static_cast<int64_t>(rng() % x.numel());
    auto plus = x.detach().clone();
    auto minus = x.detach().clone();
    plus.view(-1)[idx] += h;
    minus.view(-1)[idx] -= h;
    const double fd = (objective(plus).item<double>() - objective(minus).item<double>()) / (2 * h);
    const double an = grad.view(-1)[idx].item<double>();
    EXPECT_NEAR(an, fd, 1e-5 + 1e-4 * std::abs(fd)) << "index " << idx;
  }
}

BackboneConfig small_backbone(int64_t window) {
  BackboneConfig b;
  b.variant = "test";
  b.embed_dim = 48;
  b.depth = 2;
  b.heads = 2;
  b.window_size = window;
  b.global_attn_indexes = {1};
  return b;
}

TEST(ImageEncoderViT, OutputShape) {
  torch::manual_seed(3);
  ImageEncoderViT vit(small_backbone(2), 16, 4);
  const auto out = vit->forward(torch::randn({2, 48, 4, 4}));
  EXPECT_EQ(out.sizes(), (torch::IntArrayRef{2, 16, 4, 4}));
  const auto tokens = vit->encode_tokens(torch::randn({2, 48, 4, 4}));
  EXPECT_EQ(tokens.sizes(), (torch::IntArrayRef{2, 4, 4, 48}));
  // A grid unlike the configured one resamples pos_embed.
  EXPECT_EQ(vit->forward(torch::randn({1, 48, 3, 5})).sizes(), (torch::IntArrayRef{1, 16, 3, 5}));
  EXPECT_THROW(vit->forward(torch::randn({1, 32, 4, 4})), ShapeError);
}

TEST(ImageEncoderViT, ZeroInputStaysFinite) {
  torch::manual_seed(4);
  ImageEncoderViT vit(small_backbone(2), 16, 4);
  EXPECT_TRUE(torch::isfinite(vit->forward(torch::zeros({1, 48, 4, 4}))).all().item<bool>());
}

TEST(ImageEncoderViT, GlobalAttentionWithoutPositionIsPermutationEquivariant) {
  torch::manual_seed(5);
  ImageEncoderViT vit(small_backbone(0), 16, 4);
  {
    torch::NoGradGuard no_grad;
    for (auto& item : vit->named_parameters()) {
      if (item.key().find("pos") != std::string::npos) item.value().zero_();
    }
  }
  const auto x = torch::randn({1, 48, 4, 4});
  const auto perm = torch::randperm(16);
  const auto x_perm = x.flatten(2).index_select(2, perm).view({1, 48, 4, 4});
  const auto y = vit->encode_tokens(x).reshape({1, 16, 48});
  const auto y_perm = vit->encode_tokens(x_perm).reshape({1, 16, 48});
  EXPECT_TRUE(torch::allclose(y.index_select(1, perm), y_perm, 1e-4, 1e-5));
}

TEST(WindowPartition, RoundTripWithPadding) {
  const auto x = torch::randn({2, 5, 7, 3});
  int64_t ph = 0, pw = 0;
  const auto windows = window_partition(x, 4, ph, pw);
  EXPECT_EQ(ph, 8);
  EXPECT_EQ(pw, 8);
  EXPECT_EQ(windows.sizes(), (torch::IntArrayRef{2 * 4, 4, 4, 3}));
  const auto back = window_unpartition(windows, 4, ph, pw, 5, 7);
  EXPECT_TRUE(torch::equal(back, x));
}

TEST(RelPos, TableIndexesRelativeOffsets) {
  const auto table = torch::arange(7, torch::kFloat32).unsqueeze(1);
  const auto rel = get_rel_pos(4, 4, table);
  ASSERT_EQ(rel.sizes(), (torch::IntArrayRef{4, 4, 1}));
  for (int64_t q = 0; q < 4; ++q) {
    for (int64_t k = 0; k < 4; ++k) {
      EXPECT_EQ(rel[q][k][0].item<float>(), static_cast<float>(q - k + 3));
    }
  }
  // A table trained for a different span is resampled to 2 * size - 1 rows.
  EXPECT_EQ(get_rel_pos(2, 2, table).sizes(), (torch::IntArrayRef{2, 2, 1}));
}

TEST(Pretrained, LoadsBackboneAndReportsFreshBlocks) {
  testing::TempDir dir;
  auto source_cfg = ModelConfig::tiny(64);
  source_cfg.num_classes = 4;
  auto source = make_model(source_cfg, 1);
  save_model_weights(dir / "sam.safetensors", *source);

  auto target = make_model(ModelConfig::tiny(32), 2);
  const auto report = load_pretrained(dir / "sam.safetensors", *target);

  auto has = [](const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
  };
  EXPECT_TRUE(has(report.adapted, "image_encoder.pos_embed"));
  EXPECT_TRUE(has(report.adapted, "mask_decoder.mask_tokens.weight"));
  EXPECT_TRUE(has(report.loaded, "image_encoder.neck.0.weight"));
  EXPECT_TRUE(has(report.unused, "mask_decoder.output_hypernetworks_mlps.3.layers.0.weight"));
  for (const auto& name : report.fresh) {
    EXPECT_TRUE(name.starts_with("cnn_encoder.") || name.starts_with("upsampling_decoder.")) << name;
  }
  EXPECT_FALSE(report.fresh.empty());

  const auto src_state = source->named_parameters();
  const auto dst_state = target->named_parameters();
  EXPECT_TRUE(torch::equal(dst_state["image_encoder.neck.0.weight"],
                           src_state["image_encoder.neck.0.weight"]));
  EXPECT_TRUE(torch::equal(dst_state["mask_decoder.mask_tokens.weight"],
                           src_state["mask_decoder.mask_tokens.weight"].narrow(0, 0, 3)));
}

TEST(Pretrained, IncompatibleListsEveryProblem) {
  testing::TempDir dir;
  auto source = make_model(ModelConfig::tiny(32), 1);
  TensorArchive archive;
  for (const auto& item : source->named_parameters()) {
    if (item.key() == "image_encoder.neck.0.weight") {
      archive.tensors[item.key()] = torch::zeros({3, 3});
    } else if (item.key() != "image_encoder.neck.1.weight") {
      archive.tensors[item.key()] = item.value().detach();
    }
  }
  write_archive(dir / "bad.safetensors", archive);
  auto target = make_model(ModelConfig::tiny(32), 2);
  const auto before = target->named_parameters()["image_encoder.blocks.0.attn.qkv.weight"].clone();
  try {
    load_pretrained(dir / "bad.safetensors", *target);
    FAIL() << "expected IncompatibleCheckpoint";
  } catch (const IncompatibleCheckpoint& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("mis-shaped image_encoder.neck.0.weight"), std::string::npos) << msg;
    EXPECT_NE(msg.find("missing image_encoder.neck.1.weight"), std::string::npos) << msg;
  }
  // Nothing is copied when any tensor is incompatible.
  EXPECT_TRUE(torch::equal(target->named_parameters()["image_encoder.blocks.0.attn.qkv.weight"], before));
}

}  // namespace
}  // namespace usam

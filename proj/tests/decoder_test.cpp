#include <random>

#include <gtest/gtest.h>

#include "usam/decoder.hpp"
#include "usam/error.hpp"

namespace usam {
namespace {

double brute_force(const torch::Tensor& tokens, const torch::Tensor& source, int64_t c, int64_t i,
                   int64_t j) {
  auto t = tokens.accessor<double, 2>();
  auto s = source.accessor<double, 3>();
  double sum = 0.0;
  for (int64_t d = 0; d < tokens.size(1); ++d) sum += t[c][d] * s[d][i][j];
  return sum;
}

TEST(Combine, MatchesTripleLoop) {
  torch::manual_seed(0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto tokens = torch::randn({3, 32}, torch::kFloat64);
    const auto source = torch::randn({32, 5, 5}, torch::kFloat64);
    const auto out = combine(tokens, source);
    ASSERT_EQ(out.sizes(), (torch::IntArrayRef{3, 5, 5}));
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < 5; ++i)
        for (int64_t j = 0; j < 5; ++j)
          EXPECT_NEAR(out[c][i][j].item<double>(), brute_force(tokens, source, c, i, j), 1e-9);
  }
}

TEST(Combine, BatchedAgreesWithUnbatched) {
  const auto tokens = torch::randn({2, 4, 8});
  const auto source = torch::randn({2, 8, 3, 6});
  const auto out = combine(tokens, source);
  ASSERT_EQ(out.sizes(), (torch::IntArrayRef{2, 4, 3, 6}));
  for (int64_t b = 0; b < 2; ++b) {
    EXPECT_TRUE(torch::allclose(out[b], combine(tokens[b], source[b]), 1e-5, 1e-6));
  }
  EXPECT_THROW(combine(torch::randn({2, 4, 7}), source), ShapeError);
  EXPECT_THROW(combine(torch::randn({3, 4, 8}), source), ShapeError);
}

TEST(PredictMask, TiesGoToLowestClass) {
  auto logits = torch::zeros({3, 2, 2});
  logits[1][0][1] = 1.0;
  logits[2][1][0] = 1.0;
  logits[1][1][1] = 2.0;
  logits[2][1][1] = 2.0;
  const auto mask = predict_mask(logits);
  EXPECT_TRUE(torch::equal(mask, torch::tensor({{0, 1}, {2, 1}}, torch::kInt64)));
}

TEST(PredictMask, InvariantToPositiveAffineMaps) {
  torch::manual_seed(1);
  const auto logits = torch::randn({2, 3, 8, 8});
  const auto base = predict_mask(logits);
  EXPECT_EQ(base.sizes(), (torch::IntArrayRef{2, 8, 8}));
  EXPECT_TRUE(torch::equal(predict_mask(logits * 3.5 + 7.0), base));
  // A per-pixel shift shared by all classes does not change the argmax.
  EXPECT_TRUE(torch::equal(predict_mask(logits + torch::randn({2, 1, 8, 8})), base));
}

TEST(PredictMask, RejectsNaNAndLowRank) {
  auto logits = torch::zeros({3, 2, 2});
  logits[0][0][0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(predict_mask(logits), InvalidValue);
  EXPECT_THROW(predict_mask(torch::zeros({2, 2})), ShapeError);
}

TEST(SkipConfig, EnablesInnermostFirst) {
  EXPECT_EQ(skip_config(0).count(), 0);
  const auto one = skip_config(1);
  EXPECT_TRUE(one.level[3]);
  EXPECT_FALSE(one.level[2]);
  const auto three = skip_config(3);
  EXPECT_FALSE(three.level[0]);
  EXPECT_TRUE(three.level[1] && three.level[2] && three.level[3]);
  EXPECT_EQ(skip_config(4).count(), 4);
  EXPECT_THROW(skip_config(5), InvalidValue);
  EXPECT_THROW(skip_config(-1), InvalidValue);
}

FeaturePyramid random_pyramid(int64_t dim, int64_t size, bool grad) {
  FeaturePyramid pyr;
  for (int64_t level = 0; level < 5; ++level) {
    const int64_t s = size >> level;
    pyr[level] = torch::randn({1, pyramid_channels(dim, level), s, s}).requires_grad_(grad);
  }
  return pyr;
}

TEST(UpsamplingDecoder, Shapes) {
  torch::manual_seed(2);
  UpsamplingDecoder up(32, 3, skip_config(4));
  const auto pyr = random_pyramid(32, 64, false);
  const auto src = torch::randn({1, 32, 4, 4});
  EXPECT_EQ(up->up4_only(src, pyr).sizes(), (torch::IntArrayRef{1, 16, 8, 8}));
  EXPECT_EQ(up->upsample_source(src, pyr).sizes(), (torch::IntArrayRef{1, 4, 32, 32}));
  EXPECT_EQ(up->restore_full(torch::randn({1, 3, 32, 32}), pyr[0]).sizes(),
            (torch::IntArrayRef{1, 3, 64, 64}));
  EXPECT_THROW(up->restore_full(torch::randn({1, 3, 16, 16}), pyr[0]), ShapeError);
}

TEST(UpsamplingDecoder, OnlyWiredLevelsReachTheOutput) {
  for (int64_t k = 0; k <= 4; ++k) {
    torch::manual_seed(3 + k);
    const auto wiring = skip_config(k);
    UpsamplingDecoder up(32, 3, wiring);
    auto pyr = random_pyramid(32, 32, true);
    const auto src = torch::randn({1, 32, 2, 2});
    const auto half = combine(torch::randn({1, 3, 4}), up->upsample_source(src, pyr));
    up->restore_full(half, pyr[0]).sum().backward();
    for (int64_t level = 0; level < 4; ++level) {
      const bool reached = pyr[level].grad().defined() && pyr[level].grad().abs().sum().item<double>() > 0;
      EXPECT_EQ(reached, wiring.level[level]) << "k=" << k << " level " << level;
    }
  }
}

ModelConfig decoder_config(DecoderVariant variant) {
  auto c = ModelConfig::tiny(64);
  c.dim = 32;
  c.backbone.embed_dim = 96;
  c.decoder_mlp_dim = 64;
  c.decoder_heads = 4;
  c.decoder_variant = variant;
  return c;
}

TEST(MaskDecoder, RawMaskShapes) {
  torch::manual_seed(4);
  MaskDecoder dec(decoder_config(DecoderVariant::kUShaped));
  const auto queries = torch::randn({3 + 4, 32});
  const auto raw = dec->forward(torch::randn({32, 4, 4}), torch::randn({32, 4, 4}), queries);
  EXPECT_EQ(raw.source.sizes(), (torch::IntArrayRef{32, 4, 4}));
  EXPECT_EQ(raw.tokens.sizes(), (torch::IntArrayRef{3, 32}));
  EXPECT_EQ(dec->project_tokens(raw.tokens).sizes(), (torch::IntArrayRef{3, 4}));
  EXPECT_THROW(dec->upscale_initial(torch::randn({1, 32, 4, 4})), Error);
  EXPECT_THROW(dec->forward(torch::randn({16, 4, 4}), torch::randn({16, 4, 4}), queries), ShapeError);
}

TEST(MaskDecoder, ProjectionUsesOneMlpPerClass) {
  torch::manual_seed(5);
  MaskDecoder dec(decoder_config(DecoderVariant::kUShaped));
  const auto row = torch::randn({32});
  const auto tokens = torch::stack({row, row, row});
  const auto projected = dec->project_tokens(tokens);
  // The same input row gives different outputs through different MLPs.
  EXPECT_FALSE(torch::allclose(projected[0], projected[1]));
  EXPECT_TRUE(torch::allclose(
      projected[2], dec->output_hypernetworks_mlps[2]->as<MLP>()->forward(row), 1e-6, 1e-7));
  EXPECT_THROW(dec->project_tokens(torch::randn({2, 32})), ShapeError);
}

TEST(MaskDecoder, PromptOrderDoesNotMatter) {
  torch::manual_seed(6);
  MaskDecoder dec(decoder_config(DecoderVariant::kUShaped));
  const auto emb = torch::randn({32, 4, 4});
  const auto pe = torch::randn({32, 4, 4});
  const auto tokens = torch::randn({3, 32});
  const auto prompts = torch::randn({5, 32});
  const auto a = dec->forward(emb, pe, torch::cat({tokens, prompts}));
  const auto b = dec->forward(emb, pe, torch::cat({tokens, prompts.flip({0})}));
  EXPECT_TRUE(torch::allclose(a.tokens, b.tokens, 1e-4, 1e-5));
  EXPECT_TRUE(torch::allclose(a.source, b.source, 1e-4, 1e-5));
}

TEST(MaskDecoder, InitialVariantUpscalesFourTimes) {
  torch::manual_seed(7);
  MaskDecoder dec(decoder_config(DecoderVariant::kInitial));
  EXPECT_EQ(dec->upscale_initial(torch::randn({2, 32, 4, 4})).sizes(),
            (torch::IntArrayRef{2, 4, 16, 16}));
}

}  // namespace
}  // namespace usam

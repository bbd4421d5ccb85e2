#pragma once

#include <array>

#include <torch/torch.h>

#include "usam/config.hpp"
#include "usam/layers.hpp"

namespace usam {

/// Encoder features at scales 1, 1/2, 1/4, 1/8 and 1/16 with D/8, D/4, D/2,
/// D and 3D channels. Tensors are batched (B, C, h, w).
struct FeaturePyramid {
  std::array<torch::Tensor, 5> levels;

  const torch::Tensor& operator[](size_t i) const { return levels[i]; }
  torch::Tensor& operator[](size_t i) { return levels[i]; }
};

/// Channel count of pyramid level `level` for latent dimension `dim`.
int64_t pyramid_channels(int64_t dim, int64_t level);

/// Stride-1 stem followed by four maxpool(2) -> DoubleConv blocks.
class CnnDownsamplerImpl : public torch::nn::Module {
 public:
  explicit CnnDownsamplerImpl(int64_t dim, int64_t in_channels = 3);
  /// `image` is (B, C, H, W) with H and W divisible by 16.
  FeaturePyramid forward(const torch::Tensor& image);

 private:
  int64_t dim_;
  DoubleConv stem{nullptr};
  torch::nn::ModuleList down;
};
TORCH_MODULE(CnnDownsampler);

/// Multi-head self-attention with decomposed relative position bias over a
/// (B, H, W, C) token grid.
class RelPosAttentionImpl : public torch::nn::Module {
 public:
  RelPosAttentionImpl(int64_t dim, int64_t heads, int64_t grid_size);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear qkv{nullptr}, proj{nullptr};
  torch::Tensor rel_pos_h, rel_pos_w;

 private:
  int64_t heads_;
  double scale_;
};
TORCH_MODULE(RelPosAttention);

class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int64_t dim, int64_t heads, double mlp_ratio, int64_t window_size,
                       int64_t grid_size);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  int64_t window_size_;
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  RelPosAttention attn{nullptr};
  torch::nn::Sequential mlp{nullptr};
};
TORCH_MODULE(TransformerBlock);

/// Transformer over the deepest CNN feature map followed by the neck that
/// projects 3D token channels down to D.
class ImageEncoderViTImpl : public torch::nn::Module {
 public:
  ImageEncoderViTImpl(const BackboneConfig& backbone, int64_t out_dim, int64_t grid_size);

  /// (B, 3D, h, w) -> (B, D, h, w)
  torch::Tensor forward(const torch::Tensor& f4);
  /// Token grid after the transformer blocks, (B, h, w, 3D), before the neck.
  torch::Tensor encode_tokens(const torch::Tensor& f4);

  torch::Tensor pos_embed;

 private:
  int64_t embed_dim_;
  torch::nn::ModuleList blocks;
  torch::nn::Sequential neck{nullptr};
};
TORCH_MODULE(ImageEncoderViT);

torch::Tensor window_partition(const torch::Tensor& x, int64_t window, int64_t& padded_h,
                               int64_t& padded_w);
torch::Tensor window_unpartition(const torch::Tensor& windows, int64_t window, int64_t padded_h,
                                 int64_t padded_w, int64_t h, int64_t w);

/// Relative position table for a q_size x k_size query/key span, resizing
/// `rel_pos` linearly when it was trained for a different span.
torch::Tensor get_rel_pos(int64_t q_size, int64_t k_size, const torch::Tensor& rel_pos);

}  // namespace usam

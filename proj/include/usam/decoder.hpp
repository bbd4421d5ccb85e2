#pragma once

#include <array>

#include <torch/torch.h>

#include "usam/config.hpp"
#include "usam/encoder.hpp"
#include "usam/layers.hpp"

namespace usam {

/// Attention with separate q/k/v projections, optionally into a narrower
/// internal dimension (dim / downsample_rate).
class DecoderAttentionImpl : public torch::nn::Module {
 public:
  DecoderAttentionImpl(int64_t dim, int64_t heads, int64_t downsample_rate = 1);
  torch::Tensor forward(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v);

 private:
  int64_t heads_;
  torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};
};
TORCH_MODULE(DecoderAttention);

class TwoWayAttentionBlockImpl : public torch::nn::Module {
 public:
  TwoWayAttentionBlockImpl(int64_t dim, int64_t heads, int64_t mlp_dim, bool skip_first_layer_pe);
  std::pair<torch::Tensor, torch::Tensor> forward(torch::Tensor queries, torch::Tensor keys,
                                                  const torch::Tensor& query_pe,
                                                  const torch::Tensor& key_pe);

 private:
  bool skip_first_layer_pe_;
  DecoderAttention self_attn{nullptr}, cross_attn_token_to_image{nullptr},
      cross_attn_image_to_token{nullptr};
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr}, norm3{nullptr}, norm4{nullptr};
  torch::nn::Sequential mlp{nullptr};
};
TORCH_MODULE(TwoWayAttentionBlock);

/// Token <-> image cross-attention transformer.
class TwoWayTransformerImpl : public torch::nn::Module {
 public:
  TwoWayTransformerImpl(int64_t depth, int64_t dim, int64_t heads, int64_t mlp_dim);

  /// image (B, D, h, w), image_pe (B, D, h, w), tokens (B, T, D).
  /// Returns updated tokens (B, T, D) and image features (B, h*w, D).
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& image,
                                                  const torch::Tensor& image_pe,
                                                  const torch::Tensor& tokens);

 private:
  torch::nn::ModuleList layers;
  DecoderAttention final_attn_token_to_image{nullptr};
  torch::nn::LayerNorm norm_final_attn{nullptr};
};
TORCH_MODULE(TwoWayTransformer);

/// Raw mask information for one image: the mask source Src (D, h, w) and
/// the per-class mask tokens Mt (N, D).
struct RawMask {
  torch::Tensor source;
  torch::Tensor tokens;
};

class MaskDecoderImpl : public torch::nn::Module {
 public:
  explicit MaskDecoderImpl(const ModelConfig& config);

  /// emb (D, h, w), image_pe (D, h, w), queries (N + K, D) for one image.
  RawMask forward(const torch::Tensor& emb, const torch::Tensor& image_pe,
                  const torch::Tensor& queries);
  /// Row i of `tokens` (..., N, D) goes through its own MLP -> (..., N, D/8).
  torch::Tensor project_tokens(const torch::Tensor& tokens);
  /// Learned 4x transposed-conv upscaling of the initial two-step variant,
  /// (B, D, h, w) -> (B, D/8, 4h, 4w).
  torch::Tensor upscale_initial(const torch::Tensor& source);

  int64_t num_classes() const { return num_classes_; }

  torch::nn::Embedding mask_tokens{nullptr};
  TwoWayTransformer transformer{nullptr};
  torch::nn::ModuleList output_hypernetworks_mlps;
  torch::nn::Sequential output_upscaling{nullptr};

 private:
  int64_t num_classes_;
  int64_t dim_;
};
TORCH_MODULE(MaskDecoder);

/// Which encoder levels f0..f3 feed the upsampling path. Skips are enabled
/// innermost first: 1 -> f3, 2 -> f3 f2, 3 -> f3 f2 f1, 4 -> all.
struct SkipWiring {
  std::array<bool, 4> level{};

  int64_t count() const;
};
SkipWiring skip_config(int64_t k);

/// UP^4, UP^3, UP^2 reconstruct Src at 1/2 scale; UP^1 restores the
/// full-scale logits from the 1/2-scale mask logits.
class UpsamplingDecoderImpl : public torch::nn::Module {
 public:
  UpsamplingDecoderImpl(int64_t dim, int64_t num_classes, SkipWiring wiring);

  /// src (B, D, H/16, W/16) -> (B, D/8, H/2, W/2)
  torch::Tensor upsample_source(const torch::Tensor& src, const FeaturePyramid& pyr);
  /// Output of UP^4 alone, (B, D/2, H/8, W/8).
  torch::Tensor up4_only(const torch::Tensor& src, const FeaturePyramid& pyr);
  /// l_half (B, N, H/2, W/2) -> L (B, N, H, W)
  torch::Tensor restore_full(const torch::Tensor& l_half, const torch::Tensor& f0);

  const SkipWiring& wiring() const { return wiring_; }

  DoubleConv up4{nullptr}, up3{nullptr}, up2{nullptr}, up1{nullptr};
  torch::nn::Conv2d head{nullptr};

 private:
  torch::Tensor fuse(DoubleConv& block, const torch::Tensor& x, const torch::Tensor& skip,
                     bool use_skip);

  SkipWiring wiring_;
  int64_t dim_;
};
TORCH_MODULE(UpsamplingDecoder);

/// out[b, c, i, j] = sum_d tokens[b, c, d] * source[b, d, i, j]. Accepts
/// unbatched (N, C) x (C, h, w) as well.
torch::Tensor combine(const torch::Tensor& tokens, const torch::Tensor& source);

/// argmax over the class axis (-3); ties go to the lowest class id.
torch::Tensor predict_mask(const torch::Tensor& logits);

torch::Tensor upsample2x(const torch::Tensor& x);

}  // namespace usam

#include "usam/decoder.hpp"

#include <cmath>

#include "usam/error.hpp"

namespace usam {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

DecoderAttentionImpl::DecoderAttentionImpl(int64_t dim, int64_t heads, int64_t downsample_rate)
    : heads_(heads) {
  const int64_t internal = dim / downsample_rate;
  if (internal % heads != 0) throw InvalidValue("heads must divide the attention dimension");
  q_proj = register_module("q_proj", nn::Linear(dim, internal));
  k_proj = register_module("k_proj", nn::Linear(dim, internal));
  v_proj = register_module("v_proj", nn::Linear(dim, internal));
  out_proj = register_module("out_proj", nn::Linear(internal, dim));
}

namespace {

torch::Tensor separate_heads(const torch::Tensor& x, int64_t heads) {
  return x.reshape({x.size(0), x.size(1), heads, x.size(2) / heads}).transpose(1, 2);
}

torch::Tensor recombine_heads(const torch::Tensor& x) {
  return x.transpose(1, 2).reshape({x.size(0), x.size(2), x.size(1) * x.size(3)});
}

}  // namespace

torch::Tensor DecoderAttentionImpl::forward(const torch::Tensor& q, const torch::Tensor& k,
                                            const torch::Tensor& v) {
  auto qh = separate_heads(q_proj->forward(q), heads_);
  auto kh = separate_heads(k_proj->forward(k), heads_);
  auto vh = separate_heads(v_proj->forward(v), heads_);
  auto attn = qh.matmul(kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(qh.size(-1)));
  return out_proj->forward(recombine_heads(attn.softmax(-1).matmul(vh)));
}

TwoWayAttentionBlockImpl::TwoWayAttentionBlockImpl(int64_t dim, int64_t heads, int64_t mlp_dim,
                                                   bool skip_first_layer_pe)
    : skip_first_layer_pe_(skip_first_layer_pe) {
  self_attn = register_module("self_attn", DecoderAttention(dim, heads));
  norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
  cross_attn_token_to_image =
      register_module("cross_attn_token_to_image", DecoderAttention(dim, heads, 2));
  norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
  mlp = nn::Sequential();
  mlp->push_back("lin1", nn::Linear(dim, mlp_dim));
  mlp->push_back("act", nn::ReLU());
  mlp->push_back("lin2", nn::Linear(mlp_dim, dim));
  register_module("mlp", mlp);
  norm3 = register_module("norm3", nn::LayerNorm(nn::LayerNormOptions({dim})));
  norm4 = register_module("norm4", nn::LayerNorm(nn::LayerNormOptions({dim})));
  cross_attn_image_to_token =
      register_module("cross_attn_image_to_token", DecoderAttention(dim, heads, 2));
}

std::pair<torch::Tensor, torch::Tensor> TwoWayAttentionBlockImpl::forward(
    torch::Tensor queries, torch::Tensor keys, const torch::Tensor& query_pe,
    const torch::Tensor& key_pe) {
  if (skip_first_layer_pe_) {
    queries = self_attn->forward(queries, queries, queries);
  } else {
    auto q = queries + query_pe;
    queries = queries + self_attn->forward(q, q, queries);
  }
  queries = norm1->forward(queries);

  auto q = queries + query_pe;
  auto k = keys + key_pe;
  queries = norm2->forward(queries + cross_attn_token_to_image->forward(q, k, keys));

  queries = norm3->forward(queries + mlp->forward(queries));

  q = queries + query_pe;
  k = keys + key_pe;
  keys = norm4->forward(keys + cross_attn_image_to_token->forward(k, q, queries));
  return {queries, keys};
}

TwoWayTransformerImpl::TwoWayTransformerImpl(int64_t depth, int64_t dim, int64_t heads,
                                             int64_t mlp_dim) {
  for (int64_t i = 0; i < depth; ++i) {
    layers->push_back(TwoWayAttentionBlock(dim, heads, mlp_dim, i == 0));
  }
  register_module("layers", layers);
  final_attn_token_to_image =
      register_module("final_attn_token_to_image", DecoderAttention(dim, heads, 2));
  norm_final_attn = register_module("norm_final_attn", nn::LayerNorm(nn::LayerNormOptions({dim})));
}

std::pair<torch::Tensor, torch::Tensor> TwoWayTransformerImpl::forward(
    const torch::Tensor& image, const torch::Tensor& image_pe, const torch::Tensor& tokens) {
  auto keys = image.flatten(2).permute({0, 2, 1});
  auto key_pe = image_pe.flatten(2).permute({0, 2, 1});
  auto queries = tokens;
  for (const auto& layer : *layers) {
    std::tie(queries, keys) =
        layer->as<TwoWayAttentionBlock>()->forward(queries, keys, tokens, key_pe);
  }
  auto q = queries + tokens;
  auto k = keys + key_pe;
  queries = norm_final_attn->forward(queries + final_attn_token_to_image->forward(q, k, keys));
  return {queries, keys};
}

MaskDecoderImpl::MaskDecoderImpl(const ModelConfig& config)
    : num_classes_(config.num_classes), dim_(config.dim) {
  const int64_t d = config.dim;
  transformer = register_module(
      "transformer",
      TwoWayTransformer(config.decoder_depth, d, config.decoder_heads, config.decoder_mlp_dim));
  mask_tokens = register_module("mask_tokens", nn::Embedding(config.num_classes, d));
  for (int64_t i = 0; i < config.num_classes; ++i) {
    output_hypernetworks_mlps->push_back(MLP(d, d, d / 8, 3));
  }
  register_module("output_hypernetworks_mlps", output_hypernetworks_mlps);
  if (config.decoder_variant == DecoderVariant::kInitial) {
    output_upscaling = nn::Sequential(
        nn::ConvTranspose2d(nn::ConvTranspose2dOptions(d, d / 4, 2).stride(2)),
        LayerNorm2d(d / 4), nn::GELU(),
        nn::ConvTranspose2d(nn::ConvTranspose2dOptions(d / 4, d / 8, 2).stride(2)), nn::GELU());
    register_module("output_upscaling", output_upscaling);
  }
}

RawMask MaskDecoderImpl::forward(const torch::Tensor& emb, const torch::Tensor& image_pe,
                                 const torch::Tensor& queries) {
  if (emb.dim() != 3 || emb.size(0) != dim_) {
    throw ShapeError("image embedding must be (" + std::to_string(dim_) + ", h, w)");
  }
  if (queries.dim() != 2 || queries.size(1) != dim_) {
    throw ShapeError("queries must be (T, " + std::to_string(dim_) + ")");
  }
  if (image_pe.sizes() != emb.sizes()) throw ShapeError("image_pe must match the embedding");
  auto [tokens, keys] =
      transformer->forward(emb.unsqueeze(0), image_pe.unsqueeze(0), queries.unsqueeze(0));
  RawMask raw;
  raw.tokens = tokens[0].narrow(0, 0, num_classes_);
  raw.source = keys[0].transpose(0, 1).reshape({dim_, emb.size(1), emb.size(2)});
  return raw;
}

torch::Tensor MaskDecoderImpl::project_tokens(const torch::Tensor& tokens) {
  if (tokens.size(-2) != num_classes_) {
    throw ShapeError("expected " + std::to_string(num_classes_) + " mask tokens");
  }
  std::vector<torch::Tensor> rows;
  for (int64_t i = 0; i < num_classes_; ++i) {
    rows.push_back(output_hypernetworks_mlps[i]->as<MLP>()->forward(tokens.select(-2, i)));
  }
  return torch::stack(rows, -2);
}

torch::Tensor MaskDecoderImpl::upscale_initial(const torch::Tensor& source) {
  if (!output_upscaling) throw Error("model was not built with the initial decoder variant");
  return output_upscaling->forward(source);
}

int64_t SkipWiring::count() const {
  int64_t n = 0;
  for (bool b : level) n += b;
  return n;
}

SkipWiring skip_config(int64_t k) {
  if (k < 0 || k > 4) throw InvalidValue("skip count must be in 0..4, got " + std::to_string(k));
  SkipWiring w;
  // Innermost first: f3, f2, f1, f0.
  for (int64_t i = 0; i < k; ++i) w.level[3 - i] = true;
  return w;
}

torch::Tensor upsample2x(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

UpsamplingDecoderImpl::UpsamplingDecoderImpl(int64_t dim, int64_t num_classes, SkipWiring wiring)
    : wiring_(wiring), dim_(dim) {
  auto skip_ch = [&](int64_t level) { return wiring.level[level] ? pyramid_channels(dim, level) : 0; };
  up4 = register_module("up4", DoubleConv(dim + skip_ch(3), dim / 2));
  up3 = register_module("up3", DoubleConv(dim / 2 + skip_ch(2), dim / 4));
  up2 = register_module("up2", DoubleConv(dim / 4 + skip_ch(1), dim / 8));
  up1 = register_module("up1", DoubleConv(num_classes + skip_ch(0), dim / 8));
  head = register_module("head", nn::Conv2d(nn::Conv2dOptions(dim / 8, num_classes, 1)));
}

torch::Tensor UpsamplingDecoderImpl::fuse(DoubleConv& block, const torch::Tensor& x,
                                          const torch::Tensor& skip, bool use_skip) {
  auto up = upsample2x(x);
  if (use_skip) {
    if (skip.size(2) != up.size(2) || skip.size(3) != up.size(3) || skip.size(0) != up.size(0)) {
      throw ShapeError("skip feature " + std::to_string(skip.size(2)) + " x " +
                       std::to_string(skip.size(3)) + " does not match upsampled " +
                       std::to_string(up.size(2)) + " x " + std::to_string(up.size(3)));
    }
    up = torch::cat({up, skip}, 1);
  }
  return block->forward(up);
}

torch::Tensor UpsamplingDecoderImpl::up4_only(const torch::Tensor& src, const FeaturePyramid& pyr) {
  if (src.dim() != 4 || src.size(1) != dim_) throw ShapeError("source must be (B, D, h, w)");
  return fuse(up4, src, pyr[3], wiring_.level[3]);
}

torch::Tensor UpsamplingDecoderImpl::upsample_source(const torch::Tensor& src,
                                                     const FeaturePyramid& pyr) {
  auto r = up4_only(src, pyr);
  r = fuse(up3, r, pyr[2], wiring_.level[2]);
  return fuse(up2, r, pyr[1], wiring_.level[1]);
}

torch::Tensor UpsamplingDecoderImpl::restore_full(const torch::Tensor& l_half,
                                                  const torch::Tensor& f0) {
  if (l_half.dim() != 4) throw ShapeError("low-resolution logits must be (B, N, h, w)");
  if (f0.size(2) != 2 * l_half.size(2) || f0.size(3) != 2 * l_half.size(3)) {
    throw ShapeError("f0 must be twice the spatial size of the logits");
  }
  return head->forward(fuse(up1, l_half, f0, wiring_.level[0]));
}

torch::Tensor combine(const torch::Tensor& tokens, const torch::Tensor& source) {
  if (tokens.dim() == 2 && source.dim() == 3) {
    return combine(tokens.unsqueeze(0), source.unsqueeze(0)).squeeze(0);
  }
  if (tokens.dim() != 3 || source.dim() != 4 || tokens.size(0) != source.size(0)) {
    throw ShapeError("combine expects (B, N, C) tokens and (B, C, h, w) source");
  }
  if (tokens.size(2) != source.size(1)) {
    throw ShapeError("token dim " + std::to_string(tokens.size(2)) + " != source channels " +
                     std::to_string(source.size(1)));
  }
  const int64_t b = source.size(0), h = source.size(2), w = source.size(3);
  return tokens.matmul(source.reshape({b, source.size(1), h * w})).view({b, tokens.size(1), h, w});
}

torch::Tensor predict_mask(const torch::Tensor& logits) {
  if (logits.dim() < 3) throw ShapeError("logits must be (..., N, H, W)");
  if (torch::isnan(logits).any().item<bool>()) throw InvalidValue("NaN in logits");
  // torch::argmax returns the first maximal index, i.e. the lowest class id.
  return logits.argmax(-3);
}

}  // namespace usam

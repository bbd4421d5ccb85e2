#include "usam/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "usam/error.hpp"

namespace usam {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

int64_t pyramid_channels(int64_t dim, int64_t level) {
  switch (level) {
    case 0: return dim / 8;
    case 1: return dim / 4;
    case 2: return dim / 2;
    case 3: return dim;
    case 4: return 3 * dim;
    default: throw InvalidValue("pyramid level must be 0..4");
  }
}

CnnDownsamplerImpl::CnnDownsamplerImpl(int64_t dim, int64_t in_channels) : dim_(dim) {
  stem = register_module("stem", DoubleConv(in_channels, pyramid_channels(dim, 0)));
  for (int64_t level = 1; level <= 4; ++level) {
    down->push_back(DoubleConv(pyramid_channels(dim, level - 1), pyramid_channels(dim, level)));
  }
  register_module("down", down);
}

FeaturePyramid CnnDownsamplerImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 4) throw ShapeError("image must be (B, C, H, W)");
  if (image.size(2) % 16 != 0 || image.size(3) % 16 != 0) {
    throw ShapeError("image height and width must be divisible by 16, got " +
                     std::to_string(image.size(2)) + " x " + std::to_string(image.size(3)));
  }
  FeaturePyramid pyr;
  pyr[0] = stem->forward(image);
  for (size_t i = 0; i < 4; ++i) {
    auto pooled = F::max_pool2d(pyr[i], F::MaxPool2dFuncOptions(2));
    pyr[i + 1] = down[i]->as<DoubleConv>()->forward(pooled);
  }
  return pyr;
}

torch::Tensor get_rel_pos(int64_t q_size, int64_t k_size, const torch::Tensor& rel_pos) {
  const int64_t max_rel_dist = 2 * std::max(q_size, k_size) - 1;
  torch::Tensor resized = rel_pos;
  if (rel_pos.size(0) != max_rel_dist) {
    resized = F::interpolate(rel_pos.reshape({1, rel_pos.size(0), -1}).permute({0, 2, 1}),
                             F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{max_rel_dist})
                                 .mode(torch::kLinear)
                                 .align_corners(false))
                  .reshape({-1, max_rel_dist})
                  .permute({1, 0});
  }
  const double q_scale = std::max(static_cast<double>(k_size) / q_size, 1.0);
  const double k_scale = std::max(static_cast<double>(q_size) / k_size, 1.0);
  auto q_coords = torch::arange(q_size, torch::kFloat64).unsqueeze(1) * q_scale;
  auto k_coords = torch::arange(k_size, torch::kFloat64).unsqueeze(0) * k_scale;
  auto relative = (q_coords - k_coords) + (k_size - 1) * k_scale;
  return resized.index({relative.to(torch::kLong)});
}

RelPosAttentionImpl::RelPosAttentionImpl(int64_t dim, int64_t heads, int64_t grid_size)
    : heads_(heads), scale_(1.0 / std::sqrt(static_cast<double>(dim / heads))) {
  qkv = register_module("qkv", nn::Linear(nn::LinearOptions(dim, 3 * dim).bias(true)));
  proj = register_module("proj", nn::Linear(dim, dim));
  const int64_t head_dim = dim / heads;
  rel_pos_h = register_parameter("rel_pos_h", torch::zeros({2 * grid_size - 1, head_dim}));
  rel_pos_w = register_parameter("rel_pos_w", torch::zeros({2 * grid_size - 1, head_dim}));
}

torch::Tensor RelPosAttentionImpl::forward(const torch::Tensor& x) {
  const int64_t b = x.size(0), h = x.size(1), w = x.size(2);
  auto qkv_out = qkv->forward(x).reshape({b, h * w, 3, heads_, -1}).permute({2, 0, 3, 1, 4});
  auto parts = qkv_out.reshape({3, b * heads_, h * w, -1}).unbind(0);
  auto& q = parts[0];
  auto& k = parts[1];
  auto& v = parts[2];

  auto attn = (q * scale_).matmul(k.transpose(-2, -1));
  const auto rh = get_rel_pos(h, h, rel_pos_h);
  const auto rw = get_rel_pos(w, w, rel_pos_w);
  auto r_q = q.reshape({b * heads_, h, w, -1});
  auto rel_h = torch::einsum("bhwc,hkc->bhwk", {r_q, rh});
  auto rel_w = torch::einsum("bhwc,wkc->bhwk", {r_q, rw});
  attn = (attn.view({b * heads_, h, w, h, w}) + rel_h.unsqueeze(4) + rel_w.unsqueeze(3))
             .view({b * heads_, h * w, h * w});
  attn = attn.softmax(-1);
  auto out = attn.matmul(v).view({b, heads_, h, w, -1}).permute({0, 2, 3, 1, 4}).reshape({b, h, w, -1});
  return proj->forward(out);
}

torch::Tensor window_partition(const torch::Tensor& x, int64_t window, int64_t& padded_h,
                               int64_t& padded_w) {
  const int64_t b = x.size(0), h = x.size(1), w = x.size(2), c = x.size(3);
  const int64_t pad_h = (window - h % window) % window;
  const int64_t pad_w = (window - w % window) % window;
  auto padded = x;
  if (pad_h > 0 || pad_w > 0) padded = F::pad(x, F::PadFuncOptions({0, 0, 0, pad_w, 0, pad_h}));
  padded_h = h + pad_h;
  padded_w = w + pad_w;
  return padded.view({b, padded_h / window, window, padded_w / window, window, c})
      .permute({0, 1, 3, 2, 4, 5})
      .contiguous()
      .view({-1, window, window, c});
}

torch::Tensor window_unpartition(const torch::Tensor& windows, int64_t window, int64_t padded_h,
                                 int64_t padded_w, int64_t h, int64_t w) {
  const int64_t b = windows.size(0) / (padded_h * padded_w / window / window);
  auto x = windows.view({b, padded_h / window, padded_w / window, window, window, -1})
               .permute({0, 1, 3, 2, 4, 5})
               .contiguous()
               .view({b, padded_h, padded_w, -1});
  if (padded_h > h || padded_w > w) {
    using torch::indexing::Slice;
    x = x.index({Slice(), Slice(0, h), Slice(0, w), Slice()}).contiguous();
  }
  return x;
}

TransformerBlockImpl::TransformerBlockImpl(int64_t dim, int64_t heads, double mlp_ratio,
                                           int64_t window_size, int64_t grid_size)
    : window_size_(window_size) {
  norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim}).eps(1e-6)));
  attn = register_module("attn",
                         RelPosAttention(dim, heads, window_size > 0 ? window_size : grid_size));
  norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim}).eps(1e-6)));
  const auto hidden = static_cast<int64_t>(dim * mlp_ratio);
  mlp = nn::Sequential();
  mlp->push_back("lin1", nn::Linear(dim, hidden));
  mlp->push_back("act", nn::GELU());
  mlp->push_back("lin2", nn::Linear(hidden, dim));
  register_module("mlp", mlp);
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x) {
  auto shortcut = x;
  auto y = norm1->forward(x);
  const int64_t h = x.size(1), w = x.size(2);
  if (window_size_ > 0) {
    int64_t ph = 0, pw = 0;
    y = window_partition(y, window_size_, ph, pw);
    y = attn->forward(y);
    y = window_unpartition(y, window_size_, ph, pw, h, w);
  } else {
    y = attn->forward(y);
  }
  y = shortcut + y;
  return y + mlp->forward(norm2->forward(y));
}

ImageEncoderViTImpl::ImageEncoderViTImpl(const BackboneConfig& backbone, int64_t out_dim,
                                         int64_t grid_size)
    : embed_dim_(backbone.embed_dim) {
  backbone.validate();
  pos_embed = register_parameter("pos_embed",
                                 torch::zeros({1, grid_size, grid_size, backbone.embed_dim}));
  const auto& globals = backbone.global_attn_indexes;
  for (int64_t i = 0; i < backbone.depth; ++i) {
    const bool global = std::find(globals.begin(), globals.end(), i) != globals.end();
    blocks->push_back(TransformerBlock(backbone.embed_dim, backbone.heads, backbone.mlp_ratio,
                                       global ? 0 : backbone.window_size, grid_size));
  }
  register_module("blocks", blocks);
  neck = nn::Sequential(
      nn::Conv2d(nn::Conv2dOptions(backbone.embed_dim, out_dim, 1).bias(false)),
      LayerNorm2d(out_dim),
      nn::Conv2d(nn::Conv2dOptions(out_dim, out_dim, 3).padding(1).bias(false)),
      LayerNorm2d(out_dim));
  register_module("neck", neck);
}

torch::Tensor ImageEncoderViTImpl::encode_tokens(const torch::Tensor& f4) {
  if (f4.dim() != 4 || f4.size(1) != embed_dim_) {
    throw ShapeError("backbone expects " + std::to_string(embed_dim_) + " input channels, got " +
                     (f4.dim() == 4 ? std::to_string(f4.size(1)) : std::string("non-4-D input")));
  }
  auto x = f4.permute({0, 2, 3, 1});
  auto pos = pos_embed;
  if (pos.size(1) != x.size(1) || pos.size(2) != x.size(2)) {
    pos = F::interpolate(pos.permute({0, 3, 1, 2}),
                         F::InterpolateFuncOptions()
                             .size(std::vector<int64_t>{x.size(1), x.size(2)})
                             .mode(torch::kBilinear)
                             .align_corners(false))
              .permute({0, 2, 3, 1});
  }
  x = x + pos;
  for (const auto& block : *blocks) x = block->as<TransformerBlock>()->forward(x);
  return x;
}

torch::Tensor ImageEncoderViTImpl::forward(const torch::Tensor& f4) {
  return neck->forward(encode_tokens(f4).permute({0, 3, 1, 2}));
}

}  // namespace usam

#include "usam/model.hpp"

#include "usam/error.hpp"

namespace usam {

namespace F = torch::nn::functional;

ParamGroup param_group(const std::string& name) {
  if (name.starts_with("prompt_encoder.")) return ParamGroup::kFrozen;
  if (name.starts_with("cnn_encoder.") || name.starts_with("image_encoder.")) {
    return ParamGroup::kEncoder;
  }
  if (name.starts_with("mask_decoder.") || name.starts_with("upsampling_decoder.")) {
    return ParamGroup::kDecoder;
  }
  throw InvalidValue("parameter '" + name + "' belongs to no group");
}

USamImpl::USamImpl(const ModelConfig& config) : config_(config) {
  config.validate();
  cnn_encoder = register_module("cnn_encoder", CnnDownsampler(config.dim));
  image_encoder = register_module("image_encoder",
                                  ImageEncoderViT(config.backbone, config.dim, config.grid_size()));
  prompt_encoder = register_module("prompt_encoder",
                                   PromptEncoder(config.dim, config.num_classes, config.image_size));
  mask_decoder = register_module("mask_decoder", MaskDecoder(config));
  if (config.decoder_variant == DecoderVariant::kUShaped) {
    upsampling_decoder = register_module(
        "upsampling_decoder",
        UpsamplingDecoder(config.dim, config.num_classes, skip_config(config.skips)));
  }
  for (auto& p : prompt_encoder->parameters()) p.set_requires_grad(false);
}

ForwardOutput USamImpl::forward(const torch::Tensor& images, const std::vector<PromptSet>& prompts) {
  if (images.dim() != 4 || (images.size(1) != 1 && images.size(1) != 3)) {
    throw ShapeError("images must be (B, 1|3, H, W)");
  }
  if (static_cast<int64_t>(prompts.size()) != images.size(0)) {
    throw ShapeError("need one prompt set per image");
  }
  if (images.size(2) % 16 != 0 || images.size(3) % 16 != 0) {
    throw ShapeError("image height and width must be divisible by 16");
  }
  auto x = images.size(1) == 1 ? images.expand({-1, 3, -1, -1}) : images;

  ForwardOutput out;
  out.pyramid = cnn_encoder->forward(x);
  out.embedding = image_encoder->forward(out.pyramid[4]);
  const int64_t h = out.embedding.size(2), w = out.embedding.size(3);
  const auto image_pe = prompt_encoder->dense_pe(h, w);

  // The decoder runs per image: prompt counts differ across a batch.
  std::vector<torch::Tensor> sources, tokens;
  for (int64_t b = 0; b < images.size(0); ++b) {
    auto queries = build_queries(prompt_encoder->forward(prompts[b]), mask_decoder->mask_tokens->weight);
    auto raw = mask_decoder->forward(out.embedding[b], image_pe, queries);
    sources.push_back(raw.source);
    tokens.push_back(raw.tokens);
  }
  out.source = torch::stack(sources);
  out.mask_tokens = torch::stack(tokens);
  out.projected = mask_decoder->project_tokens(out.mask_tokens);

  if (config_.decoder_variant == DecoderVariant::kUShaped) {
    auto src_prime = upsampling_decoder->upsample_source(out.source, out.pyramid);
    out.low_res_logits = combine(out.projected, src_prime);
    out.logits = upsampling_decoder->restore_full(out.low_res_logits, out.pyramid[0]);
  } else {
    auto src_prime = mask_decoder->upscale_initial(out.source);
    out.low_res_logits = combine(out.projected, src_prime);
    out.logits = F::interpolate(out.low_res_logits,
                                F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{images.size(2), images.size(3)})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
  }
  return out;
}

torch::Tensor USamImpl::segment(const torch::Tensor& images, const std::vector<PromptSet>& prompts) {
  torch::NoGradGuard no_grad;
  return predict_mask(forward(images, prompts).logits);
}

std::vector<torch::Tensor> USamImpl::parameters_in(ParamGroup group) const {
  std::vector<torch::Tensor> out;
  for (const auto& item : named_parameters()) {
    if (param_group(item.key()) == group) out.push_back(item.value());
  }
  return out;
}

USam make_model(const ModelConfig& config, uint64_t seed) {
  torch::manual_seed(seed);
  return USam(config);
}

}  // namespace usam

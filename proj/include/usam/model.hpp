#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "usam/config.hpp"
#include "usam/decoder.hpp"
#include "usam/encoder.hpp"
#include "usam/prompting.hpp"

namespace usam {

/// Intermediate and final tensors of one batched forward pass.
struct ForwardOutput {
  FeaturePyramid pyramid;
  torch::Tensor embedding;       // (B, D, H/16, W/16)
  torch::Tensor source;          // Src, (B, D, H/16, W/16)
  torch::Tensor mask_tokens;     // Mt, (B, N, D)
  torch::Tensor projected;       // Mt', (B, N, D/8)
  torch::Tensor low_res_logits;  // l: (B, N, H/2, W/2), or H/4 for the initial variant
  torch::Tensor logits;          // L, (B, N, H, W)
};

enum class ParamGroup { kEncoder, kDecoder, kFrozen };

/// Optimiser group of a parameter, decided by its top-level module: the CNN
/// and transformer backbone form the encoder; mask decoder and upsampling
/// blocks the decoder; the prompt encoder is frozen.
ParamGroup param_group(const std::string& name);

class USamImpl : public torch::nn::Module {
 public:
  explicit USamImpl(const ModelConfig& config);

  /// `images` is (B, 1, H, W) or (B, 3, H, W) in [0, 1]; single-channel input
  /// is replicated to three channels. `prompts` has one entry per image with
  /// coordinates in model-input pixels.
  ForwardOutput forward(const torch::Tensor& images, const std::vector<PromptSet>& prompts);

  /// Argmax label maps (B, H, W) for inference.
  torch::Tensor segment(const torch::Tensor& images, const std::vector<PromptSet>& prompts);

  const ModelConfig& config() const { return config_; }

  std::vector<torch::Tensor> parameters_in(ParamGroup group) const;

  CnnDownsampler cnn_encoder{nullptr};
  ImageEncoderViT image_encoder{nullptr};
  PromptEncoder prompt_encoder{nullptr};
  MaskDecoder mask_decoder{nullptr};
  UpsamplingDecoder upsampling_decoder{nullptr};  // null for the initial variant

 private:
  ModelConfig config_;
};
TORCH_MODULE(USam);

/// Builds a model with deterministic initialisation for `seed`.
USam make_model(const ModelConfig& config, uint64_t seed);

}  // namespace usam

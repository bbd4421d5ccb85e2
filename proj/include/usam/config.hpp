#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace usam {

using json = nlohmann::json;

/// Transformer backbone that consumes the CNN's deepest feature map as tokens.
/// `embed_dim` must equal three times the latent dimension so the CNN output
/// can stand in for the patch embedding.
struct BackboneConfig {
  std::string variant = "vit-b-full";
  int64_t embed_dim = 768;
  int64_t depth = 12;
  int64_t heads = 12;
  double mlp_ratio = 4.0;
  // 0 disables windowing; blocks listed in `global_attn_indexes` always
  // attend globally.
  int64_t window_size = 14;
  std::vector<int64_t> global_attn_indexes = {2, 5, 8, 11};

  void validate() const;
};

enum class DecoderVariant { kUShaped, kInitial };

struct ModelConfig {
  BackboneConfig backbone;
  int64_t dim = 256;          // latent dimension D
  int64_t num_classes = 3;    // N, background included
  int64_t image_size = 224;   // square model input H = W
  int64_t skips = 4;          // enabled skip connections, innermost first
  DecoderVariant decoder_variant = DecoderVariant::kUShaped;
  int64_t decoder_depth = 2;
  int64_t decoder_heads = 8;
  int64_t decoder_mlp_dim = 2048;

  /// SAM ViT-B backbone with D = 256 at 224 x 224.
  static ModelConfig vit_b_full();
  /// Reduced width and depth for CI runs; every channel ratio is kept.
  static ModelConfig tiny(int64_t image_size = 32);
  static ModelConfig for_variant(const std::string& variant, int64_t image_size);

  int64_t grid_size() const { return image_size / 16; }
  void validate() const;
  /// Short identifier stored in checkpoints and reported by the service.
  std::string tag() const;
};

struct TrainConfig {
  ModelConfig model = ModelConfig::vit_b_full();
  int64_t batch_size = 24;
  double lr_encoder = 1e-3;
  double lr_decoder = 1e-4;
  bool cosine_decay = false;
  int64_t steps = 1000;
  uint64_t seed = 0;
  int64_t k_points = 3;
  double w_ce = 1.0;
  double w_dice = 1.0;
  bool augment = true;
  int64_t checkpoint_every = 0;  // 0: only the final checkpoint
  int64_t log_every = 10;

  void validate() const;
};

json to_json(const BackboneConfig& c);
json to_json(const ModelConfig& c);
json to_json(const TrainConfig& c);
BackboneConfig backbone_from_json(const json& j);
ModelConfig model_config_from_json(const json& j);

/// Train configs are flat JSON objects. Model keys (`variant`, `image_size`,
/// `skips`, `num_classes`, `decoder_variant`) pick the architecture; every
/// other key overrides a TrainConfig field. Unknown keys are rejected.
TrainConfig train_config_from_json(const json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

std::string to_string(DecoderVariant v);
DecoderVariant decoder_variant_from_string(const std::string& s);

/// True when two configs build parameter sets with identical names and shapes.
bool same_architecture(const ModelConfig& a, const ModelConfig& b);

}  // namespace usam

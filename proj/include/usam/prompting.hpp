#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <torch/torch.h>

namespace usam {

/// A labelled click in pixel coordinates of the model input. `x` is the
/// column, `y` the row; background (0) is never a valid prompt class.
struct PromptPoint {
  int64_t x = 0;
  int64_t y = 0;
  int64_t class_id = 1;

  friend bool operator==(const PromptPoint&, const PromptPoint&) = default;
};

struct PromptSet {
  std::vector<PromptPoint> points;  // may be empty (null prompt)

  size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  /// Throws InvalidValue naming the first point outside the image or with a
  /// class id outside 1..num_classes-1.
  void validate(int64_t height, int64_t width, int64_t num_classes) const;
};

/// For every foreground class present in `label` (H, W), draws
/// min(k_per_class, pixel count) of its pixels uniformly without replacement.
PromptSet sample_points(const torch::Tensor& label, int64_t k_per_class, int64_t num_classes,
                        std::mt19937_64& rng);

/// Maps pixel coordinates between image sizes through pixel centres,
/// clamped to the target grid.
PromptSet rescale_prompts(const PromptSet& prompts, int64_t from_h, int64_t from_w, int64_t to_h,
                          int64_t to_w);

/// Random Fourier features of normalised 2-D coordinates.
class PositionEmbeddingRandomImpl : public torch::nn::Module {
 public:
  explicit PositionEmbeddingRandomImpl(int64_t num_pos_feats, double scale = 1.0);

  /// `coords` (..., 2) in [0, 1] as (x, y) -> (..., 2 * num_pos_feats)
  torch::Tensor encode(const torch::Tensor& coords) const;
  /// Encoding of pixel centres on an h x w grid, (2 * num_pos_feats, h, w).
  torch::Tensor dense(int64_t h, int64_t w) const;

  torch::Tensor positional_encoding_gaussian_matrix;
};
TORCH_MODULE(PositionEmbeddingRandom);

/// Sparse point encoder. Its parameters are frozen during training.
class PromptEncoderImpl : public torch::nn::Module {
 public:
  PromptEncoderImpl(int64_t dim, int64_t num_classes, int64_t image_size);

  /// (K, D) point embeddings, or the single no-prompt row when `prompts` is
  /// empty.
  torch::Tensor forward(const PromptSet& prompts);
  /// Positional part only: encoding of the pixel-centre coordinates.
  torch::Tensor positional(const PromptSet& prompts) const;
  torch::Tensor class_embedding(int64_t class_id) const;
  torch::Tensor no_prompt_embedding() const;
  /// Image-grid positional encoding for an h x w embedding, (D, h, w).
  torch::Tensor dense_pe(int64_t h, int64_t w) const;

  int64_t dim() const { return dim_; }

 private:
  int64_t dim_;
  int64_t num_classes_;
  int64_t image_size_;
  PositionEmbeddingRandom pe_layer{nullptr};
  torch::nn::ModuleList point_embeddings;
  torch::nn::Embedding not_a_point_embed{nullptr};
};
TORCH_MODULE(PromptEncoder);

/// Learned mask tokens (N, D) followed by prompt embeddings (K, D).
torch::Tensor build_queries(const torch::Tensor& prompt_embeddings,
                            const torch::Tensor& mask_tokens);

}  // namespace usam

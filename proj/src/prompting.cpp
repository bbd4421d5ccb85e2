#include "usam/prompting.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "usam/error.hpp"

namespace usam {

namespace nn = torch::nn;

void PromptSet::validate(int64_t height, int64_t width, int64_t num_classes) const {
  for (size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (p.x < 0 || p.x >= width || p.y < 0 || p.y >= height) {
      throw InvalidValue("prompt point " + std::to_string(i) + " (" + std::to_string(p.x) + ", " +
                         std::to_string(p.y) + ") lies outside the " + std::to_string(width) +
                         " x " + std::to_string(height) + " image");
    }
    if (p.class_id < 1 || p.class_id >= num_classes) {
      throw InvalidValue("prompt point " + std::to_string(i) + " has class id " +
                         std::to_string(p.class_id) + ", expected 1.." +
                         std::to_string(num_classes - 1));
    }
  }
}

PromptSet sample_points(const torch::Tensor& label, int64_t k_per_class, int64_t num_classes,
                        std::mt19937_64& rng) {
  if (k_per_class < 0) throw InvalidValue("k_per_class must be >= 0");
  if (label.dim() != 2) throw ShapeError("label map must be 2-D");
  PromptSet prompts;
  if (k_per_class == 0) return prompts;

  const auto flat = label.to(torch::kInt64).contiguous().flatten();
  const auto* ids = flat.data_ptr<int64_t>();
  const int64_t width = label.size(1);
  std::vector<std::vector<int64_t>> by_class(num_classes);
  for (int64_t i = 0; i < flat.numel(); ++i) {
    if (ids[i] > 0 && ids[i] < num_classes) by_class[ids[i]].push_back(i);
  }
  for (int64_t c = 1; c < num_classes; ++c) {
    const auto& pixels = by_class[c];
    if (pixels.empty()) continue;
    std::vector<int64_t> chosen;
    std::sample(pixels.begin(), pixels.end(), std::back_inserter(chosen),
                std::min<int64_t>(k_per_class, static_cast<int64_t>(pixels.size())), rng);
    for (auto idx : chosen) prompts.points.push_back({idx % width, idx / width, c});
  }
  return prompts;
}

PromptSet rescale_prompts(const PromptSet& prompts, int64_t from_h, int64_t from_w, int64_t to_h,
                          int64_t to_w) {
  auto map = [](int64_t v, int64_t from, int64_t to) {
    const auto m = static_cast<int64_t>(std::floor((static_cast<double>(v) + 0.5) * to / from));
    return std::clamp<int64_t>(m, 0, to - 1);
  };
  PromptSet out;
  for (const auto& p : prompts.points) {
    out.points.push_back({map(p.x, from_w, to_w), map(p.y, from_h, to_h), p.class_id});
  }
  return out;
}

PositionEmbeddingRandomImpl::PositionEmbeddingRandomImpl(int64_t num_pos_feats, double scale) {
  positional_encoding_gaussian_matrix =
      register_buffer("positional_encoding_gaussian_matrix", scale * torch::randn({2, num_pos_feats}));
}

torch::Tensor PositionEmbeddingRandomImpl::encode(const torch::Tensor& coords) const {
  auto c = 2.0 * coords.to(positional_encoding_gaussian_matrix.dtype()) - 1.0;
  c = c.matmul(positional_encoding_gaussian_matrix) * (2.0 * std::numbers::pi);
  return torch::cat({c.sin(), c.cos()}, -1);
}

torch::Tensor PositionEmbeddingRandomImpl::dense(int64_t h, int64_t w) const {
  auto opts = torch::TensorOptions().dtype(positional_encoding_gaussian_matrix.dtype());
  auto ys = (torch::arange(h, opts) + 0.5) / static_cast<double>(h);
  auto xs = (torch::arange(w, opts) + 0.5) / static_cast<double>(w);
  auto grid = torch::stack({xs.view({1, w}).expand({h, w}), ys.view({h, 1}).expand({h, w})}, -1);
  return encode(grid).permute({2, 0, 1});
}

PromptEncoderImpl::PromptEncoderImpl(int64_t dim, int64_t num_classes, int64_t image_size)
    : dim_(dim), num_classes_(num_classes), image_size_(image_size) {
  pe_layer = register_module("pe_layer", PositionEmbeddingRandom(dim / 2));
  for (int64_t c = 1; c < num_classes; ++c) point_embeddings->push_back(nn::Embedding(1, dim));
  register_module("point_embeddings", point_embeddings);
  not_a_point_embed = register_module("not_a_point_embed", nn::Embedding(1, dim));
}

torch::Tensor PromptEncoderImpl::positional(const PromptSet& prompts) const {
  const auto k = static_cast<int64_t>(prompts.size());
  std::vector<double> coords;
  coords.reserve(2 * k);
  for (const auto& p : prompts.points) {
    // Pixel centres, normalised by the model input size.
    coords.push_back((p.x + 0.5) / static_cast<double>(image_size_));
    coords.push_back((p.y + 0.5) / static_cast<double>(image_size_));
  }
  auto t = torch::from_blob(coords.data(), {k, 2}, torch::kFloat64).clone();
  return pe_layer->encode(t);
}

torch::Tensor PromptEncoderImpl::class_embedding(int64_t class_id) const {
  if (class_id < 1 || class_id >= num_classes_) {
    throw InvalidValue("no embedding for class " + std::to_string(class_id));
  }
  return point_embeddings->ptr(class_id - 1)->as<nn::Embedding>()->weight[0];
}

torch::Tensor PromptEncoderImpl::no_prompt_embedding() const {
  return not_a_point_embed->weight;
}

torch::Tensor PromptEncoderImpl::forward(const PromptSet& prompts) {
  prompts.validate(image_size_, image_size_, num_classes_);
  if (prompts.empty()) return no_prompt_embedding();
  auto pe = positional(prompts);
  std::vector<torch::Tensor> labels;
  labels.reserve(prompts.size());
  for (const auto& p : prompts.points) labels.push_back(class_embedding(p.class_id));
  return pe + torch::stack(labels);
}

torch::Tensor PromptEncoderImpl::dense_pe(int64_t h, int64_t w) const { return pe_layer->dense(h, w); }

torch::Tensor build_queries(const torch::Tensor& prompt_embeddings,
                            const torch::Tensor& mask_tokens) {
  if (prompt_embeddings.dim() != 2 || mask_tokens.dim() != 2 ||
      prompt_embeddings.size(1) != mask_tokens.size(1)) {
    throw ShapeError("prompt embeddings and mask tokens must share dimension D");
  }
  return torch::cat({mask_tokens, prompt_embeddings}, 0);
}

}  // namespace usam

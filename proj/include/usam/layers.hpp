#pragma once

#include <torch/torch.h>

namespace usam {

/// LayerNorm over the channel axis of an NCHW tensor.
class LayerNorm2dImpl : public torch::nn::Module {
 public:
  explicit LayerNorm2dImpl(int64_t channels, double eps = 1e-6);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight, bias;

 private:
  double eps_;
};
TORCH_MODULE(LayerNorm2d);

/// (conv3x3 -> GroupNorm -> ReLU) x 2.
class DoubleConvImpl : public torch::nn::Module {
 public:
  DoubleConvImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t in_channels() const { return in_channels_; }

 private:
  int64_t in_channels_;
  torch::nn::Sequential block{nullptr};
};
TORCH_MODULE(DoubleConv);

/// Stack of linear layers with ReLU between them (none after the last).
class MLPImpl : public torch::nn::Module {
 public:
  MLPImpl(int64_t input_dim, int64_t hidden_dim, int64_t output_dim, int64_t num_layers);
  torch::Tensor forward(torch::Tensor x);

  torch::nn::ModuleList layers;
};
TORCH_MODULE(MLP);

int64_t norm_groups(int64_t channels);

}  // namespace usam

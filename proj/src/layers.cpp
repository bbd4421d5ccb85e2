#include "usam/layers.hpp"

#include <numeric>

namespace usam {

namespace nn = torch::nn;

LayerNorm2dImpl::LayerNorm2dImpl(int64_t channels, double eps) : eps_(eps) {
  weight = register_parameter("weight", torch::ones({channels}));
  bias = register_parameter("bias", torch::zeros({channels}));
}

torch::Tensor LayerNorm2dImpl::forward(const torch::Tensor& x) {
  auto mean = x.mean(1, true);
  auto var = (x - mean).pow(2).mean(1, true);
  auto normalized = (x - mean) / torch::sqrt(var + eps_);
  return weight.view({1, -1, 1, 1}) * normalized + bias.view({1, -1, 1, 1});
}

int64_t norm_groups(int64_t channels) { return std::gcd(channels, int64_t{8}); }

DoubleConvImpl::DoubleConvImpl(int64_t in_channels, int64_t out_channels)
    : in_channels_(in_channels) {
  block = register_module(
      "block",
      nn::Sequential(
          nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).padding(1).bias(false)),
          nn::GroupNorm(nn::GroupNormOptions(norm_groups(out_channels), out_channels)),
          nn::ReLU(),
          nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1).bias(false)),
          nn::GroupNorm(nn::GroupNormOptions(norm_groups(out_channels), out_channels)),
          nn::ReLU()));
}

torch::Tensor DoubleConvImpl::forward(const torch::Tensor& x) { return block->forward(x); }

MLPImpl::MLPImpl(int64_t input_dim, int64_t hidden_dim, int64_t output_dim, int64_t num_layers) {
  for (int64_t i = 0; i < num_layers; ++i) {
    const int64_t in = i == 0 ? input_dim : hidden_dim;
    const int64_t out = i == num_layers - 1 ? output_dim : hidden_dim;
    layers->push_back(nn::Linear(in, out));
  }
  register_module("layers", layers);
}

torch::Tensor MLPImpl::forward(torch::Tensor x) {
  for (size_t i = 0; i < layers->size(); ++i) {
    x = layers[i]->as<nn::Linear>()->forward(x);
    if (i + 1 < layers->size()) x = torch::relu(x);
  }
  return x;
}

}  // namespace usam

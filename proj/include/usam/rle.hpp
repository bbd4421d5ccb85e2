#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace usam {

/// Row-major run-length encoding of a label map as a flat list
/// [value0, run0, value1, run1, ...]. Adjacent runs always differ in value.
std::vector<int64_t> rle_encode(const torch::Tensor& labels);

/// Inverse of rle_encode. Throws InvalidValue unless the runs cover exactly
/// height * width pixels.
torch::Tensor rle_decode(const std::vector<int64_t>& rle, int64_t height, int64_t width);

}  // namespace usam

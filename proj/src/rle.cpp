#include "usam/rle.hpp"

#include "usam/error.hpp"

namespace usam {

std::vector<int64_t> rle_encode(const torch::Tensor& labels) {
  if (labels.dim() != 2) throw ShapeError("rle_encode expects a 2-D label map");
  const auto flat = labels.to(torch::kInt64).contiguous().view(-1);
  const auto* data = flat.data_ptr<int64_t>();
  std::vector<int64_t> out;
  const int64_t n = flat.numel();
  for (int64_t i = 0; i < n;) {
    int64_t j = i + 1;
    while (j < n && data[j] == data[i]) ++j;
    out.push_back(data[i]);
    out.push_back(j - i);
    i = j;
  }
  return out;
}

torch::Tensor rle_decode(const std::vector<int64_t>& rle, int64_t height, int64_t width) {
  if (rle.size() % 2 != 0) throw InvalidValue("RLE list must have an even length");
  if (height <= 0 || width <= 0) throw InvalidValue("RLE target size must be positive");
  auto out = torch::empty({height * width}, torch::kInt64);
  auto* data = out.data_ptr<int64_t>();
  int64_t pos = 0;
  for (size_t i = 0; i < rle.size(); i += 2) {
    const int64_t run = rle[i + 1];
    if (run <= 0) throw InvalidValue("RLE run " + std::to_string(i / 2) + " is not positive");
    if (pos + run > height * width) throw InvalidValue("RLE runs exceed the image size");
    std::fill(data + pos, data + pos + run, rle[i]);
    pos += run;
  }
  if (pos != height * width) throw InvalidValue("RLE runs cover fewer pixels than the image");
  return out.view({height, width});
}

}  // namespace usam

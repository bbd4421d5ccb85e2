#pragma once

#include <cstdint>
#include <optional>

#include <torch/torch.h>

namespace usam {

/// Overlap counts of one class between a predicted and a reference label map.
struct ClassCounts {
  int64_t pred = 0;
  int64_t gt = 0;
  int64_t intersection = 0;
};

ClassCounts class_counts(const torch::Tensor& pred, const torch::Tensor& gt, int64_t class_id);

/// 2|P∩G| / (|P|+|G|); nullopt when the class is absent from both maps.
std::optional<double> dice(const torch::Tensor& pred, const torch::Tensor& gt, int64_t class_id);
/// |P∩G| / |P∪G|; nullopt when the class is absent from both maps.
std::optional<double> iou(const torch::Tensor& pred, const torch::Tensor& gt, int64_t class_id);

std::optional<double> dice_from(const ClassCounts& c);
std::optional<double> iou_from(const ClassCounts& c);

}  // namespace usam

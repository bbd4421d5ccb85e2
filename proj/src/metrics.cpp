#include "usam/metrics.hpp"

#include "usam/error.hpp"

namespace usam {

ClassCounts class_counts(const torch::Tensor& pred, const torch::Tensor& gt, int64_t class_id) {
  if (pred.sizes() != gt.sizes()) throw ShapeError("prediction and reference shapes differ");
  const auto p = pred.eq(class_id);
  const auto g = gt.eq(class_id);
  return {p.sum().item<int64_t>(), g.sum().item<int64_t>(), p.logical_and(g).sum().item<int64_t>()};
}

std::optional<double> dice_from(const ClassCounts& c) {
  if (c.pred + c.gt == 0) return std::nullopt;
  return 2.0 * static_cast<double>(c.intersection) / static_cast<double>(c.pred + c.gt);
}

std::optional<double> iou_from(const ClassCounts& c) {
  const int64_t uni = c.pred + c.gt - c.intersection;
  if (uni == 0) return std::nullopt;
  return static_cast<double>(c.intersection) / static_cast<double>(uni);
}

std::optional<double> dice(const torch::Tensor& pred, const torch::Tensor& gt, int64_t class_id) {
  return dice_from(class_counts(pred, gt, class_id));
}

std::optional<double> iou(const torch::Tensor& pred, const torch::Tensor& gt, int64_t class_id) {
  return iou_from(class_counts(pred, gt, class_id));
}

}  // namespace usam

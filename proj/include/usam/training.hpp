#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "usam/checkpoint.hpp"
#include "usam/config.hpp"
#include "usam/data.hpp"
#include "usam/error.hpp"
#include "usam/model.hpp"
#include "usam/prompting.hpp"

namespace usam {

/// 1 - mean over all classes of the smoothed soft Dice between `probs`
/// (B, N, H, W) and the one-hot form of `gt` (B, H, W), summed over the batch.
torch::Tensor soft_dice_loss(const torch::Tensor& probs, const torch::Tensor& gt, double eps = 1e-5);

struct LossTerms {
  torch::Tensor total;
  torch::Tensor ce;
  torch::Tensor dice;  // the (1 - soft Dice) term
};

/// w_ce * cross-entropy (mean over pixels) + w_dice * soft Dice loss.
/// Accepts (N, H, W) with (H, W) or batched (B, N, H, W) with (B, H, W).
LossTerms segmentation_loss(const torch::Tensor& logits, const torch::Tensor& gt, double w_ce = 1.0,
                            double w_dice = 1.0);

/// Model-ready tensors for a group of pairs.
struct Batch {
  torch::Tensor images;  // (B, 1, S, S)
  torch::Tensor labels;  // (B, S, S)
  std::vector<PromptSet> prompts;
  std::vector<std::string> ids;
};

/// Optionally augments each pair at its native size, resizes to `image_size`
/// and samples `k_points` prompts per present class from the resized label.
/// `rngs` holds either one generator shared by all pairs or one per pair.
Batch make_batch(const std::vector<const SlicePair*>& pairs, int64_t image_size, int64_t k_points,
                 int64_t num_classes, bool augment, std::vector<std::mt19937_64*> rngs);

class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss(const std::string& what, std::vector<std::string> ids)
      : Error(what), batch_ids(std::move(ids)) {}
  std::vector<std::string> batch_ids;
};

/// Owns a model and its two-group Adam optimiser: encoder side (CNN pyramid,
/// backbone, neck) at lr_encoder and decoder side (mask decoder, hypernetwork
/// MLPs, mask tokens, upsampling blocks) at lr_decoder. Prompt-encoder
/// parameters are not registered with the optimiser.
class Trainer {
 public:
  Trainer(const TrainConfig& config, USam model);

  /// One forward/backward/update. Throws NonFiniteLoss (parameters untouched)
  /// when the loss is NaN or infinite.
  double step(const Batch& batch);

  /// Sets both group learning rates from the schedule for `step`.
  void apply_schedule(int64_t step);
  double lr_encoder() const;
  double lr_decoder() const;

  Checkpoint checkpoint(const std::vector<std::string>& class_names) const;
  void restore_optimizer(const Checkpoint& checkpoint);

  USam model() const { return model_; }
  int64_t steps_done() const { return steps_done_; }
  void set_steps_done(int64_t s) { steps_done_ = s; }
  const TrainConfig& config() const { return config_; }

 private:
  TrainConfig config_;
  USam model_;
  std::unique_ptr<torch::optim::Adam> optimizer_;
  int64_t steps_done_ = 0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;     // checkpoint + train_log.csv
  std::optional<std::filesystem::path> resume;      // continue from a checkpoint
  std::optional<std::filesystem::path> pretrained;  // SAM-style initial weights
  bool quiet = false;
};

struct LogRow {
  int64_t step;
  double loss;
  double lr_encoder;
  double lr_decoder;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LogRow> log;
};

/// Step-budgeted training loop over `data` with per-epoch shuffling,
/// augmentation and per-batch prompt resampling. Writes
/// `<out>/checkpoint.safetensors` every `checkpoint_every` steps and at the
/// end, and appends every step to `<out>/train_log.csv`.
TrainResult train(const TrainConfig& config, const Dataset& data, const TrainOptions& options = {});

}  // namespace usam

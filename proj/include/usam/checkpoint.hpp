#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "usam/config.hpp"
#include "usam/model.hpp"

namespace usam {

/// Checkpoints use the safetensors layout: an 8-byte little-endian header
/// length, a JSON header mapping tensor names to dtype/shape/byte range (plus
/// a string-valued "__metadata__" record), then the raw little-endian tensor
/// bytes. Model parameters keep their module names; optimiser state is stored
/// under "optimizer.<param>.exp_avg" / ".exp_avg_sq".
struct TensorArchive {
  std::map<std::string, torch::Tensor> tensors;
  std::map<std::string, std::string> metadata;
};

/// Writes to a temporary sibling and renames it into place.
void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

struct CheckpointMeta {
  ModelConfig model;
  std::optional<TrainConfig> train;
  int64_t step = 0;
  std::vector<std::string> class_names;
  std::string tag;  // model.tag() + "@" + step
};

struct Checkpoint {
  CheckpointMeta meta;
  USam model{nullptr};
  // Adam moments keyed by parameter name, and the Adam step count.
  std::map<std::string, std::pair<torch::Tensor, torch::Tensor>> adam_moments;
  int64_t adam_step = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Rebuilds the model from the stored config and loads every tensor.
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Reads only the metadata record.
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

/// Stores the model's own parameters and buffers, named as in the model.
void save_model_weights(const std::filesystem::path& path, USamImpl& model,
                        const std::map<std::string, std::string>& metadata = {});

struct PretrainedReport {
  std::vector<std::string> loaded;   // copied as-is
  std::vector<std::string> adapted;  // resized position tables, truncated token rows
  std::vector<std::string> fresh;    // CNN pyramid and upsampling blocks
  std::vector<std::string> unused;   // in the file but not in this model
};

/// Initialises backbone blocks, neck, prompt encoder and mask decoder from a
/// SAM-style checkpoint; CNN and upsampling blocks keep their fresh values.
/// Throws IncompatibleCheckpoint listing every missing or mis-shaped name.
PretrainedReport load_pretrained(const std::filesystem::path& path, USamImpl& model);

}  // namespace usam

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace usam {

/// Side length of every packed slice pair.
inline constexpr int64_t kPairSize = 224;

struct CTVolume {
  torch::Tensor hu;  // (slices, height, width) float32 Hounsfield units
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::string patient_id;

  void validate() const;
};

struct LabelVolume {
  torch::Tensor labels;  // (slices, height, width) int64 class ids
  std::vector<std::string> class_names;  // index 0 is background

  int64_t num_classes() const { return static_cast<int64_t>(class_names.size()); }
  void validate() const;
};

std::vector<std::string> default_class_names();

struct SliceSource {
  std::string patient_id;
  int64_t slice_index = 0;

  std::string key() const { return patient_id + "_" + std::to_string(slice_index); }
  friend bool operator==(const SliceSource&, const SliceSource&) = default;
};

struct SlicePair {
  torch::Tensor image;  // (224, 224) float32 in [0, 1]
  torch::Tensor label;  // (224, 224) int64
  SliceSource source;
};

struct Window {
  double center = 40.0;
  double width = 400.0;

  /// Parses "center:width", e.g. "40:400".
  static Window parse(const std::string& text);
};

/// clamp((hu - (center - width / 2)) / width, 0, 1), elementwise. Rejects
/// non-finite input, naming the first offending voxel.
torch::Tensor window_normalize(const torch::Tensor& hu, Window window = {});
torch::Tensor window_normalize(const CTVolume& volume, Window window = {});

/// Keeps the slices with any foreground voxel, windows them and resizes to
/// 224 x 224 (bilinear image, nearest label). Throws EmptyDatasetError when no
/// slice qualifies.
std::vector<SlicePair> build_slice_pairs(const CTVolume& volume, const LabelVolume& labels,
                                         Window window = {});

/// Resamples a 2-D image (bilinear) or label map (nearest) to size x size.
torch::Tensor resize_image(const torch::Tensor& image, int64_t height, int64_t width);
torch::Tensor resize_label(const torch::Tensor& label, int64_t height, int64_t width);

struct AugmentParams {
  bool flip_horizontal = false;
  bool flip_vertical = false;
  double angle_degrees = 0.0;
};

inline constexpr double kMaxRotationDegrees = 20.0;

AugmentParams draw_augment_params(std::mt19937_64& rng);
/// Applies flips, then a rotation about the centre with reflect padding. The
/// label is resampled with nearest neighbour so no new class ids appear.
SlicePair apply_augment(const SlicePair& pair, const AugmentParams& params);
SlicePair augment(const SlicePair& pair, std::mt19937_64& rng);

struct DatasetManifest {
  std::vector<SliceSource> pairs;
  std::string split = "train";
  std::vector<std::string> class_names = default_class_names();
  uint64_t seed = 0;

  void validate() const;
  static std::string image_path(const SliceSource& s) { return "images/" + s.key() + ".png"; }
  static std::string label_path(const SliceSource& s) { return "labels/" + s.key() + ".png"; }
};

/// Throws when the two manifests share a (patient, slice) entry.
void check_disjoint(const DatasetManifest& a, const DatasetManifest& b);

struct Dataset {
  DatasetManifest manifest;
  std::vector<SlicePair> pairs;  // parallel to manifest.pairs

  int64_t num_classes() const { return static_cast<int64_t>(manifest.class_names.size()); }
  size_t size() const { return pairs.size(); }
};

/// Layout: manifest.json, images/<pid>_<slice>.png (16-bit), labels/<pid>_<slice>.png (8-bit).
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

/// Pairs every `<name>.mhd` under `volume_dir` with `label_dir/<name>.mhd` and
/// packs the foreground slices of all of them.
Dataset pack_volumes(const std::filesystem::path& volume_dir,
                     const std::filesystem::path& label_dir, Window window,
                     const std::string& split,
                     const std::vector<std::string>& class_names = default_class_names());

/// Stand-in for private CT data: each slice holds a bowel-like annulus
/// (class 1), optionally a bright blob straddling its wall (class 2), and
/// `distractors` look-alike annuli labelled background that only a prompt
/// can tell apart from the target.
struct SyntheticSpec {
  int64_t n_volumes = 4;
  int64_t slices_per_volume = 8;
  int64_t native_size = 256;
  double annulus_outer_min = 22.0;  // pixels at native size
  double annulus_outer_max = 32.0;
  double wall_min = 8.0;
  double wall_max = 11.0;
  double tumor_probability = 0.5;
  double tumor_radius_min = 9.0;
  double tumor_radius_max = 14.0;
  int64_t distractors = 1;
  double noise_hu = 15.0;
  uint64_t seed = 0;
  std::string split = "train";
  std::string patient_prefix = "syn";

  void validate() const;
};

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SyntheticSpec& s);

struct SyntheticVolume {
  CTVolume volume;
  LabelVolume labels;
};

std::vector<SyntheticVolume> generate_synthetic_volumes(const SyntheticSpec& spec);
Dataset generate_synthetic_dataset(const SyntheticSpec& spec, Window window = {});

}  // namespace usam

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <torch/torch.h>

namespace usam {

/// Single-channel raster as stored in PNG. `pixels` is row-major; values use
/// the full range of `bit_depth` (8 or 16).
struct GrayImage {
  int64_t height = 0;
  int64_t width = 0;
  int bit_depth = 8;
  std::vector<uint16_t> pixels;

  uint16_t max_value() const { return bit_depth == 16 ? 65535 : 255; }
};

/// Decodes any PNG colour type to grayscale. Palette and low bit depths are
/// expanded to 8 bit; colour images are converted with libpng's default
/// luminance weights.
GrayImage decode_png(std::span<const uint8_t> bytes);
std::vector<uint8_t> encode_png(const GrayImage& image);
GrayImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const GrayImage& image);

/// MetaImage (.mhd + raw) volume, the format ITK-based annotation tools
/// export. `data` is (z, y, x) float64.
struct MetaImage {
  torch::Tensor data;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // x, y, z in mm
};

MetaImage read_mhd(const std::filesystem::path& header);
/// Writes `data` (z, y, x) as MET_SHORT (for HU) or MET_UCHAR (for labels)
/// with a sibling .raw file.
void write_mhd(const std::filesystem::path& header, const torch::Tensor& data,
               std::array<double, 3> spacing, bool as_labels);

std::vector<uint8_t> read_file(const std::filesystem::path& path);

}  // namespace usam

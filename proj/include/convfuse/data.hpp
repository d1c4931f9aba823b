// SPDX-License-Identifier: Apache-2.0

// Synthetic anomaly corpora and the on-disk dataset layout:
//
//   <root>/<split>/good/<id>.pgm
//   <root>/<split>/defect/<id>.pgm
//   <root>/ground_truth/defect/<id>_mask.pgm
//
// Images and masks are 8-bit binary graymaps; mask pixels are 0 or 255.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "convfuse/tensor.hpp"

namespace convfuse {

struct Sample {
  std::string id;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> mask;  // 0 or 1 per pixel
  int label = 0;

  bool operator==(const Sample&) const = default;
};

enum class TextureFamily { Noise, Grid, Mixed };
TextureFamily parse_texture_family(const std::string& name);
std::string texture_family_name(TextureFamily family);

struct SyntheticParams {
  std::size_t image_size = 32;
  std::size_t count = 200;
  TextureFamily texture = TextureFamily::Mixed;
  double anomaly_rate = 0.5;
  double texture_std = 10.0;            ///< intensity units on the 0..255 scale
  double min_defect_fraction = 0.03;    ///< of image area
  double max_defect_fraction = 0.12;
  double min_delta = 3.0;               ///< defect offset in texture std units
  double max_delta = 5.0;
  double brightness_min = 96.0;         ///< per-image mean intensity range
  double brightness_max = 160.0;
  std::string id_prefix = "s";

  void validate() const;
};

/// Deterministic per seed. Anomalous samples carry one rectangular or
/// elliptical defect whose exact mask is recorded.
std::vector<Sample> gen_synthetic(const SyntheticParams& params, std::uint64_t seed);

/// Scales raw 8-bit intensities into the encoder's input range.
double normalize_pixel(std::uint8_t value);

/// (B, 1, H, W) normalized encoder input.
Tensor images_tensor(const std::vector<const Sample*>& batch);
/// (B, H, W) binary masks.
Tensor masks_tensor(const std::vector<const Sample*>& batch);

// ---- graymap I/O ------------------------------------------------------------------

struct Graymap {
  std::size_t width = 0;
  std::size_t height = 0;
  unsigned maxval = 255;
  std::vector<std::uint16_t> values;
};

Graymap read_pgm(const std::filesystem::path& path);
/// Writes binary P5. 16-bit samples are big-endian when maxval > 255.
void write_pgm(const std::filesystem::path& path, const Graymap& image);

void export_dataset(const std::filesystem::path& root, const std::string& split, const std::vector<Sample>& samples);
/// Samples of one split, sorted by id. Good images get all-zero masks.
std::vector<Sample> load_dataset(const std::filesystem::path& root, const std::string& split);

}  // namespace convfuse

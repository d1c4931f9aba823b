// SPDX-License-Identifier: Apache-2.0

// Binary checkpoint, little-endian:
//
//   "CVFCKPT\0"  u32 version  u64 step
//   u64 len, config echo bytes
//   u64 count, then per tensor:
//     u32 len, name bytes  u8 trainable  u32 rank  u64 dims[rank]  f64 data[]
//
// Tensors appear in model parameter order, so identical models serialize to
// identical bytes.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "convfuse/backbone.hpp"
#include "convfuse/config.hpp"

namespace convfuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  bool trainable = false;
  Tensor value;

  bool operator==(const CheckpointEntry&) const = default;
};

struct Checkpoint {
  std::uint64_t step = 0;
  std::string config_text;
  std::vector<CheckpointEntry> tensors;

  bool operator==(const Checkpoint&) const = default;
};

Checkpoint make_checkpoint(const GroupedModel& model, const RunConfig& config, std::uint64_t step);

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws LoadError on truncation, bad magic or unsupported version.
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rebuilds the model described by the checkpoint's config and overwrites every
/// parameter with the stored values. Throws LoadError on a name or shape
/// mismatch.
GroupedModel restore_model(const Checkpoint& ckpt);
RunConfig checkpoint_config(const Checkpoint& ckpt);

}  // namespace convfuse

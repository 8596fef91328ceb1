#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dmrl/model.hpp"
#include "dmrl/training.hpp"

namespace dmrl {

/// Everything persisted by `save_checkpoint`.
///
/// Layout (little-endian): magic `DMRLCK01`; config block; u32 tensor count
/// then per tensor {u16 name length, name, u32 rank, u32 dims[rank], f32
/// data}; u32 Adam tensor count with the same encoding (`<name>.m`,
/// `<name>.v`); u64 step count; u64 epoch, f64 best validation recall, u64
/// best epoch, u64 epochs since best; u32 user key count + u16-prefixed keys;
/// u32 item key count + keys; u32 derived tensor count + tensors (refined
/// item embeddings, so a checkpoint can score without feature files).
struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  TrainState state;
  std::vector<std::string> user_keys;
  std::vector<std::string> item_keys;
  Tensor refined_text;   ///< optional, N_i × d
  Tensor refined_visual; ///< optional, N_i × d
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);

/// Throws FormatError on a bad magic or truncated file, and ConfigError when
/// `expected` is given and differs from the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ModelConfig>& expected = std::nullopt);

} // namespace dmrl

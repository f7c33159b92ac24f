#pragma once

// Checkpoint files: "PCPE", u32 version, u32-length config JSON, then one
// record per parameter (u32 name length, name, u32 rank, u64 extents,
// little-endian f64 values) until end of file.

#include <filesystem>

#include "pcpe/model.hpp"

namespace pcpe {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Model& model);

/// Config block only.
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

/// Copies stored values into `model`. Any difference in parameter names or
/// shapes is a ConfigError naming the first offender.
void load_parameters(const std::filesystem::path& path, Model& model);

/// Model rebuilt from the stored config and values.
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace pcpe

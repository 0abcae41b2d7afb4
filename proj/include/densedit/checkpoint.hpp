#pragma once

// Binary checkpoint: "DDITCKPT", uint32 version, uint64 header length, JSON
// header, then every tensor's doubles in header order (little-endian host).

#include <cstdint>
#include <filesystem>
#include <optional>

#include <json.hpp>

#include "densedit/backbone.hpp"

namespace densedit {

struct CheckpointMeta {
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();
};

/// Written to a temporary sibling and renamed, so an interrupted save never
/// replaces a good file with a partial one.
void save_checkpoint(const std::filesystem::path& path, const ModelState& state, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  ModelState state;
  CheckpointMeta meta;
};

/// Rebuilds the model (including adapters) from the header.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
/// Throws if the stored model config differs from `expected`.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace densedit

#pragma once

#include "ncs/config.h"
#include "ncs/geometry.h"
#include "ncs/parameterization.h"
#include "ncs/patching.h"
#include "ncs/training.h"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ncs {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  TriMesh mesh;  // normalized ground truth
  DiskChart global;
  PatchSet patches;
  TrainState state;
};

// Binary layout: "NCSCKPT\0", u32 version, u64 payload size, u32 CRC-32 of the payload, payload.
// Tensors are little-endian 32-bit floats, chart coordinates 64-bit.
std::vector<std::uint8_t> serializeCheckpoint(const Checkpoint& ckpt);
Checkpoint deserializeCheckpoint(const std::vector<std::uint8_t>& bytes);

void saveCheckpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint loadCheckpoint(const std::filesystem::path& path);

// Hash of the global chart and patch layout (connectivity and UVs); equal hashes mean aligned
// parameterizations.
std::uint64_t layoutHash(const DiskChart& global, const PatchSet& patches);

// CRC-32 of a file's bytes (reproducibility checks).
std::uint32_t fileCrc32(const std::filesystem::path& path);

} // namespace ncs

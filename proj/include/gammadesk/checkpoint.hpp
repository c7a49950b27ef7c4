#pragma once

#include <cstdint>
#include <filesystem>

#include "gammadesk/autodiff.hpp"

namespace gammadesk {

/// Checkpoint layout (all integers little-endian):
///   magic "GDCKPT\0\0" (8 bytes), u32 version, u32 parameter count, then per
///   parameter: u32 name length, name bytes, u32 rank, u64 dims[rank],
///   f64 payload[numel].
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params);
ParameterSet load_checkpoint(const std::filesystem::path& path);
/// Overwrites values in `params`; names and shapes must match the file exactly.
void load_checkpoint_into(const std::filesystem::path& path, ParameterSet& params);

/// Single tensor dump: magic "GDTENSOR", u32 version, u32 rank, u64 dims, f64 payload.
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace gammadesk

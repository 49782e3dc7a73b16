#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "epi_unwarp/optim.hpp"
#include "epi_unwarp/unet.hpp"

namespace epi::nn {

// Layout (all little-endian):
//   "EUW1" | u16 version | config block | u8 flags | optimizer block | u32 n_tensors |
//   n x { u16 name_len, name, u8 is_bias, u8 rank, u32 dims[rank], u64 count, f64 values[count] }
// flags bit 0: the model reads the T1w channels.
// Adam moments are stored as tensors named "adam.m/<param>" and "adam.v/<param>".
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  UNetConfig config;
  UNetParams params;
  OptimState state;
  bool use_t1 = true;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace epi::nn

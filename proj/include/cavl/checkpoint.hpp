#pragma once

#include <optional>
#include <string>

#include "cavl/config.hpp"
#include "cavl/optimizer.hpp"
#include "cavl/params.hpp"

namespace cavl {

// Checkpoint layout, little-endian:
//   magic "CAVLCKPT" | version u32 | config JSON string | seed u64 |
//   extra JSON string (mode/bottleneck/task metadata) |
//   tensor count u64 | per tensor: name | flags u8 (bit0 = trainable) |
//     tensor (CAVLTNSR format) |
//   optimizer step u64 | state count u64 | per entry: name | m | v tensors
inline constexpr char kCheckpointMagic[8] = {'C', 'A', 'V', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::uint64_t seed = 0;
  nlohmann::json extra;  // e.g. {"finetune_mode": "adapter2"}
  ParamStore params;
  std::size_t optim_step = 0;
  std::vector<std::pair<std::string, AdamOptimizer::Moments>> optim_state;
};

void save_checkpoint(const ParamStore& params, const AdamOptimizer* optim,
                     const RunConfig& config, std::uint64_t seed,
                     const nlohmann::json& extra, const std::string& path);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace cavl

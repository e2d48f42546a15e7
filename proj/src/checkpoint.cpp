#include "cavl/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "cavl/tensor_io.hpp"

namespace cavl {

void save_checkpoint(const ParamStore& params, const AdamOptimizer* optim,
                     const RunConfig& config, std::uint64_t seed,
                     const nlohmann::json& extra, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_bytes(os, kCheckpointMagic, sizeof kCheckpointMagic);
  write_u32(os, kCheckpointVersion);
  write_string(os, run_config_to_json(config).dump());
  write_u64(os, seed);
  write_string(os, extra.dump());

  write_u64(os, params.size());
  for (const auto& e : params.entries()) {
    write_string(os, e.name);
    const std::uint8_t flags = e.tensor.requires_grad() ? 1 : 0;
    write_bytes(os, &flags, 1);
    write_tensor(os, e.tensor);
  }

  if (optim) {
    write_u64(os, optim->step_count());
    const auto entries = optim->entries(params);
    write_u64(os, entries.size());
    for (const auto& [name, moments] : entries) {
      write_string(os, name);
      const std::size_t n = moments->m.size();
      write_tensor(os, Tensor(Shape{n}, moments->m));
      write_tensor(os, Tensor(Shape{n}, moments->v));
    }
  } else {
    write_u64(os, 0);
    write_u64(os, 0);
  }
  if (!os) throw IoError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[8];
  read_bytes(is, magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw MalformedFile(path + ": bad checkpoint magic");
  }
  const std::uint32_t version = read_u32(is);
  if (version != kCheckpointVersion) {
    throw CheckpointVersionMismatch(path + ": checkpoint version " +
                                    std::to_string(version) + ", expected " +
                                    std::to_string(kCheckpointVersion));
  }

  Checkpoint ck;
  try {
    ck.config = run_config_from_json(nlohmann::json::parse(read_string(is)));
  } catch (const nlohmann::json::parse_error& e) {
    throw MalformedFile(path + ": bad embedded config: " + e.what());
  }
  ck.seed = read_u64(is);
  try {
    ck.extra = nlohmann::json::parse(read_string(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw MalformedFile(path + ": bad checkpoint metadata: " + e.what());
  }

  const std::uint64_t count = read_u64(is);
  if (count > (1ULL << 24)) throw MalformedFile(path + ": implausible tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = read_string(is);
    std::uint8_t flags;
    read_bytes(is, &flags, 1);
    Tensor t = read_tensor(is);
    ck.params.add(name, std::move(t), (flags & 1) != 0);
  }

  ck.optim_step = static_cast<std::size_t>(read_u64(is));
  const std::uint64_t optim_count = read_u64(is);
  if (optim_count > (1ULL << 24)) throw MalformedFile(path + ": implausible state count");
  for (std::uint64_t i = 0; i < optim_count; ++i) {
    const std::string name = read_string(is);
    Tensor m = read_tensor(is);
    Tensor v = read_tensor(is);
    if (!ck.params.contains(name) || m.numel() != ck.params.at(name).numel() ||
        v.numel() != m.numel()) {
      throw MalformedFile(path + ": optimizer state does not match parameters");
    }
    AdamOptimizer::Moments mo;
    mo.m.assign(m.values().begin(), m.values().end());
    mo.v.assign(v.values().begin(), v.values().end());
    ck.optim_state.emplace_back(name, std::move(mo));
  }
  return ck;
}

}  // namespace cavl

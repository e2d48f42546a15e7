#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cavl/model.hpp"

namespace cavl {

enum class FinetuneMode { Full, Adapter1, Adapter2 };

FinetuneMode finetune_mode_from_string(const std::string& s);
const char* finetune_mode_name(FinetuneMode m);

struct TaskSpec {
  std::string name = "retrieval";
  std::size_t output_dim = 2;  // pair match / mismatch
};

/// Disjoint split of every named tensor into trainable and frozen sets, with
/// summed element counts.
struct ParameterPartition {
  std::vector<std::string> trainable;
  std::vector<std::string> frozen;
  std::size_t trainable_count = 0;
  std::size_t frozen_count = 0;
};

/// Name-rule partition. Throws UnknownParameter for names no rule covers.
ParameterPartition partition_parameters(const ParamStore& params, FinetuneMode mode);

/// Writes the partition's trainable flags onto the tensors.
void apply_partition(ParamStore& params, const ParameterPartition& partition);

/// Freezes the whole backbone and adds a one-layer shortcut block over the
/// fused input embeddings plus an output block
/// (concat -> linear 2D->D -> GELU -> linear D->task).
ParameterPartition build_adapter1(ParamStore& params, const ModelConfig& cfg,
                                  const TaskSpec& task, Rng& rng);

/// Inserts two bottleneck adapters per layer (after attention, after the
/// FFN), trains adapters + every LayerNorm + the task head, freezes the
/// rest. Up-projections start at zero so the initial forward equals the
/// frozen backbone exactly.
ParameterPartition build_adapter2(ParamStore& params, const ModelConfig& cfg,
                                  std::size_t bottleneck, const TaskSpec& task, Rng& rng);

struct CountReport {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  double reduction_fraction = 0.0;  // 1 - trainable / total
};

CountReport count_parameters(const ParameterPartition& partition);

nlohmann::json partition_to_json(const ParameterPartition& partition,
                                 const ParamStore& params, FinetuneMode mode);

/// Task logits for adapter1: output_block(concat(pool(backbone), pool(shortcut))).
Var adapter1_task_logits(Tape& t, const Batch& batch, const BoundParams& params,
                         const ModelConfig& cfg, const EncoderOutputs& enc);

/// Task logits for full/adapter2 fine-tuning: linear head on the [CLS] state.
Var cls_task_logits(Tape& t, const BoundParams& params, Var cls_states);

/// SHA-256 of each parameter's raw bytes, keyed by name.
std::unordered_map<std::string, std::string> param_hashes(const ParamStore& params,
                                                          bool frozen_only);

}  // namespace cavl

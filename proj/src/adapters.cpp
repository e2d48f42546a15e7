#include "cavl/adapters.hpp"

#include <sstream>

#include "cavl/sha256.hpp"

namespace cavl {

FinetuneMode finetune_mode_from_string(const std::string& s) {
  if (s == "full") return FinetuneMode::Full;
  if (s == "adapter1") return FinetuneMode::Adapter1;
  if (s == "adapter2") return FinetuneMode::Adapter2;
  throw InvalidConfig("unknown fine-tune mode \"" + s + "\"");
}

const char* finetune_mode_name(FinetuneMode m) {
  switch (m) {
    case FinetuneMode::Full: return "full";
    case FinetuneMode::Adapter1: return "adapter1";
    case FinetuneMode::Adapter2: return "adapter2";
  }
  return "full";
}

namespace {

std::vector<std::string> split_name(const std::string& name) {
  std::vector<std::string> parts;
  std::stringstream ss(name);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  return parts;
}

bool is_backbone(const std::vector<std::string>& p) {
  if (p.empty()) return false;
  if (p[0] == "emb" || p[0] == "vis" || p[0] == "layer") return true;
  if (p[0] == "head" && p.size() >= 2 &&
      (p[1] == "mlm" || p[1] == "nsp" || p[1] == "cap")) {
    return true;
  }
  return false;
}

bool is_layer_norm(const std::vector<std::string>& p) {
  return p.size() == 4 && p[0] == "layer" && (p[2] == "ln1" || p[2] == "ln2");
}

bool is_task_head(const std::vector<std::string>& p) {
  return p.size() >= 2 && p[0] == "head" && p[1] == "task";
}

}  // namespace

ParameterPartition partition_parameters(const ParamStore& params, FinetuneMode mode) {
  ParameterPartition out;
  for (const auto& e : params.entries()) {
    const auto parts = split_name(e.name);
    bool trainable;
    switch (mode) {
      case FinetuneMode::Full:
        trainable = true;
        break;
      case FinetuneMode::Adapter1:
        if (parts[0] == "shortcut" || parts[0] == "out" || is_task_head(parts)) {
          trainable = true;
        } else if (is_backbone(parts)) {
          trainable = false;
        } else {
          throw UnknownParameter("no adapter1 partition rule for " + e.name);
        }
        break;
      case FinetuneMode::Adapter2:
        if (parts[0] == "adapter" || is_task_head(parts) || is_layer_norm(parts)) {
          trainable = true;
        } else if (is_backbone(parts)) {
          trainable = false;
        } else {
          throw UnknownParameter("no adapter2 partition rule for " + e.name);
        }
        break;
      default:
        throw InvalidConfig("bad fine-tune mode");
    }
    if (trainable) {
      out.trainable.push_back(e.name);
      out.trainable_count += e.tensor.numel();
    } else {
      out.frozen.push_back(e.name);
      out.frozen_count += e.tensor.numel();
    }
  }
  return out;
}

void apply_partition(ParamStore& params, const ParameterPartition& partition) {
  for (const auto& name : partition.trainable) params.at(name).set_requires_grad(true);
  for (const auto& name : partition.frozen) params.at(name).set_requires_grad(false);
}

namespace {

void add_task_head(ParamStore& p, const ModelConfig& cfg, const TaskSpec& task, Rng& rng) {
  p.add("head.task.w", normal_init({cfg.hidden, task.output_dim}, rng));
  p.add("head.task.b", Tensor(Shape{task.output_dim}));
}

}  // namespace

ParameterPartition build_adapter1(ParamStore& params, const ModelConfig& cfg,
                                  const TaskSpec& task, Rng& rng) {
  const std::size_t d = cfg.hidden;
  for (const char* part : {"q", "k", "v", "o"}) {
    params.add(std::string("shortcut.attn.") + part + ".w", normal_init({d, d}, rng));
    params.add(std::string("shortcut.attn.") + part + ".b", Tensor(Shape{d}));
  }
  params.add("shortcut.ffn.1.w", normal_init({d, cfg.ffn_dim}, rng));
  params.add("shortcut.ffn.1.b", Tensor(Shape{cfg.ffn_dim}));
  params.add("shortcut.ffn.2.w", normal_init({cfg.ffn_dim, d}, rng));
  params.add("shortcut.ffn.2.b", Tensor(Shape{d}));
  params.add("shortcut.ln1.g", Tensor(Shape{d}, 1.0));
  params.add("shortcut.ln1.b", Tensor(Shape{d}));
  params.add("shortcut.ln2.g", Tensor(Shape{d}, 1.0));
  params.add("shortcut.ln2.b", Tensor(Shape{d}));
  params.add("out.1.w", normal_init({2 * d, d}, rng));
  params.add("out.1.b", Tensor(Shape{d}));
  add_task_head(params, cfg, task, rng);

  ParameterPartition partition = partition_parameters(params, FinetuneMode::Adapter1);
  apply_partition(params, partition);
  return partition;
}

ParameterPartition build_adapter2(ParamStore& params, const ModelConfig& cfg,
                                  std::size_t bottleneck, const TaskSpec& task, Rng& rng) {
  const std::size_t d = cfg.hidden, m = bottleneck;
  if (m < 1 || m >= d) {
    throw InvalidBottleneck("adapter bottleneck must satisfy 1 <= m < hidden, got " +
                            std::to_string(m));
  }
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string base = "adapter." + std::to_string(i) + ".";
    for (const char* mod : {"attn", "ffn"}) {
      params.add(base + mod + ".down.w", normal_init({d, m}, rng));
      params.add(base + mod + ".down.b", Tensor(Shape{m}));
      // zero-initialized up-projection keeps the insertion an exact identity
      params.add(base + mod + ".up.w", Tensor(Shape{m, d}));
      params.add(base + mod + ".up.b", Tensor(Shape{d}));
    }
  }
  add_task_head(params, cfg, task, rng);

  ParameterPartition partition = partition_parameters(params, FinetuneMode::Adapter2);
  apply_partition(params, partition);
  return partition;
}

CountReport count_parameters(const ParameterPartition& partition) {
  CountReport r;
  r.trainable = partition.trainable_count;
  r.frozen = partition.frozen_count;
  const std::size_t total = r.trainable + r.frozen;
  r.reduction_fraction =
      total == 0 ? 0.0 : 1.0 - static_cast<double>(r.trainable) / static_cast<double>(total);
  return r;
}

nlohmann::json partition_to_json(const ParameterPartition& partition,
                                 const ParamStore& params, FinetuneMode mode) {
  const CountReport counts = count_parameters(partition);
  nlohmann::json per_tensor = nlohmann::json::array();
  for (const auto& e : params.entries()) {
    per_tensor.push_back({{"name", e.name},
                          {"elements", e.tensor.numel()},
                          {"trainable", e.tensor.requires_grad()}});
  }
  return nlohmann::json{{"mode", finetune_mode_name(mode)},
                        {"trainable", counts.trainable},
                        {"frozen", counts.frozen},
                        {"reduction_fraction", counts.reduction_fraction},
                        {"per_tensor", per_tensor}};
}

Var adapter1_task_logits(Tape& t, const Batch& batch, const BoundParams& params,
                         const ModelConfig& cfg, const EncoderOutputs& enc) {
  const Tensor key_bias = attention_key_bias(batch);
  Var shortcut = transformer_layer_forward(t, enc.embeddings, shortcut_layer_vars(params),
                                           key_bias, batch.size, batch.seq, cfg.heads,
                                           cfg.layer_norm_eps);
  Var pool = t.constant(pooling_matrix(batch, batch.real));
  Var pooled_backbone = matmul(t, pool, enc.states);
  Var pooled_shortcut = matmul(t, pool, shortcut);
  Var cat = concat_cols(t, pooled_backbone, pooled_shortcut);
  Var hidden = gelu(t, add_bias_rows(t, matmul(t, cat, params.at("out.1.w")),
                                     params.at("out.1.b")));
  return add_bias_rows(t, matmul(t, hidden, params.at("head.task.w")),
                       params.at("head.task.b"));
}

Var cls_task_logits(Tape& t, const BoundParams& params, Var cls_states) {
  return add_bias_rows(t, matmul(t, cls_states, params.at("head.task.w")),
                       params.at("head.task.b"));
}

std::unordered_map<std::string, std::string> param_hashes(const ParamStore& params,
                                                          bool frozen_only) {
  std::unordered_map<std::string, std::string> out;
  for (const auto& e : params.entries()) {
    if (frozen_only && e.tensor.requires_grad()) continue;
    out.emplace(e.name, Sha256::hash_hex(e.tensor.values().data(),
                                         e.tensor.numel() * sizeof(double)));
  }
  return out;
}

}  // namespace cavl

#pragma once

#include <optional>
#include <span>
#include <string>
#include <unordered_map>

#include "cavl/batch.hpp"
#include "cavl/config.hpp"
#include "cavl/ops.hpp"
#include "cavl/params.hpp"
#include "cavl/rng.hpp"

namespace cavl {

/// Backbone tensors, named for the checkpoint format:
///   emb.tok [V x D], emb.seg [2 x D], emb.pos_t [N_max x D],
///   vis.proj.w [d_v x D], vis.proj.b [D], vis.pos_v [K_max x D],
///   layer.{i}.attn.{q|k|v|o}.{w|b}, layer.{i}.ffn.{1|2}.{w|b},
///   layer.{i}.ln{1|2}.{g|b}, head.{mlm|nsp|cap}.{w|b}
ParamStore init_backbone_params(const ModelConfig& cfg, Rng& rng);

Tensor normal_init(Shape shape, Rng& rng, double stddev = 0.02);

/// Registers every tensor of a store as a tape leaf and resolves names.
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(Tape& tape, ParamStore& store);
  Var at(const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  /// Replace or add a binding (gradient-check plumbing).
  void set(const std::string& name, Var v) { vars_[name] = v; }

 private:
  std::unordered_map<std::string, Var> vars_;
};

struct LinguisticVars {
  Var tokens;     // e^t
  Var segments;   // e^s
  Var positions;  // e^p
};

struct VisualVars {
  Var proj_w;     // f^i projection
  Var proj_b;
  Var segments;   // f^s, shared table with the linguistic side
  Var positions;  // f^p, indexed by ROI order
};

struct AdapterVars {
  Var down_w, down_b, up_w, up_b;
};

struct LayerVars {
  Var attn_q_w, attn_q_b, attn_k_w, attn_k_b, attn_v_w, attn_v_b, attn_o_w, attn_o_b;
  Var ffn1_w, ffn1_b, ffn2_w, ffn2_b;
  Var ln1_g, ln1_b, ln2_g, ln2_b;
  std::optional<AdapterVars> adapter_attn;
  std::optional<AdapterVars> adapter_ffn;
};

LayerVars layer_vars(const BoundParams& params, std::size_t layer, bool with_adapters);
LayerVars shortcut_layer_vars(const BoundParams& params);

/// e_n = e^t[token_n] + e^s[seg_n] + e^p[pos_n]
Var embed_linguistic(Tape& t, std::span<const Index> tokens, std::span<const Index> segments,
                     std::span<const Index> positions, const LinguisticVars& tables);

/// f_k = proj(roi_k) + f^s[seg_k] + f^p[pos_k]; K must not exceed k_max.
Var embed_visual(Tape& t, const Tensor& rois, std::span<const Index> segments,
                 std::span<const Index> positions, const VisualVars& tables,
                 std::size_t k_max);

/// Post-norm transformer layer:
///   x -> LayerNorm(x + MHA(x)) -> LayerNorm(. + FFN(.))
/// with optional bottleneck adapters added to each module output before its
/// LayerNorm. `key_bias` is [B*T] additive attention bias (0 or large negative).
Var transformer_layer_forward(Tape& t, Var x, const LayerVars& lv, const Tensor& key_bias,
                              std::size_t batch, std::size_t seq, std::size_t heads,
                              double ln_eps);

struct EncoderOutputs {
  Var embeddings;  // fused input embeddings [B*T x D]
  Var states;      // final states [B*T x D]
  Var e_prime;     // pooled, unit-norm linguistic embeddings [B x D]
  Var f_prime;     // pooled, unit-norm visual embeddings [B x D]
  Var cls_states;  // [CLS] rows [B x D]
};

struct EncodeOptions {
  bool use_adapters = false;  // apply adapter.{i}.* inserts when present
};

EncoderOutputs model_forward(Tape& t, const Batch& batch, const BoundParams& params,
                             const ModelConfig& cfg, const EncodeOptions& opt = {});

/// Additive attention bias from the batch padding plan.
Tensor attention_key_bias(const Batch& batch);

/// Row-stochastic [B x B*seq] matrix averaging the flagged positions of each
/// sample; multiplying the packed states pools them per sample.
Tensor pooling_matrix(const Batch& batch, const std::vector<std::uint8_t>& flags);

}  // namespace cavl

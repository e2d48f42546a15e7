#include "cavl/model.hpp"

#include <cmath>
#include <string>

namespace cavl {

Tensor normal_init(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

ParamStore init_backbone_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.hidden;
  ParamStore p;
  p.add("emb.tok", normal_init({cfg.vocab_size, d}, rng));
  p.add("emb.seg", normal_init({cfg.segment_count, d}, rng));
  p.add("emb.pos_t", normal_init({cfg.max_text_len, d}, rng));
  p.add("vis.proj.w", normal_init({cfg.roi_feature_dim, d}, rng));
  p.add("vis.proj.b", Tensor(Shape{d}));
  p.add("vis.pos_v", normal_init({cfg.max_rois, d}, rng));
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string base = "layer." + std::to_string(i) + ".";
    for (const char* part : {"q", "k", "v", "o"}) {
      p.add(base + "attn." + part + ".w", normal_init({d, d}, rng));
      p.add(base + "attn." + part + ".b", Tensor(Shape{d}));
    }
    p.add(base + "ffn.1.w", normal_init({d, cfg.ffn_dim}, rng));
    p.add(base + "ffn.1.b", Tensor(Shape{cfg.ffn_dim}));
    p.add(base + "ffn.2.w", normal_init({cfg.ffn_dim, d}, rng));
    p.add(base + "ffn.2.b", Tensor(Shape{d}));
    p.add(base + "ln1.g", Tensor(Shape{d}, 1.0));
    p.add(base + "ln1.b", Tensor(Shape{d}));
    p.add(base + "ln2.g", Tensor(Shape{d}, 1.0));
    p.add(base + "ln2.b", Tensor(Shape{d}));
  }
  p.add("head.mlm.w", normal_init({d, cfg.vocab_size}, rng));
  p.add("head.mlm.b", Tensor(Shape{cfg.vocab_size}));
  p.add("head.nsp.w", normal_init({d, 2}, rng));
  p.add("head.nsp.b", Tensor(Shape{2}));
  p.add("head.cap.w", normal_init({d, 2}, rng));
  p.add("head.cap.b", Tensor(Shape{2}));
  return p;
}

BoundParams::BoundParams(Tape& tape, ParamStore& store) {
  vars_.reserve(store.size());
  for (auto& e : store.entries()) vars_.emplace(e.name, tape.leaf(e.tensor));
}

Var BoundParams::at(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw UnknownParameter("no bound parameter named " + name);
  return it->second;
}

namespace {

AdapterVars adapter_vars(const BoundParams& p, const std::string& base) {
  return AdapterVars{p.at(base + "down.w"), p.at(base + "down.b"), p.at(base + "up.w"),
                     p.at(base + "up.b")};
}

LayerVars layer_vars_from(const BoundParams& p, const std::string& base) {
  LayerVars lv;
  lv.attn_q_w = p.at(base + "attn.q.w");
  lv.attn_q_b = p.at(base + "attn.q.b");
  lv.attn_k_w = p.at(base + "attn.k.w");
  lv.attn_k_b = p.at(base + "attn.k.b");
  lv.attn_v_w = p.at(base + "attn.v.w");
  lv.attn_v_b = p.at(base + "attn.v.b");
  lv.attn_o_w = p.at(base + "attn.o.w");
  lv.attn_o_b = p.at(base + "attn.o.b");
  lv.ffn1_w = p.at(base + "ffn.1.w");
  lv.ffn1_b = p.at(base + "ffn.1.b");
  lv.ffn2_w = p.at(base + "ffn.2.w");
  lv.ffn2_b = p.at(base + "ffn.2.b");
  lv.ln1_g = p.at(base + "ln1.g");
  lv.ln1_b = p.at(base + "ln1.b");
  lv.ln2_g = p.at(base + "ln2.g");
  lv.ln2_b = p.at(base + "ln2.b");
  return lv;
}

Var adapter_bottleneck(Tape& t, Var h, const AdapterVars& av) {
  Var down = add_bias_rows(t, matmul(t, h, av.down_w), av.down_b);
  return add_bias_rows(t, matmul(t, gelu(t, down), av.up_w), av.up_b);
}

}  // namespace

LayerVars layer_vars(const BoundParams& params, std::size_t layer, bool with_adapters) {
  const std::string base = "layer." + std::to_string(layer) + ".";
  LayerVars lv = layer_vars_from(params, base);
  if (with_adapters) {
    const std::string abase = "adapter." + std::to_string(layer) + ".";
    lv.adapter_attn = adapter_vars(params, abase + "attn.");
    lv.adapter_ffn = adapter_vars(params, abase + "ffn.");
  }
  return lv;
}

LayerVars shortcut_layer_vars(const BoundParams& params) {
  return layer_vars_from(params, "shortcut.");
}

Var embed_linguistic(Tape& t, std::span<const Index> tokens, std::span<const Index> segments,
                     std::span<const Index> positions, const LinguisticVars& tables) {
  if (tokens.size() != segments.size() || tokens.size() != positions.size()) {
    throw LengthMismatch("embed_linguistic: token/segment/position lengths differ");
  }
  Var e = embedding_lookup(t, tables.tokens, tokens);
  e = add(t, e, embedding_lookup(t, tables.segments, segments));
  return add(t, e, embedding_lookup(t, tables.positions, positions));
}

namespace {

Var embed_visual_rows(Tape& t, const Tensor& rois, std::span<const Index> segments,
                      std::span<const Index> positions, const VisualVars& tables) {
  if (rois.rank() != 2) throw ShapeMismatch("embed_visual: ROI features must be [K x d_v]");
  if (segments.size() != rois.extent(0) || positions.size() != rois.extent(0)) {
    throw LengthMismatch("embed_visual: segment/position lengths must match ROI count");
  }
  Var f = add_bias_rows(t, matmul(t, t.constant(rois), tables.proj_w), tables.proj_b);
  f = add(t, f, embedding_lookup(t, tables.segments, segments));
  return add(t, f, embedding_lookup(t, tables.positions, positions));
}

}  // namespace

Var embed_visual(Tape& t, const Tensor& rois, std::span<const Index> segments,
                 std::span<const Index> positions, const VisualVars& tables,
                 std::size_t k_max) {
  if (rois.rank() == 2 && rois.extent(0) > k_max) {
    throw TooManyRois("embed_visual: " + std::to_string(rois.extent(0)) +
                      " ROIs exceed the cap of " + std::to_string(k_max));
  }
  return embed_visual_rows(t, rois, segments, positions, tables);
}

Var transformer_layer_forward(Tape& t, Var x, const LayerVars& lv, const Tensor& key_bias,
                              std::size_t batch, std::size_t seq, std::size_t heads,
                              double ln_eps) {
  Var q = add_bias_rows(t, matmul(t, x, lv.attn_q_w), lv.attn_q_b);
  Var k = add_bias_rows(t, matmul(t, x, lv.attn_k_w), lv.attn_k_b);
  Var v = add_bias_rows(t, matmul(t, x, lv.attn_v_w), lv.attn_v_b);
  Var mha = attention_core(t, q, k, v, key_bias, batch, seq, heads);
  Var attn_out = add_bias_rows(t, matmul(t, mha, lv.attn_o_w), lv.attn_o_b);
  if (lv.adapter_attn) {
    attn_out = add(t, attn_out, adapter_bottleneck(t, attn_out, *lv.adapter_attn));
  }
  Var x1 = layer_norm(t, add(t, x, attn_out), lv.ln1_g, lv.ln1_b, ln_eps);

  Var hidden = gelu(t, add_bias_rows(t, matmul(t, x1, lv.ffn1_w), lv.ffn1_b));
  Var ffn_out = add_bias_rows(t, matmul(t, hidden, lv.ffn2_w), lv.ffn2_b);
  if (lv.adapter_ffn) {
    ffn_out = add(t, ffn_out, adapter_bottleneck(t, ffn_out, *lv.adapter_ffn));
  }
  return layer_norm(t, add(t, x1, ffn_out), lv.ln2_g, lv.ln2_b, ln_eps);
}

Tensor attention_key_bias(const Batch& b) {
  Tensor bias(Shape{b.size * b.seq});
  for (std::size_t i = 0; i < bias.numel(); ++i) {
    bias[i] = b.real[i] ? 0.0 : -1e9;
  }
  return bias;
}

Tensor pooling_matrix(const Batch& b, const std::vector<std::uint8_t>& flags) {
  Tensor p(Shape{b.size, b.size * b.seq});
  for (std::size_t s = 0; s < b.size; ++s) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < b.seq; ++i) count += flags[s * b.seq + i];
    if (count == 0) throw ShapeMismatch("pooling over an empty position set");
    const double w = 1.0 / static_cast<double>(count);
    for (std::size_t i = 0; i < b.seq; ++i) {
      if (flags[s * b.seq + i]) p.at(s, s * b.seq + i) = w;
    }
  }
  return p;
}

EncoderOutputs model_forward(Tape& t, const Batch& batch, const BoundParams& params,
                             const ModelConfig& cfg, const EncodeOptions& opt) {
  const std::size_t B = batch.size, tw = batch.text_width, vw = batch.vis_width;
  const std::size_t T = batch.seq;

  LinguisticVars ling{params.at("emb.tok"), params.at("emb.seg"), params.at("emb.pos_t")};
  Var txt = embed_linguistic(t, batch.token_ids, batch.token_segments,
                             batch.token_positions, ling);

  VisualVars vis{params.at("vis.proj.w"), params.at("vis.proj.b"), params.at("emb.seg"),
                 params.at("vis.pos_v")};
  Var img = embed_visual_rows(t, batch.roi_features, batch.vis_segments,
                              batch.vis_positions, vis);

  // Pack per-sample rows: text region then visual region.
  std::vector<Index> order(B * T);
  for (std::size_t s = 0; s < B; ++s) {
    for (std::size_t i = 0; i < tw; ++i) {
      order[s * T + i] = static_cast<Index>(s * tw + i);
    }
    for (std::size_t i = 0; i < vw; ++i) {
      order[s * T + tw + i] = static_cast<Index>(B * tw + s * vw + i);
    }
  }
  std::vector<Var> parts{txt, img};
  Var fused = gather_rows(t, concat_rows(t, parts), order);

  const Tensor key_bias = attention_key_bias(batch);
  Var x = fused;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    x = transformer_layer_forward(t, x, layer_vars(params, l, opt.use_adapters), key_bias,
                                  B, T, cfg.heads, cfg.layer_norm_eps);
  }

  // Pooled embeddings are squashed into the positive orthant before the
  // final normalization. Every pairwise dot product of E'/F' rows is then
  // strictly positive, so the contrastive ratio's sums cannot change sign
  // under batch noise; the similarity range matches the anisotropy real
  // encoder stacks exhibit.
  const double gain = std::sqrt(static_cast<double>(cfg.hidden));
  auto pool = [&](const std::vector<std::uint8_t>& flags) {
    Var mean = matmul(t, t.constant(pooling_matrix(batch, flags)), x);
    Var spread = scale(t, l2_normalize_rows(t, mean), gain);
    return l2_normalize_rows(t, softplus(t, spread));
  };
  Var e_prime = pool(batch.text_content);
  Var f_prime = pool(batch.vis_content);

  std::vector<Index> cls_rows(B);
  for (std::size_t s = 0; s < B; ++s) cls_rows[s] = static_cast<Index>(s * T);
  Var cls = gather_rows(t, x, cls_rows);

  return EncoderOutputs{fused, x, e_prime, f_prime, cls};
}

}  // namespace cavl

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cavl/data.hpp"
#include "cavl/model.hpp"
#include "cavl/objectives.hpp"

using namespace cavl;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.vocab_size = 64;
  m.hidden = 16;
  m.layers = 2;
  m.heads = 2;
  m.ffn_dim = 32;
  m.max_text_len = 16;
  m.max_rois = 4;
  m.roi_feature_dim = 8;
  return m;
}

GeneratorConfig tiny_gen() {
  GeneratorConfig g;
  g.classes = 2;
  g.attributes = 2;
  g.buckets = 2;
  g.tokens_per_half = 4;
  g.rois_per_sample = 2;
  return g;
}

Batch eval_batch(const Corpus& corpus, std::vector<std::size_t> idx) {
  Rng rng(0);
  BatchOptions opt;
  opt.kind = BatchKind::Eval;
  return make_batch(corpus, idx, rng, opt);
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Re-assembles a batch with extra text and visual padding slots appended to
// each region, leaving the real content untouched.
Batch widen_batch(const Batch& b, std::size_t extra_text, std::size_t extra_vis) {
  Batch out;
  out.size = b.size;
  out.text_width = b.text_width + extra_text;
  out.vis_width = b.vis_width + extra_vis;
  out.seq = out.text_width + out.vis_width;
  const std::size_t d_v = b.roi_features.extent(1);
  out.token_ids.assign(out.size * out.text_width, Vocabulary::kPad);
  out.token_segments.assign(out.size * out.text_width, 0);
  out.token_positions.assign(out.size * out.text_width, 0);
  out.roi_features = Tensor(Shape{out.size * out.vis_width, d_v});
  out.vis_segments.assign(out.size * out.vis_width, 1);
  out.vis_positions.assign(out.size * out.vis_width, 0);
  out.real.assign(out.size * out.seq, 0);
  out.text_content.assign(out.size * out.seq, 0);
  out.vis_content.assign(out.size * out.seq, 0);
  for (std::size_t s = 0; s < b.size; ++s) {
    for (std::size_t i = 0; i < b.text_width; ++i) {
      out.token_ids[s * out.text_width + i] = b.token_ids[s * b.text_width + i];
      out.token_segments[s * out.text_width + i] = b.token_segments[s * b.text_width + i];
      out.token_positions[s * out.text_width + i] = b.token_positions[s * b.text_width + i];
    }
    for (std::size_t i = 0; i < b.vis_width; ++i) {
      for (std::size_t c = 0; c < d_v; ++c) {
        out.roi_features.at(s * out.vis_width + i, c) =
            b.roi_features.at(s * b.vis_width + i, c);
      }
      out.vis_segments[s * out.vis_width + i] = b.vis_segments[s * b.vis_width + i];
      out.vis_positions[s * out.vis_width + i] = b.vis_positions[s * b.vis_width + i];
    }
    for (std::size_t i = 0; i < b.seq; ++i) {
      const bool text_region = i < b.text_width;
      const std::size_t to = s * out.seq + (text_region ? i : out.text_width + (i - b.text_width));
      out.real[to] = b.real[s * b.seq + i];
      out.text_content[to] = b.text_content[s * b.seq + i];
      out.vis_content[to] = b.vis_content[s * b.seq + i];
    }
  }
  out.nsp_labels = b.nsp_labels;
  out.match_labels = b.match_labels;
  out.text_source = b.text_source;
  out.image_source = b.image_source;
  out.image_class = b.image_class;
  return out;
}

}  // namespace

TEST_CASE("embed_linguistic follows the additive definition") {
  Tape t;
  const std::size_t d = 4;
  Var zt = t.constant(Tensor(Shape{5, d}));
  Var zs = t.constant(Tensor(Shape{2, d}));
  Var zp = t.constant(Tensor(Shape{6, d}));
  std::vector<Index> tok{1, 2}, seg{0, 0}, pos{0, 1};

  SUBCASE("zero tables give zero output") {
    const Tensor& e = t.value(embed_linguistic(t, tok, seg, pos, {zt, zs, zp}));
    for (std::size_t i = 0; i < e.numel(); ++i) CHECK(e[i] == 0.0);
  }

  SUBCASE("output row is the sum of the three table rows") {
    Rng rng(4);
    Tensor tt = normal_init({5, d}, rng, 1.0);
    Tensor ts = normal_init({2, d}, rng, 1.0);
    Tensor tp = normal_init({6, d}, rng, 1.0);
    Var vt = t.constant(tt), vs = t.constant(ts), vp = t.constant(tp);
    std::vector<Index> one_tok{3}, one_seg{1}, one_pos{5};
    const Tensor& e = t.value(embed_linguistic(t, one_tok, one_seg, one_pos, {vt, vs, vp}));
    for (std::size_t c = 0; c < d; ++c) {
      CHECK(e[c] == doctest::Approx(tt.at(3, c) + ts.at(1, c) + tp.at(5, c)).epsilon(1e-12));
    }
  }

  SUBCASE("permuting positions permutes the position contribution") {
    Rng rng(5);
    Tensor tp = normal_init({6, d}, rng, 1.0);
    Var vp = t.constant(tp);
    std::vector<Index> pos_a{0, 1}, pos_b{1, 0};
    const Tensor& ea = t.value(embed_linguistic(t, tok, seg, pos_a, {zt, zs, vp}));
    const Tensor& eb = t.value(embed_linguistic(t, tok, seg, pos_b, {zt, zs, vp}));
    for (std::size_t c = 0; c < d; ++c) {
      CHECK(ea.at(0, c) == doctest::Approx(eb.at(1, c)).epsilon(1e-12));
      CHECK(ea.at(1, c) == doctest::Approx(eb.at(0, c)).epsilon(1e-12));
    }
  }

  SUBCASE("length mismatch is rejected") {
    std::vector<Index> short_seg{0};
    CHECK_THROWS_AS(embed_linguistic(t, tok, short_seg, pos, {zt, zs, zp}),
                    LengthMismatch);
  }

  SUBCASE("out-of-range id is rejected") {
    std::vector<Index> bad_tok{5, 0};
    CHECK_THROWS_AS(embed_linguistic(t, bad_tok, seg, pos, {zt, zs, zp}),
                    IndexOutOfRange);
  }
}

TEST_CASE("embed_visual projects and caps ROI count") {
  Tape t;
  const std::size_t d = 3;

  SUBCASE("zero features and tables give zero output") {
    Var w = t.constant(Tensor(Shape{d, d}));
    Var b = t.constant(Tensor(Shape{d}));
    Var s = t.constant(Tensor(Shape{2, d}));
    Var p = t.constant(Tensor(Shape{4, d}));
    Tensor rois(Shape{2, d});
    std::vector<Index> seg{1, 1}, pos{0, 1};
    const Tensor& f = t.value(embed_visual(t, rois, seg, pos, {w, b, s, p}, 4));
    for (std::size_t i = 0; i < f.numel(); ++i) CHECK(f[i] == 0.0);
  }

  SUBCASE("identity projection with zero tables reproduces the features") {
    Tensor eye(Shape{d, d});
    for (std::size_t i = 0; i < d; ++i) eye.at(i, i) = 1.0;
    Var w = t.constant(eye);
    Var b = t.constant(Tensor(Shape{d}));
    Var s = t.constant(Tensor(Shape{2, d}));
    Var p = t.constant(Tensor(Shape{4, d}));
    Rng rng(6);
    Tensor rois = normal_init({2, d}, rng, 1.0);
    std::vector<Index> seg{1, 1}, pos{0, 1};
    const Tensor& f = t.value(embed_visual(t, rois, seg, pos, {w, b, s, p}, 4));
    for (std::size_t i = 0; i < f.numel(); ++i) {
      CHECK(f[i] == doctest::Approx(rois[i]).epsilon(1e-12));
    }
  }

  SUBCASE("ROI cap enforced") {
    Var w = t.constant(Tensor(Shape{d, d}));
    Var b = t.constant(Tensor(Shape{d}));
    Var s = t.constant(Tensor(Shape{2, d}));
    Var p = t.constant(Tensor(Shape{8, d}));
    Tensor rois(Shape{5, d});
    std::vector<Index> seg(5, 1), pos{0, 1, 2, 3, 4};
    CHECK_THROWS_AS(embed_visual(t, rois, seg, pos, {w, b, s, p}, 4), TooManyRois);
  }
}

TEST_CASE("transformer layer with zero weights is a double layer norm") {
  const std::size_t T = 3, D = 8, H = 2;
  Rng rng(7);
  Tensor x0 = normal_init({T, D}, rng, 1.0);
  Tensor bias(Shape{T}, 0.0);

  Tape t;
  Var x = t.constant(x0);
  auto zero_mat = [&] { return t.constant(Tensor(Shape{D, D})); };
  auto zero_vec = [&] { return t.constant(Tensor(Shape{D})); };
  LayerVars lv;
  lv.attn_q_w = zero_mat();
  lv.attn_q_b = zero_vec();
  lv.attn_k_w = zero_mat();
  lv.attn_k_b = zero_vec();
  lv.attn_v_w = zero_mat();
  lv.attn_v_b = zero_vec();
  lv.attn_o_w = zero_mat();
  lv.attn_o_b = zero_vec();
  lv.ffn1_w = t.constant(Tensor(Shape{D, 2 * D}));
  lv.ffn1_b = t.constant(Tensor(Shape{2 * D}));
  lv.ffn2_w = t.constant(Tensor(Shape{2 * D, D}));
  lv.ffn2_b = zero_vec();
  Var ones = t.constant(Tensor(Shape{D}, 1.0));
  Var zeros = zero_vec();
  lv.ln1_g = ones;
  lv.ln1_b = zeros;
  lv.ln2_g = ones;
  lv.ln2_b = zeros;

  Var out = transformer_layer_forward(t, x, lv, bias, 1, T, H, 1e-5);
  Var expect = layer_norm(t, layer_norm(t, x, ones, zeros, 1e-5), ones, zeros, 1e-5);
  CHECK(max_abs_diff(t.value(out).values(), t.value(expect).values()) < 1e-12);
}

TEST_CASE("transformer layer keeps shape for random parameters") {
  const std::size_t B = 2, T = 4, D = 8, H = 4;
  Rng rng(8);
  Tape t;
  Var x = t.constant(normal_init({B * T, D}, rng, 1.0));
  Tensor bias(Shape{B * T}, 0.0);
  auto mat = [&](std::size_t r, std::size_t c) { return t.constant(normal_init({r, c}, rng, 0.2)); };
  auto vec = [&] { return t.constant(normal_init({D}, rng, 0.2)); };
  LayerVars lv;
  lv.attn_q_w = mat(D, D);
  lv.attn_q_b = vec();
  lv.attn_k_w = mat(D, D);
  lv.attn_k_b = vec();
  lv.attn_v_w = mat(D, D);
  lv.attn_v_b = vec();
  lv.attn_o_w = mat(D, D);
  lv.attn_o_b = vec();
  lv.ffn1_w = mat(D, 16);
  lv.ffn1_b = t.constant(normal_init({16}, rng, 0.2));
  lv.ffn2_w = mat(16, D);
  lv.ffn2_b = vec();
  lv.ln1_g = t.constant(Tensor(Shape{D}, 1.0));
  lv.ln1_b = t.constant(Tensor(Shape{D}));
  lv.ln2_g = t.constant(Tensor(Shape{D}, 1.0));
  lv.ln2_b = t.constant(Tensor(Shape{D}));
  Var out = transformer_layer_forward(t, x, lv, bias, B, T, H, 1e-5);
  CHECK(t.value(out).shape() == Shape{B * T, D});
}

TEST_CASE("model forward invariants") {
  const ModelConfig cfg = tiny_model();
  const GeneratorConfig gen = tiny_gen();
  const Corpus corpus = generate_synthetic_corpus(21, Split::Train, 8, gen, cfg);
  Rng init(22);
  ParamStore params = init_backbone_params(cfg, init);

  SUBCASE("pooled embeddings have unit norm") {
    Batch b = eval_batch(corpus, {0, 1, 2});
    Tape t;
    BoundParams bound(t, params);
    EncoderOutputs enc = model_forward(t, b, bound, cfg);
    const Tensor& e = t.value(enc.e_prime);
    const Tensor& f = t.value(enc.f_prime);
    for (std::size_t r = 0; r < 3; ++r) {
      double ne = 0.0, nf = 0.0;
      for (std::size_t c = 0; c < cfg.hidden; ++c) {
        ne += e.at(r, c) * e.at(r, c);
        nf += f.at(r, c) * f.at(r, c);
      }
      CHECK(std::abs(std::sqrt(ne) - 1.0) < 1e-9);
      CHECK(std::abs(std::sqrt(nf) - 1.0) < 1e-9);
    }
  }

  SUBCASE("identical samples produce identical rows") {
    Batch b = eval_batch(corpus, {0, 0, 1});
    Tape t;
    BoundParams bound(t, params);
    EncoderOutputs enc = model_forward(t, b, bound, cfg);
    const Tensor& e = t.value(enc.e_prime);
    const Tensor& f = t.value(enc.f_prime);
    for (std::size_t c = 0; c < cfg.hidden; ++c) {
      CHECK(e.at(0, c) == e.at(1, c));
      CHECK(f.at(0, c) == f.at(1, c));
    }
  }

  SUBCASE("batch independence: outputs ignore the other samples") {
    Batch b1 = eval_batch(corpus, {0, 1});
    Batch b2 = eval_batch(corpus, {0, 2});
    Tape t1, t2;
    BoundParams p1(t1, params), p2(t2, params);
    EncoderOutputs e1 = model_forward(t1, b1, p1, cfg);
    EncoderOutputs e2 = model_forward(t2, b2, p2, cfg);
    const Tensor& a = t1.value(e1.e_prime);
    const Tensor& b = t2.value(e2.e_prime);
    for (std::size_t c = 0; c < cfg.hidden; ++c) {
      CHECK(a.at(0, c) == doctest::Approx(b.at(0, c)).epsilon(1e-12));
    }
  }

  SUBCASE("reordering the batch permutes rows identically") {
    Batch b1 = eval_batch(corpus, {0, 1, 2});
    Batch b2 = eval_batch(corpus, {2, 0, 1});
    Tape t1, t2;
    BoundParams p1(t1, params), p2(t2, params);
    const Tensor& a = t1.value(model_forward(t1, b1, p1, cfg).f_prime);
    const Tensor& b = t2.value(model_forward(t2, b2, p2, cfg).f_prime);
    for (std::size_t c = 0; c < cfg.hidden; ++c) {
      CHECK(a.at(0, c) == doctest::Approx(b.at(1, c)).epsilon(1e-12));
      CHECK(a.at(1, c) == doctest::Approx(b.at(2, c)).epsilon(1e-12));
      CHECK(a.at(2, c) == doctest::Approx(b.at(0, c)).epsilon(1e-12));
    }
  }

  SUBCASE("padding invariance") {
    Batch b = eval_batch(corpus, {0, 1});
    Batch wide = widen_batch(b, 3, 2);
    Tape t1, t2;
    BoundParams p1(t1, params), p2(t2, params);
    EncoderOutputs e1 = model_forward(t1, b, p1, cfg);
    EncoderOutputs e2 = model_forward(t2, wide, p2, cfg);
    CHECK(max_abs_diff(t1.value(e1.e_prime).values(), t2.value(e2.e_prime).values()) <
          1e-9);
    CHECK(max_abs_diff(t1.value(e1.f_prime).values(), t2.value(e2.f_prime).values()) <
          1e-9);
  }

  SUBCASE("gradient reaches every trainable tensor") {
    Rng rng(23);
    std::vector<std::size_t> idx{0, 1, 2, 3};
    BatchOptions opt;
    Batch b = make_batch(corpus, idx, rng, opt);
    Tape t;
    BoundParams bound(t, params);
    EncoderOutputs enc = model_forward(t, b, bound, cfg);
    PretrainParts parts;
    parts.mlm = mlm_loss(t, enc.states, {bound.at("head.mlm.w"), bound.at("head.mlm.b")},
                         b.masked_rows, b.mlm_targets);
    parts.nsp = nsp_loss(t, enc.cls_states, {bound.at("head.nsp.w"), bound.at("head.nsp.b")},
                         b.nsp_labels);
    parts.caption = caption_match_loss(
        t, enc.cls_states, {bound.at("head.cap.w"), bound.at("head.cap.b")},
        b.match_labels);
    parts.pwcl = pwcl_loss(t, enc.e_prime, enc.f_prime);
    parts.aps = aps(t.value(enc.e_prime), t.value(enc.f_prime));
    CombinedLoss combined = pretrain_loss(t, parts, LossWeights{});
    t.backward(combined.total);
    for (auto& e : params.entries()) {
      REQUIRE(e.tensor.has_grad());
      bool nonzero = false;
      for (double g : e.tensor.grad()) {
        if (g != 0.0) {
          nonzero = true;
          break;
        }
      }
      CHECK_MESSAGE(nonzero, e.name);
    }
    params.clear_grads();
  }
}

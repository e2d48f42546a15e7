#include "cavl/opcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cavl/data.hpp"
#include "cavl/gradcheck.hpp"
#include "cavl/model.hpp"
#include "cavl/objectives.hpp"

namespace cavl {

namespace {

constexpr double kOpStep = 1e-5;
constexpr double kOpTol = 1e-4;
constexpr double kLossStep = 1e-4;
constexpr double kLossTol = 1e-3;

Tensor uniform_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

// Scalarize with fixed random weights so every output coordinate matters.
Var weigh(Tape& t, Var y, const Tensor& w) {
  return sum_all(t, mul(t, y, t.constant(w)));
}

double check_elementwise(const char* which) {
  Rng rng(0x3110);
  Tensor a0 = uniform_tensor({3, 4}, rng);
  Tensor b0 = uniform_tensor({3, 4}, rng);
  Tensor w = uniform_tensor({3, 4}, rng);
  const std::string op(which);
  auto apply = [op](Tape& t, Var a, Var b) {
    if (op == "add") return add(t, a, b);
    if (op == "sub") return sub(t, a, b);
    return mul(t, a, b);
  };
  auto fa = [&](Tape& t, Var v) { return weigh(t, apply(t, v, t.constant(b0)), w); };
  auto fb = [&](Tape& t, Var v) { return weigh(t, apply(t, t.constant(a0), v), w); };
  return std::max(grad_check(fa, a0, kOpStep), grad_check(fb, b0, kOpStep));
}

double check_scale() {
  Rng rng(0x5ca1e);
  Tensor x0 = uniform_tensor({2, 5}, rng);
  Tensor w = uniform_tensor({2, 5}, rng);
  auto f = [&](Tape& t, Var v) { return weigh(t, scale(t, v, -1.7), w); };
  return grad_check(f, x0, kOpStep);
}

double check_add_bias() {
  Rng rng(0xb1a5);
  Tensor x0 = uniform_tensor({3, 4}, rng);
  Tensor b0 = uniform_tensor({4}, rng);
  Tensor w = uniform_tensor({3, 4}, rng);
  auto fx = [&](Tape& t, Var v) { return weigh(t, add_bias_rows(t, v, t.constant(b0)), w); };
  auto fb = [&](Tape& t, Var v) { return weigh(t, add_bias_rows(t, t.constant(x0), v), w); };
  return std::max(grad_check(fx, x0, kOpStep), grad_check(fb, b0, kOpStep));
}

double check_log() {
  Rng rng(0x106);
  Tensor x0 = uniform_tensor({6}, rng, 0.3, 3.0);
  auto f = [&](Tape& t, Var v) { return sum_all(t, log_elem(t, v)); };
  return grad_check(f, x0, kOpStep);
}

double check_gelu() {
  Rng rng(0x6e1);
  Tensor x0 = uniform_tensor({3, 5}, rng);
  Tensor w = uniform_tensor({3, 5}, rng);
  auto f = [&](Tape& t, Var v) { return weigh(t, gelu(t, v), w); };
  return grad_check(f, x0, kOpStep);
}

double check_softplus() {
  Rng rng(0x50f5);
  Tensor x0 = uniform_tensor({3, 5}, rng, -6.0, 6.0);
  Tensor w = uniform_tensor({3, 5}, rng);
  auto f = [&](Tape& t, Var v) { return weigh(t, softplus(t, v), w); };
  return grad_check(f, x0, kOpStep);
}

double check_matmul() {
  Rng rng(0x3a73);
  Tensor a0 = uniform_tensor({3, 4}, rng);
  Tensor b0 = uniform_tensor({4, 5}, rng);
  Tensor w = uniform_tensor({3, 5}, rng);
  auto fa = [&](Tape& t, Var v) { return weigh(t, matmul(t, v, t.constant(b0)), w); };
  auto fb = [&](Tape& t, Var v) { return weigh(t, matmul(t, t.constant(a0), v), w); };
  return std::max(grad_check(fa, a0, kOpStep), grad_check(fb, b0, kOpStep));
}

double check_transpose() {
  Rng rng(0x7a05);
  Tensor x0 = uniform_tensor({3, 4}, rng);
  Tensor w = uniform_tensor({4, 3}, rng);
  auto f = [&](Tape& t, Var v) { return weigh(t, transpose(t, v), w); };
  return grad_check(f, x0, kOpStep);
}

double check_softmax() {
  Rng rng(0x50f7);
  Tensor x0 = uniform_tensor({3, 6}, rng);
  Tensor w = uniform_tensor({3, 6}, rng);
  auto f = [&](Tape& t, Var v) { return weigh(t, softmax(t, v), w); };
  return grad_check(f, x0, kOpStep);
}

double check_layer_norm() {
  Rng rng(0x1a6e);
  Tensor x0 = uniform_tensor({4, 6}, rng);
  Tensor g0 = uniform_tensor({6}, rng, 0.5, 1.5);
  Tensor b0 = uniform_tensor({6}, rng);
  Tensor w = uniform_tensor({4, 6}, rng);
  auto fx = [&](Tape& t, Var v) {
    return weigh(t, layer_norm(t, v, t.constant(g0), t.constant(b0), 1e-5), w);
  };
  auto fg = [&](Tape& t, Var v) {
    return weigh(t, layer_norm(t, t.constant(x0), v, t.constant(b0), 1e-5), w);
  };
  auto fb = [&](Tape& t, Var v) {
    return weigh(t, layer_norm(t, t.constant(x0), t.constant(g0), v, 1e-5), w);
  };
  return std::max({grad_check(fx, x0, kOpStep), grad_check(fg, g0, kOpStep),
                   grad_check(fb, b0, kOpStep)});
}

double check_l2_normalize() {
  Rng rng(0x12e0);
  Tensor x0 = uniform_tensor({3, 5}, rng, 0.4, 2.0);
  Tensor w = uniform_tensor({3, 5}, rng);
  auto f = [&](Tape& t, Var v) { return weigh(t, l2_normalize_rows(t, v), w); };
  return grad_check(f, x0, kOpStep);
}

double check_embedding() {
  Rng rng(0xe4b);
  std::vector<Index> ids{0, 3, 3, 1, 2};
  Tensor table0 = uniform_tensor({4, 3}, rng);
  Tensor w = uniform_tensor({5, 3}, rng);
  auto f = [&](Tape& t, Var v) { return weigh(t, embedding_lookup(t, v, ids), w); };
  return grad_check(f, table0, kOpStep);
}

double check_gather_rows() {
  Rng rng(0x6a7);
  std::vector<Index> rows{2, 0, 2};
  Tensor x0 = uniform_tensor({3, 4}, rng);
  Tensor w = uniform_tensor({3, 4}, rng);
  auto f = [&](Tape& t, Var v) { return weigh(t, gather_rows(t, v, rows), w); };
  return grad_check(f, x0, kOpStep);
}

double check_concat_rows() {
  Rng rng(0xcca7);
  Tensor a0 = uniform_tensor({2, 4}, rng);
  Tensor b0 = uniform_tensor({3, 4}, rng);
  Tensor w = uniform_tensor({5, 4}, rng);
  auto fa = [&](Tape& t, Var v) {
    std::vector<Var> parts{v, t.constant(b0)};
    return weigh(t, concat_rows(t, parts), w);
  };
  auto fb = [&](Tape& t, Var v) {
    std::vector<Var> parts{t.constant(a0), v};
    return weigh(t, concat_rows(t, parts), w);
  };
  return std::max(grad_check(fa, a0, kOpStep), grad_check(fb, b0, kOpStep));
}

double check_concat_cols() {
  Rng rng(0xccc0);
  Tensor a0 = uniform_tensor({3, 2}, rng);
  Tensor b0 = uniform_tensor({3, 4}, rng);
  Tensor w = uniform_tensor({3, 6}, rng);
  auto fa = [&](Tape& t, Var v) { return weigh(t, concat_cols(t, v, t.constant(b0)), w); };
  auto fb = [&](Tape& t, Var v) { return weigh(t, concat_cols(t, t.constant(a0), v), w); };
  return std::max(grad_check(fa, a0, kOpStep), grad_check(fb, b0, kOpStep));
}

double check_slice_rows() {
  Rng rng(0x51ce);
  Tensor x0 = uniform_tensor({5, 3}, rng);
  Tensor w = uniform_tensor({2, 3}, rng);
  auto f = [&](Tape& t, Var v) { return weigh(t, slice_rows(t, v, 1, 2), w); };
  return grad_check(f, x0, kOpStep);
}

double check_sum_all() {
  Rng rng(0x5a11);
  Tensor x0 = uniform_tensor({4, 3}, rng);
  auto f = [&](Tape& t, Var v) { return scale(t, sum_all(t, v), 1.3); };
  return grad_check(f, x0, kOpStep);
}

double check_diag_sum() {
  Rng rng(0xd1a6);
  Tensor x0 = uniform_tensor({4, 4}, rng);
  auto f = [&](Tape& t, Var v) { return diag_sum(t, v); };
  return grad_check(f, x0, kOpStep);
}

double check_attention() {
  Rng rng(0xa77e);
  const std::size_t B = 2, T = 3, H = 2, D = 4;
  Tensor bias(Shape{B * T}, 0.0);
  bias[5] = -1e9;  // padded key in the second sample
  Tensor q0 = uniform_tensor({B * T, D}, rng);
  Tensor k0 = uniform_tensor({B * T, D}, rng);
  Tensor v0 = uniform_tensor({B * T, D}, rng);
  Tensor w = uniform_tensor({B * T, D}, rng);
  auto fq = [&](Tape& t, Var v) {
    return weigh(t, attention_core(t, v, t.constant(k0), t.constant(v0), bias, B, T, H), w);
  };
  auto fk = [&](Tape& t, Var v) {
    return weigh(t, attention_core(t, t.constant(q0), v, t.constant(v0), bias, B, T, H), w);
  };
  auto fv = [&](Tape& t, Var v) {
    return weigh(t, attention_core(t, t.constant(q0), t.constant(k0), v, bias, B, T, H), w);
  };
  return std::max({grad_check(fq, q0, kOpStep), grad_check(fk, k0, kOpStep),
                   grad_check(fv, v0, kOpStep)});
}

double check_cross_entropy() {
  Rng rng(0xce);
  std::vector<Index> targets{2, 0, 1, 3};
  Tensor z0 = uniform_tensor({4, 5}, rng);
  auto f = [&](Tape& t, Var v) { return cross_entropy_mean(t, v, targets); };
  return grad_check(f, z0, kOpStep);
}

double check_pwcl() {
  // embeddings with a shared bias direction keep both similarity sums
  // positive under the finite-difference perturbation
  Rng rng(0x9c1);
  const std::size_t B = 4, D = 6;
  auto biased = [&] {
    Tensor m(Shape{B, D});
    for (std::size_t r = 0; r < B; ++r) {
      double norm = 0.0;
      std::vector<double> row(D);
      for (std::size_t c = 0; c < D; ++c) {
        row[c] = (c == 0 ? 2.0 : 0.0) + 0.5 * rng.normal();
        norm += row[c] * row[c];
      }
      norm = std::sqrt(norm);
      for (std::size_t c = 0; c < D; ++c) m.at(r, c) = row[c] / norm;
    }
    return m;
  };
  Tensor e0 = biased();
  Tensor f0 = biased();
  auto fe = [&](Tape& t, Var v) { return pwcl_loss(t, v, t.constant(f0)); };
  auto ff = [&](Tape& t, Var v) { return pwcl_loss(t, t.constant(e0), v); };
  return std::max(grad_check(fe, e0, kOpStep), grad_check(ff, f0, kOpStep));
}

// Combined pre-training loss of a fixed 2-sample batch, differentiated with
// respect to every parameter tensor.
double check_full_loss() {
  ModelConfig model;
  model.vocab_size = 40;
  model.hidden = 8;
  model.layers = 2;
  model.heads = 2;
  model.ffn_dim = 16;
  model.max_text_len = 12;
  model.max_rois = 4;
  model.roi_feature_dim = 4;

  GeneratorConfig gen;
  gen.classes = 2;
  gen.attributes = 2;
  gen.buckets = 2;
  gen.tokens_per_half = 4;
  gen.rois_per_sample = 2;

  const Corpus corpus = generate_synthetic_corpus(0xC4EC, Split::Train, 6, gen, model);
  Rng init(0xC4ED);
  ParamStore params = init_backbone_params(model, init);
  for (auto& e : params.entries()) e.tensor.set_requires_grad(false);

  Rng batch_rng(0xC4EE);
  std::vector<std::size_t> idx{0, 3};
  BatchOptions opt;
  const Batch batch = make_batch(corpus, idx, batch_rng, opt);
  const LossWeights weights;

  auto loss_with = [&](Tape& t, const std::string& name, Var substitute) {
    BoundParams bound(t, params);
    bound.set(name, substitute);
    EncoderOutputs enc = model_forward(t, batch, bound, model);
    PretrainParts parts;
    parts.mlm = mlm_loss(t, enc.states,
                         HeadVars{bound.at("head.mlm.w"), bound.at("head.mlm.b")},
                         batch.masked_rows, batch.mlm_targets);
    parts.nsp = nsp_loss(t, enc.cls_states,
                         HeadVars{bound.at("head.nsp.w"), bound.at("head.nsp.b")},
                         batch.nsp_labels);
    parts.caption = caption_match_loss(
        t, enc.cls_states, HeadVars{bound.at("head.cap.w"), bound.at("head.cap.b")},
        batch.match_labels);
    parts.pwcl = pwcl_loss(t, enc.e_prime, enc.f_prime);
    return pretrain_loss(t, parts, weights).total;
  };

  double worst = 0.0;
  for (const auto& e : params.entries()) {
    auto f = [&](Tape& t, Var v) { return loss_with(t, e.name, v); };
    worst = std::max(worst, grad_check(f, e.tensor, kLossStep));
  }
  return worst;
}

struct Registered {
  const char* name;
  double (*fn)();
  double tolerance;
};

const Registered kRegistry[] = {
    {"add", [] { return check_elementwise("add"); }, kOpTol},
    {"sub", [] { return check_elementwise("sub"); }, kOpTol},
    {"mul", [] { return check_elementwise("mul"); }, kOpTol},
    {"scale", check_scale, kOpTol},
    {"add_bias_rows", check_add_bias, kOpTol},
    {"log", check_log, kOpTol},
    {"gelu", check_gelu, kOpTol},
    {"softplus", check_softplus, kOpTol},
    {"matmul", check_matmul, kOpTol},
    {"transpose", check_transpose, kOpTol},
    {"softmax", check_softmax, kOpTol},
    {"layer_norm", check_layer_norm, kOpTol},
    {"l2_normalize_rows", check_l2_normalize, kOpTol},
    {"embedding_lookup", check_embedding, kOpTol},
    {"gather_rows", check_gather_rows, kOpTol},
    {"concat_rows", check_concat_rows, kOpTol},
    {"concat_cols", check_concat_cols, kOpTol},
    {"slice_rows", check_slice_rows, kOpTol},
    {"sum_all", check_sum_all, kOpTol},
    {"diag_sum", check_diag_sum, kOpTol},
    {"attention_core", check_attention, kOpTol},
    {"cross_entropy", check_cross_entropy, kOpTol},
    {"pwcl", check_pwcl, kOpTol},
    {"full_loss", check_full_loss, kLossTol},
};

}  // namespace

std::vector<std::string> op_check_names() {
  std::vector<std::string> names;
  for (const auto& r : kRegistry) names.push_back(r.name);
  return names;
}

std::vector<OpCheckResult> run_op_checks(const std::vector<std::string>& which) {
  const bool all = which.empty() ||
                   (which.size() == 1 && which[0] == "all");
  std::vector<OpCheckResult> out;
  for (const auto& r : kRegistry) {
    if (!all && std::find(which.begin(), which.end(), r.name) == which.end()) continue;
    OpCheckResult res;
    res.name = r.name;
    res.tolerance = r.tolerance;
    res.max_rel_error = r.fn();
    res.pass = res.max_rel_error < r.tolerance;
    out.push_back(std::move(res));
  }
  if (!all) {
    for (const auto& name : which) {
      const bool known = std::any_of(out.begin(), out.end(), [&](const OpCheckResult& r) {
        return r.name == name;
      });
      if (!known) throw UsageError("unknown op \"" + name + "\" for gradcheck");
    }
  }
  return out;
}

}  // namespace cavl

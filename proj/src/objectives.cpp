#include "cavl/objectives.hpp"

#include <string>

namespace cavl {

namespace {

double argmax_accuracy(const Tensor& logits, std::span<const Index> targets) {
  const std::size_t n = logits.extent(0), c = logits.extent(1);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < c; ++i) {
      if (logits[r * c + i] > logits[r * c + best]) best = i;
    }
    if (static_cast<Index>(best) == targets[r]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

ScalarLoss head_cross_entropy(Tape& t, Var inputs, const HeadVars& head,
                              std::span<const Index> targets) {
  Var logits = add_bias_rows(t, matmul(t, inputs, head.w), head.b);
  ScalarLoss out;
  out.value = cross_entropy_mean(t, logits, targets);
  out.accuracy = argmax_accuracy(t.value(logits), targets);
  return out;
}

}  // namespace

ScalarLoss mlm_loss(Tape& t, Var states, const HeadVars& head,
                    std::span<const std::size_t> masked_rows,
                    std::span<const Index> targets) {
  if (masked_rows.empty()) {
    throw NoMaskedPositions("mlm_loss: batch carries no masked positions");
  }
  if (masked_rows.size() != targets.size()) {
    throw LengthMismatch("mlm_loss: one target per masked position required");
  }
  std::vector<Index> rows(masked_rows.begin(), masked_rows.end());
  Var gathered = gather_rows(t, states, rows);
  return head_cross_entropy(t, gathered, head, targets);
}

ScalarLoss nsp_loss(Tape& t, Var cls_states, const HeadVars& head,
                    std::span<const Index> labels) {
  return head_cross_entropy(t, cls_states, head, labels);
}

ScalarLoss caption_match_loss(Tape& t, Var cls_states, const HeadVars& head,
                              std::span<const Index> labels) {
  return head_cross_entropy(t, cls_states, head, labels);
}

Var pwcl_loss(Tape& t, Var e_prime, Var f_prime) {
  const Tensor& E = t.value(e_prime);
  const Tensor& F = t.value(f_prime);
  if (E.rank() != 2 || !E.same_shape(F)) {
    throw ShapeMismatch("pwcl_loss: embeddings must share a [B x D] shape");
  }
  const std::size_t b = E.extent(0);
  if (b < 2) {
    throw BatchTooSmall("pwcl_loss: needs at least 2 pairs, got " + std::to_string(b));
  }
  Var sims = matmul(t, e_prime, transpose(t, f_prime));
  Var num = diag_sum(t, sims);
  Var den = sub(t, sum_all(t, sims), num);
  const double num_v = t.value(num)[0];
  const double den_v = t.value(den)[0];
  if (!(num_v > 0.0) || !(den_v > 0.0)) {
    throw NonPositiveRatio("pwcl_loss: similarity sums must be positive, got numerator " +
                           std::to_string(num_v) + ", denominator " + std::to_string(den_v));
  }
  // -log(num/den) == log(den) - log(num)
  return sub(t, log_elem(t, den), log_elem(t, num));
}

double aps(const Tensor& e_prime, const Tensor& f_prime) {
  if (e_prime.rank() != 2 || !e_prime.same_shape(f_prime)) {
    throw ShapeMismatch("aps: embeddings must share a [B x D] shape");
  }
  const std::size_t b = e_prime.extent(0), d = e_prime.extent(1);
  double total = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t c = 0; c < d; ++c) total += e_prime.at(r, c) * f_prime.at(r, c);
  }
  return total / static_cast<double>(b);
}

CombinedLoss pretrain_loss(Tape& t, const PretrainParts& parts, const LossWeights& w) {
  if (w.mlm < 0 || w.nsp < 0 || w.caption < 0 || w.pwcl < 0) {
    throw InvalidConfig("pretrain_loss: weights must be non-negative");
  }
  Var total = scale(t, parts.mlm.value, w.mlm);
  total = add(t, total, scale(t, parts.nsp.value, w.nsp));
  total = add(t, total, scale(t, parts.caption.value, w.caption));
  LossReport r;
  r.mlm = t.value(parts.mlm.value)[0];
  r.nsp = t.value(parts.nsp.value)[0];
  r.caption = t.value(parts.caption.value)[0];
  if (parts.pwcl) {
    total = add(t, total, scale(t, *parts.pwcl, w.pwcl));
    r.pwcl = t.value(*parts.pwcl)[0];
  }
  r.total = t.value(total)[0];
  r.aps = parts.aps;
  return CombinedLoss{total, r};
}

}  // namespace cavl

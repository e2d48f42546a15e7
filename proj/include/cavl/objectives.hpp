#pragma once

#include <optional>
#include <span>

#include "cavl/config.hpp"
#include "cavl/ops.hpp"

namespace cavl {

struct HeadVars {
  Var w, b;
};

struct ScalarLoss {
  Var value;
  double accuracy = 0.0;
};

/// Mean cross-entropy over masked positions only; logits are states.W + b
/// over the vocabulary. Accuracy is argmax-vs-target over the same rows.
ScalarLoss mlm_loss(Tape& t, Var states, const HeadVars& head,
                    std::span<const std::size_t> masked_rows,
                    std::span<const Index> targets);

/// Binary (2-way) cross-entropy from a linear head on the [CLS] states.
ScalarLoss nsp_loss(Tape& t, Var cls_states, const HeadVars& head,
                    std::span<const Index> labels);

/// Same shape as nsp_loss but a separate head: ground-truth caption vs
/// distractor.
ScalarLoss caption_match_loss(Tape& t, Var cls_states, const HeadVars& head,
                              std::span<const Index> labels);

/// Pair-wise contrastive loss over pooled embeddings, exactly
///   -log( sum_i E'_i.F'_i / sum_{i != j} E'_i.F'_j ).
/// Both sums must be strictly positive; raw cosines may make either
/// non-positive, which raises NonPositiveRatio. B must be >= 2.
Var pwcl_loss(Tape& t, Var e_prime, Var f_prime);

/// Averaged pair-wise similarity: (1/B) sum_i E'_i.F'_i.
double aps(const Tensor& e_prime, const Tensor& f_prime);

struct LossReport {
  double mlm = 0.0;
  double nsp = 0.0;
  double caption = 0.0;
  double pwcl = 0.0;
  double total = 0.0;
  double aps = 0.0;
};

struct PretrainParts {
  ScalarLoss mlm;
  ScalarLoss nsp;
  ScalarLoss caption;
  std::optional<Var> pwcl;  // absent when its weight is zero
  double aps = 0.0;
};

struct CombinedLoss {
  Var total;
  LossReport report;
};

/// total = w_mlm*mlm + w_nsp*nsp + w_cap*caption + w_pwcl*pwcl
CombinedLoss pretrain_loss(Tape& t, const PretrainParts& parts, const LossWeights& w);

}  // namespace cavl

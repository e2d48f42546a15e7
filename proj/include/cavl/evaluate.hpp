#pragma once

#include "cavl/adapters.hpp"
#include "cavl/data.hpp"
#include "cavl/metrics.hpp"

namespace cavl {

enum class ScoreKind {
  PooledCosine,  // cosine of pooled embeddings from per-pair forwards
  MatchHead,     // adapter1 task-head score over all text/image pairings
};

struct EvalOptions {
  ScoreKind kind = ScoreKind::PooledCosine;
  bool use_adapters = false;  // adapter2 inserts active during encoding
  std::size_t batch_size = 32;
};

/// Retrieval over the first n samples of a split: builds the n x n score
/// matrix (row = text, col = image) and ranks each row with ties broken by
/// candidate index ascending. APS and the off-diagonal mean are computed
/// from the same matrix.
RetrievalMetrics eval_retrieval(ParamStore& params, const ModelConfig& cfg,
                                const Corpus& corpus, std::size_t n,
                                const EvalOptions& opt = {});

/// Pooled embeddings of the first n samples under pristine pairing.
struct PooledEmbeddings {
  Tensor e_prime;  // [n x D]
  Tensor f_prime;  // [n x D]
};
PooledEmbeddings eval_pooled_embeddings(ParamStore& params, const ModelConfig& cfg,
                                        const Corpus& corpus, std::size_t n,
                                        bool use_adapters, std::size_t batch_size);

RetrievalMetrics metrics_from_similarity(Tensor similarity);

}  // namespace cavl

#include "cavl/evaluate.hpp"

#include <algorithm>
#include <numeric>

namespace cavl {

namespace {

// Chunk [0, n) into batches of at most `batch` with every chunk >= 2.
std::vector<std::pair<std::size_t, std::size_t>> chunk_ranges(std::size_t n,
                                                              std::size_t batch) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t at = 0;
  while (at < n) {
    std::size_t take = std::min(batch, n - at);
    if (n - at - take == 1) take -= 1;  // never leave a singleton behind
    out.emplace_back(at, take);
    at += take;
  }
  return out;
}

}  // namespace

PooledEmbeddings eval_pooled_embeddings(ParamStore& params, const ModelConfig& cfg,
                                        const Corpus& corpus, std::size_t n,
                                        bool use_adapters, std::size_t batch_size) {
  if (n < 2) throw BatchTooSmall("retrieval eval needs at least 2 samples");
  if (n > corpus.size()) {
    throw SplitTooSmall("eval over " + std::to_string(n) + " samples, split holds " +
                        std::to_string(corpus.size()));
  }
  const std::size_t d = cfg.hidden;
  PooledEmbeddings out{Tensor(Shape{n, d}), Tensor(Shape{n, d})};
  Rng unused(0);  // Eval batches draw nothing from the stream
  for (const auto& [begin, count] : chunk_ranges(n, std::max<std::size_t>(2, batch_size))) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), begin);
    BatchOptions opt;
    opt.kind = BatchKind::Eval;
    Batch batch = make_batch(corpus, idx, unused, opt);
    Tape tape;
    BoundParams bound(tape, params);
    EncodeOptions eopt;
    eopt.use_adapters = use_adapters;
    EncoderOutputs enc = model_forward(tape, batch, bound, cfg, eopt);
    const Tensor& e = tape.value(enc.e_prime);
    const Tensor& f = tape.value(enc.f_prime);
    std::copy(e.values().begin(), e.values().end(),
              out.e_prime.values().data() + begin * d);
    std::copy(f.values().begin(), f.values().end(),
              out.f_prime.values().data() + begin * d);
  }
  return out;
}

RetrievalMetrics metrics_from_similarity(Tensor similarity) {
  const std::size_t n = similarity.extent(0);
  RetrievalMetrics m;
  m.n = n;
  double diag = 0.0, off = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      (i == j ? diag : off) += similarity.at(i, j);
    }
  }
  m.aps = diag / static_cast<double>(n);
  m.mean_offdiag = n > 1 ? off / static_cast<double>(n * n - n) : 0.0;

  std::size_t hit1 = 0, hit5 = 0, hit10 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    // rank of the true image among candidates; ties go to the lower index
    const double own = similarity.at(i, i);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double s = similarity.at(i, j);
      if (s > own || (s == own && j < i)) ++rank;
    }
    if (rank < 1) ++hit1;
    if (rank < 5) ++hit5;
    if (rank < 10) ++hit10;
  }
  m.recall1 = static_cast<double>(hit1) / static_cast<double>(n);
  m.recall5 = static_cast<double>(hit5) / static_cast<double>(n);
  m.recall10 = static_cast<double>(hit10) / static_cast<double>(n);
  m.similarity = std::move(similarity);
  return m;
}

RetrievalMetrics eval_retrieval(ParamStore& params, const ModelConfig& cfg,
                                const Corpus& corpus, std::size_t n,
                                const EvalOptions& opt) {
  if (opt.kind == ScoreKind::PooledCosine) {
    PooledEmbeddings pooled =
        eval_pooled_embeddings(params, cfg, corpus, n, opt.use_adapters, opt.batch_size);
    Tensor sim(Shape{n, n});
    detail::matmul_nt(pooled.e_prime.values().data(), pooled.f_prime.values().data(),
                      sim.values().data(), n, cfg.hidden, n);
    return metrics_from_similarity(std::move(sim));
  }

  // MatchHead: score every (text, image) pairing with the adapter1 head.
  if (n < 2) throw BatchTooSmall("retrieval eval needs at least 2 samples");
  if (n > corpus.size()) {
    throw SplitTooSmall("eval over " + std::to_string(n) + " samples, split holds " +
                        std::to_string(corpus.size()));
  }
  Tensor sim(Shape{n, n});
  std::vector<std::size_t> texts, images;
  const std::size_t pair_batch = std::max<std::size_t>(2, opt.batch_size);
  texts.reserve(pair_batch);
  images.reserve(pair_batch);
  auto flush = [&] {
    if (texts.empty()) return;
    Batch batch = make_pair_batch(corpus, texts, images);
    Tape tape;
    BoundParams bound(tape, params);
    EncoderOutputs enc = model_forward(tape, batch, bound, cfg);
    Var logits = adapter1_task_logits(tape, batch, bound, cfg, enc);
    const Tensor& z = tape.value(logits);
    for (std::size_t r = 0; r < texts.size(); ++r) {
      sim.at(texts[r], images[r]) = z.at(r, 1) - z.at(r, 0);  // match-vs-mismatch margin
    }
    texts.clear();
    images.clear();
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      texts.push_back(i);
      images.push_back(j);
      if (texts.size() == pair_batch) flush();
    }
  }
  if (texts.size() == 1) {
    // borrow the last scored pair so the final chunk is a valid batch
    texts.push_back(n - 1);
    images.push_back(n - 1);
  }
  flush();
  return metrics_from_similarity(std::move(sim));
}

}  // namespace cavl

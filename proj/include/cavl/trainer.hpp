#pragma once

#include <functional>
#include <string>

#include "cavl/checkpoint.hpp"
#include "cavl/evaluate.hpp"

namespace cavl {

/// Runs `attempt(retry)` until it succeeds, re-trying with a fresh shuffle
/// (the retry index changes every RNG stream the step derives) when it
/// throws NonPositiveRatio. After max_retries failed retries the last error
/// propagates. Returns the number of retries consumed.
std::size_t run_step_with_retry(const std::function<void(std::size_t)>& attempt,
                                std::size_t max_retries);

struct PretrainSummary {
  LossReport last_step;
  RetrievalMetrics final_eval;
  std::string checkpoint_path;
  std::size_t steps = 0;
  std::size_t retries = 0;
};

/// Pre-trains from scratch on `train`, evaluating retrieval on `val` every
/// eval_every epochs. Writes metrics.jsonl and checkpoint.cavl under out_dir.
PretrainSummary pretrain(const RunConfig& cfg, const Corpus& train, const Corpus& val,
                         const std::string& out_dir);

struct FinetuneSummary {
  RetrievalMetrics final_eval;
  CountReport counts;
  ParameterPartition partition;
  std::string checkpoint_path;
  std::string partition_path;
  std::size_t steps = 0;
};

/// Loads a checkpoint, builds the requested adaptation, trains the pair-match
/// retrieval task on `train` and evaluates on `eval_split`. Frozen tensors
/// are never updated; optimizer state exists only for trainable ones.
FinetuneSummary finetune(const RunConfig& cfg, const std::string& checkpoint_path,
                         FinetuneMode mode, const TaskSpec& task, std::uint64_t seed,
                         const Corpus& train, const Corpus& eval_split,
                         const std::string& out_dir);

/// Scoring scheme a fine-tuned checkpoint is evaluated with.
EvalOptions eval_options_for_mode(FinetuneMode mode, std::size_t batch_size);

}  // namespace cavl

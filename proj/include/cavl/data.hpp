#pragma once

#include <array>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cavl/batch.hpp"
#include "cavl/config.hpp"
#include "cavl/rng.hpp"

namespace cavl {

/// Synthetic subword vocabulary. Specials occupy fixed ids; the rest is laid
/// out as per-class content tokens, then attribute tokens shared across
/// classes, then filler tokens.
class Vocabulary {
 public:
  static constexpr Index kPad = 0;
  static constexpr Index kCls = 1;
  static constexpr Index kSep = 2;
  static constexpr Index kMask = 3;
  static constexpr std::size_t kNumSpecials = 4;
  static constexpr std::size_t kClassTokens = 6;  // content ids owned per class

  static Vocabulary synthetic(std::size_t vocab_size, const GeneratorConfig& gen);

  std::size_t size() const { return id_to_subword_.size(); }
  const std::string& subword(Index id) const;
  Index id_of(const std::string& subword) const;

  Index class_token(std::size_t cls, std::size_t j) const;
  Index attribute_token(std::size_t attr, std::size_t bucket) const;
  Index filler_token(std::size_t i) const;
  std::size_t filler_count() const;

  bool is_special(Index id) const {
    return id >= 0 && id < static_cast<Index>(kNumSpecials);
  }

 private:
  std::size_t classes_ = 0, attributes_ = 0, buckets_ = 0;
  std::vector<std::string> id_to_subword_;
  std::unordered_map<std::string, Index> subword_to_id_;
};

/// One text/ROI pair. The corpus stores pristine matched pairs; the
/// caption/NSP booleans are set by the batch sampler when it swaps captions
/// or splices sentence halves.
struct MultimodalSample {
  std::uint64_t id = 0;
  std::vector<Index> tokens;  // two equal halves
  Tensor rois;                // [K x d_v], rows in descending score order
  Tensor roi_scores;          // [K]
  bool caption_is_match = true;
  bool nsp_is_consecutive = true;
  Index latent_class = 0;
};

struct Corpus {
  GeneratorConfig gen;
  Vocabulary vocab;
  std::vector<MultimodalSample> samples;
  std::vector<std::vector<std::size_t>> by_class;

  void rebuild_class_index();
  std::size_t size() const { return samples.size(); }
};

enum class Split : std::uint64_t { Train = 0, Val = 1, Test = 2, Finetune = 3 };
const char* split_name(Split s);

/// Deterministic synthetic corpus. Class geometry (ROI cluster centers,
/// attribute offsets, vocabulary) depends only on (seed, config), so all
/// splits of one seed live in the same world; the sample stream additionally
/// depends on the split.
Corpus generate_synthetic_corpus(std::uint64_t seed, Split split, std::size_t n_samples,
                                 const GeneratorConfig& gen, const ModelConfig& model);

// Masking ------------------------------------------------------------------

enum class Replacement : std::uint8_t { Mask, Random, Keep };

struct MaskingPlan {
  std::vector<std::size_t> positions;  // into the token sequence
  std::vector<Index> targets;          // original ids
  std::vector<Replacement> replacement;
};

/// Selects each maskable (non-special) position independently with
/// probability `rate`; a selected position becomes [MASK] / a random
/// non-special id / stays put according to `split`. If nothing is selected,
/// one maskable position is forced uniformly at random.
MaskingPlan apply_masking(std::vector<Index>& tokens, const Vocabulary& vocab, Rng& rng,
                          double rate = 0.15,
                          std::array<double, 3> split = {0.8, 0.1, 0.1});

// Batching ------------------------------------------------------------------

enum class BatchKind {
  Pretrain,           // caption swap + NSP splice + masking
  FinetuneRetrieval,  // pair-match labels, negatives from any other sample
  Eval,               // pristine pairs, no masking
};

struct BatchOptions {
  BatchKind kind = BatchKind::Pretrain;
  double mask_rate = 0.15;
  std::array<double, 3> mask_split = {0.8, 0.1, 0.1};
};

/// Assembles the chosen samples into a model-ready batch. Pretrain batches
/// draw caption-match and NSP labels at 50% each; a mismatched caption is
/// always taken from a different latent class.
Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices, Rng& rng,
                 const BatchOptions& opt);

/// Explicit (text, image) pairings with match labels, no masking. Used by
/// pair-scoring retrieval evaluation.
Batch make_pair_batch(const Corpus& corpus, std::span<const std::size_t> text_indices,
                      std::span<const std::size_t> image_indices);

// Corpus files ---------------------------------------------------------------

/// Writes {split}.jsonl (id, latent_class, pair_file_offset, tokens) and the
/// {split}.rois sidecar.
void save_corpus(const Corpus& corpus, const std::string& dir, const std::string& split);

/// Loads a corpus written by save_corpus; ROI features pass through the
/// score-threshold/extent filter of ingest_roi_features.
Corpus load_corpus(const std::string& dir, const std::string& split,
                   std::size_t vocab_size, const GeneratorConfig& gen,
                   double score_threshold = 0.5, std::size_t max_rois = 100);

}  // namespace cavl

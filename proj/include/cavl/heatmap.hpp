#pragma once

#include <string>

#include "cavl/evaluate.hpp"

namespace cavl {

struct HeatmapResult {
  RetrievalMetrics metrics;
  std::string csv_path;
  std::string pgm_path;
};

/// Computes pooled embeddings for the first n samples of a split and writes
/// the n x n cosine matrix as heatmap.csv (6 decimals, row = text,
/// col = image) plus heatmap.pgm scaled so -1 -> 0 and +1 -> 255.
HeatmapResult export_heatmap(ParamStore& params, const ModelConfig& cfg,
                             const Corpus& corpus, std::size_t n,
                             const std::string& out_dir, const EvalOptions& opt = {});

/// CSV loader used to verify the exported matrix round-trips at print
/// precision.
Tensor read_similarity_csv(const std::string& path);

}  // namespace cavl

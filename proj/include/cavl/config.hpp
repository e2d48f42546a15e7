#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

namespace cavl {

struct ModelConfig {
  std::size_t vocab_size = 1000;
  std::size_t hidden = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t max_text_len = 32;
  std::size_t max_rois = 100;  // hard cap, <= 100
  std::size_t roi_feature_dim = 32;
  std::size_t segment_count = 2;
  double layer_norm_eps = 1e-5;

  void validate() const;
};

struct LossWeights {
  double mlm = 1.0;
  double nsp = 1.0;
  double caption = 1.0;
  double pwcl = 1.0;
};

struct GeneratorConfig {
  std::size_t classes = 4;
  std::size_t train_samples = 512;
  std::size_t val_samples = 64;
  std::size_t test_samples = 64;
  std::size_t tokens_per_half = 8;  // text = two halves
  std::size_t rois_per_sample = 8;
  std::size_t attributes = 4;  // latent attribute slots shared by both modalities
  std::size_t buckets = 4;     // values per attribute
  double roi_noise = 0.1;
  double token_noise = 0.05;
};

struct DataConfig {
  std::string dir;  // when set, corpus is loaded from {split}.jsonl/.rois files
  GeneratorConfig gen;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double base_lr = 1e-3;
  double warmup_frac = 0.15;
  LossWeights weights;
  std::size_t eval_every = 1;  // epochs between retrieval evals
  double mask_rate = 0.15;
};

struct FinetuneConfig {
  std::string mode = "adapter2";  // full | adapter1 | adapter2
  std::size_t bottleneck = 8;
  double lr = 1e-4;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  FinetuneConfig finetune;
  std::uint64_t seed = 7;
  std::string output_dir;

  void validate() const;
};

/// Strict parsing: unknown keys anywhere in the document are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::string& path);

}  // namespace cavl

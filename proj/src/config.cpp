#include "cavl/config.hpp"

#include <fstream>

#include "cavl/errors.hpp"

namespace cavl {

using nlohmann::json;

void ModelConfig::validate() const {
  if (vocab_size < 5) throw InvalidConfig("model.vocab_size must cover the special tokens");
  if (hidden == 0 || layers == 0 || heads == 0 || ffn_dim == 0 || max_text_len == 0 ||
      max_rois == 0 || roi_feature_dim == 0) {
    throw InvalidConfig("model extents must be >= 1");
  }
  if (hidden % heads != 0) throw InvalidConfig("model.hidden must be divisible by model.heads");
  if (max_rois > 100) throw InvalidConfig("model.max_rois is capped at 100");
  if (segment_count != 2) throw InvalidConfig("model.segment_count must be 2 (text, visual)");
  if (!(layer_norm_eps > 0.0)) throw InvalidConfig("model.layer_norm_eps must be positive");
}

void RunConfig::validate() const {
  model.validate();
  if (train.batch_size < 2) throw InvalidConfig("train.batch_size must be >= 2");
  if (train.epochs == 0) throw InvalidConfig("train.epochs must be >= 1");
  if (!(train.base_lr > 0.0)) throw InvalidConfig("train.base_lr must be positive");
  if (!(train.warmup_frac > 0.0) || train.warmup_frac >= 1.0) {
    throw InvalidConfig("train.warmup_frac must lie in (0, 1)");
  }
  if (!(train.mask_rate > 0.0) || train.mask_rate >= 1.0) {
    throw InvalidConfig("train.mask_rate must lie in (0, 1)");
  }
  if (train.weights.mlm < 0 || train.weights.nsp < 0 || train.weights.caption < 0 ||
      train.weights.pwcl < 0) {
    throw InvalidConfig("train.weights must be non-negative");
  }
  if (finetune.mode != "full" && finetune.mode != "adapter1" && finetune.mode != "adapter2") {
    throw InvalidConfig("finetune.mode must be full, adapter1 or adapter2");
  }
  if (data.gen.classes < 2) throw InvalidConfig("data.generate.classes must be >= 2");
  if (data.gen.buckets < 2) throw InvalidConfig("data.generate.buckets must be >= 2");
  if (data.gen.rois_per_sample > model.max_rois) {
    throw InvalidConfig("data.generate.rois_per_sample exceeds model.max_rois");
  }
  if (2 * data.gen.tokens_per_half + 2 > model.max_text_len) {
    throw InvalidConfig("generated text does not fit in model.max_text_len");
  }
}

namespace {

void expect_keys(const json& j, std::initializer_list<const char*> allowed,
                 const std::string& where) {
  if (!j.is_object()) throw InvalidConfig(where + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed) {
      if (item.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) throw InvalidConfig("unknown config key \"" + item.key() + "\" in " + where);
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  RunConfig cfg;
  expect_keys(j, {"model", "data", "train", "finetune", "seed", "output_dir"}, "config");

  if (j.contains("model")) {
    const json& m = j.at("model");
    expect_keys(m,
                {"vocab_size", "hidden", "layers", "heads", "ffn_dim", "max_text_len",
                 "max_rois", "roi_feature_dim", "segment_count", "layer_norm_eps"},
                "config.model");
    get_if(m, "vocab_size", cfg.model.vocab_size);
    get_if(m, "hidden", cfg.model.hidden);
    get_if(m, "layers", cfg.model.layers);
    get_if(m, "heads", cfg.model.heads);
    get_if(m, "ffn_dim", cfg.model.ffn_dim);
    get_if(m, "max_text_len", cfg.model.max_text_len);
    get_if(m, "max_rois", cfg.model.max_rois);
    get_if(m, "roi_feature_dim", cfg.model.roi_feature_dim);
    get_if(m, "segment_count", cfg.model.segment_count);
    get_if(m, "layer_norm_eps", cfg.model.layer_norm_eps);
  }

  if (j.contains("data")) {
    const json& d = j.at("data");
    expect_keys(d, {"dir", "generate"}, "config.data");
    get_if(d, "dir", cfg.data.dir);
    if (d.contains("generate")) {
      const json& g = d.at("generate");
      expect_keys(g,
                  {"classes", "train_samples", "val_samples", "test_samples",
                   "tokens_per_half", "rois_per_sample", "attributes", "buckets",
                   "roi_noise", "token_noise"},
                  "config.data.generate");
      get_if(g, "classes", cfg.data.gen.classes);
      get_if(g, "train_samples", cfg.data.gen.train_samples);
      get_if(g, "val_samples", cfg.data.gen.val_samples);
      get_if(g, "test_samples", cfg.data.gen.test_samples);
      get_if(g, "tokens_per_half", cfg.data.gen.tokens_per_half);
      get_if(g, "rois_per_sample", cfg.data.gen.rois_per_sample);
      get_if(g, "attributes", cfg.data.gen.attributes);
      get_if(g, "buckets", cfg.data.gen.buckets);
      get_if(g, "roi_noise", cfg.data.gen.roi_noise);
      get_if(g, "token_noise", cfg.data.gen.token_noise);
    }
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    expect_keys(t,
                {"batch_size", "epochs", "base_lr", "warmup_frac", "weights", "eval_every",
                 "mask_rate"},
                "config.train");
    get_if(t, "batch_size", cfg.train.batch_size);
    get_if(t, "epochs", cfg.train.epochs);
    get_if(t, "base_lr", cfg.train.base_lr);
    get_if(t, "warmup_frac", cfg.train.warmup_frac);
    get_if(t, "eval_every", cfg.train.eval_every);
    get_if(t, "mask_rate", cfg.train.mask_rate);
    if (t.contains("weights")) {
      const json& w = t.at("weights");
      expect_keys(w, {"mlm", "nsp", "caption", "pwcl"}, "config.train.weights");
      get_if(w, "mlm", cfg.train.weights.mlm);
      get_if(w, "nsp", cfg.train.weights.nsp);
      get_if(w, "caption", cfg.train.weights.caption);
      get_if(w, "pwcl", cfg.train.weights.pwcl);
    }
  }

  if (j.contains("finetune")) {
    const json& f = j.at("finetune");
    expect_keys(f, {"mode", "bottleneck", "lr", "epochs", "batch_size"}, "config.finetune");
    get_if(f, "mode", cfg.finetune.mode);
    get_if(f, "bottleneck", cfg.finetune.bottleneck);
    get_if(f, "lr", cfg.finetune.lr);
    get_if(f, "epochs", cfg.finetune.epochs);
    get_if(f, "batch_size", cfg.finetune.batch_size);
  }

  get_if(j, "seed", cfg.seed);
  get_if(j, "output_dir", cfg.output_dir);
  cfg.validate();
  return cfg;
}

json run_config_to_json(const RunConfig& cfg) {
  json j;
  j["model"] = {{"vocab_size", cfg.model.vocab_size},
                {"hidden", cfg.model.hidden},
                {"layers", cfg.model.layers},
                {"heads", cfg.model.heads},
                {"ffn_dim", cfg.model.ffn_dim},
                {"max_text_len", cfg.model.max_text_len},
                {"max_rois", cfg.model.max_rois},
                {"roi_feature_dim", cfg.model.roi_feature_dim},
                {"segment_count", cfg.model.segment_count},
                {"layer_norm_eps", cfg.model.layer_norm_eps}};
  j["data"] = {{"dir", cfg.data.dir},
               {"generate",
                {{"classes", cfg.data.gen.classes},
                 {"train_samples", cfg.data.gen.train_samples},
                 {"val_samples", cfg.data.gen.val_samples},
                 {"test_samples", cfg.data.gen.test_samples},
                 {"tokens_per_half", cfg.data.gen.tokens_per_half},
                 {"rois_per_sample", cfg.data.gen.rois_per_sample},
                 {"attributes", cfg.data.gen.attributes},
                 {"buckets", cfg.data.gen.buckets},
                 {"roi_noise", cfg.data.gen.roi_noise},
                 {"token_noise", cfg.data.gen.token_noise}}}};
  j["train"] = {{"batch_size", cfg.train.batch_size},
                {"epochs", cfg.train.epochs},
                {"base_lr", cfg.train.base_lr},
                {"warmup_frac", cfg.train.warmup_frac},
                {"eval_every", cfg.train.eval_every},
                {"mask_rate", cfg.train.mask_rate},
                {"weights",
                 {{"mlm", cfg.train.weights.mlm},
                  {"nsp", cfg.train.weights.nsp},
                  {"caption", cfg.train.weights.caption},
                  {"pwcl", cfg.train.weights.pwcl}}}};
  j["finetune"] = {{"mode", cfg.finetune.mode},
                   {"bottleneck", cfg.finetune.bottleneck},
                   {"lr", cfg.finetune.lr},
                   {"epochs", cfg.finetune.epochs},
                   {"batch_size", cfg.finetune.batch_size}};
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  return j;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path);
  json j;
  try {
    is >> j;
  } catch (const json::parse_error& e) {
    throw InvalidConfig("config is not valid JSON: " + std::string(e.what()));
  }
  return run_config_from_json(j);
}

}  // namespace cavl

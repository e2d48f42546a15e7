#include "cavl/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cavl/heatmap.hpp"
#include "cavl/log.hpp"
#include "cavl/opcheck.hpp"
#include "cavl/trainer.hpp"

namespace cavl {

namespace fs = std::filesystem;

namespace {

std::size_t split_default_count(const GeneratorConfig& gen, Split split) {
  switch (split) {
    case Split::Train: return gen.train_samples;
    case Split::Val: return gen.val_samples;
    case Split::Test: return gen.test_samples;
    case Split::Finetune: return gen.train_samples;
  }
  return gen.train_samples;
}

/// Corpus for one split: from data.dir when configured, otherwise generated
/// in the world addressed by world_seed.
Corpus resolve_corpus(const RunConfig& cfg, Split split, std::uint64_t world_seed) {
  if (!cfg.data.dir.empty()) {
    return load_corpus(cfg.data.dir, split_name(split), cfg.model.vocab_size,
                       cfg.data.gen, 0.5, cfg.model.max_rois);
  }
  return generate_synthetic_corpus(world_seed, split,
                                   split_default_count(cfg.data.gen, split),
                                   cfg.data.gen, cfg.model);
}

struct ConfigFlags {
  std::string config_path;
  std::string data_dir;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> lr;
  std::optional<double> w_mlm, w_nsp, w_cap, w_pwcl;
};

// flag > file > default
RunConfig resolve_config(const ConfigFlags& f) {
  RunConfig cfg;
  if (!f.config_path.empty()) cfg = load_run_config(f.config_path);
  if (!f.data_dir.empty()) cfg.data.dir = f.data_dir;
  if (!f.output_dir.empty()) cfg.output_dir = f.output_dir;
  if (f.seed) cfg.seed = *f.seed;
  if (f.epochs) cfg.train.epochs = *f.epochs;
  if (f.batch_size) cfg.train.batch_size = *f.batch_size;
  if (f.lr) cfg.train.base_lr = *f.lr;
  if (f.w_mlm) cfg.train.weights.mlm = *f.w_mlm;
  if (f.w_nsp) cfg.train.weights.nsp = *f.w_nsp;
  if (f.w_cap) cfg.train.weights.caption = *f.w_cap;
  if (f.w_pwcl) cfg.train.weights.pwcl = *f.w_pwcl;
  cfg.validate();
  return cfg;
}

void add_config_flags(CLI::App* cmd, ConfigFlags& f, bool with_train_flags) {
  cmd->add_option("--config", f.config_path, "JSON run configuration");
  cmd->add_option("--data", f.data_dir, "corpus directory ({split}.jsonl/.rois)");
  cmd->add_option("--seed", f.seed, "RNG seed override");
  if (with_train_flags) {
    cmd->add_option("--epochs", f.epochs, "epoch count override");
    cmd->add_option("--batch-size", f.batch_size, "batch size override");
    cmd->add_option("--lr", f.lr, "base learning rate override");
    cmd->add_option("--w-mlm", f.w_mlm, "MLM loss weight");
    cmd->add_option("--w-nsp", f.w_nsp, "NSP loss weight");
    cmd->add_option("--w-cap", f.w_cap, "caption-match loss weight");
    cmd->add_option("--w-pwcl", f.w_pwcl, "pair-wise contrastive loss weight");
  }
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  if (name == "finetune") return Split::Finetune;
  throw UsageError("unknown split \"" + name + "\"");
}

nlohmann::json retrieval_json(const RetrievalMetrics& m) {
  return nlohmann::json{{"n", m.n},
                        {"aps", m.aps},
                        {"mean_offdiag", m.mean_offdiag},
                        {"recall@1", m.recall1},
                        {"recall@5", m.recall5},
                        {"recall@10", m.recall10}};
}

int cmd_gen_data(const ConfigFlags& flags, const std::string& out_dir) {
  RunConfig cfg = resolve_config(flags);
  if (out_dir.empty()) throw UsageError("gen-data needs --out");
  for (Split split : {Split::Train, Split::Val, Split::Test}) {
    Corpus corpus = generate_synthetic_corpus(
        cfg.seed, split, split_default_count(cfg.data.gen, split), cfg.data.gen,
        cfg.model);
    save_corpus(corpus, out_dir, split_name(split));
    log_info(std::string("wrote ") + split_name(split) + " split: " +
             std::to_string(corpus.size()) + " samples");
  }
  std::cout << nlohmann::json{{"out", out_dir},
                              {"classes", cfg.data.gen.classes},
                              {"train", cfg.data.gen.train_samples},
                              {"val", cfg.data.gen.val_samples},
                              {"test", cfg.data.gen.test_samples}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_pretrain(const ConfigFlags& flags, const std::string& out_dir) {
  RunConfig cfg = resolve_config(flags);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  if (cfg.output_dir.empty()) throw UsageError("pretrain needs --out or output_dir");
  const Corpus train = resolve_corpus(cfg, Split::Train, cfg.seed);
  const Corpus val = resolve_corpus(cfg, Split::Val, cfg.seed);
  const PretrainSummary summary = pretrain(cfg, train, val, cfg.output_dir);
  std::cout << nlohmann::json{{"checkpoint", summary.checkpoint_path},
                              {"steps", summary.steps},
                              {"retries", summary.retries},
                              {"final_total", summary.last_step.total},
                              {"eval", retrieval_json(summary.final_eval)}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_finetune(const ConfigFlags& flags, const std::string& out_dir,
                 const std::string& checkpoint, const std::string& mode_name,
                 std::optional<std::size_t> bottleneck) {
  if (checkpoint.empty()) throw UsageError("finetune needs --checkpoint");
  const Checkpoint ck = load_checkpoint(checkpoint);
  RunConfig cfg = flags.config_path.empty() ? ck.config : load_run_config(flags.config_path);
  if (!flags.data_dir.empty()) cfg.data.dir = flags.data_dir;
  if (flags.epochs) cfg.finetune.epochs = *flags.epochs;
  if (flags.batch_size) cfg.finetune.batch_size = *flags.batch_size;
  if (flags.lr) cfg.finetune.lr = *flags.lr;
  if (!mode_name.empty()) cfg.finetune.mode = mode_name;
  if (bottleneck) cfg.finetune.bottleneck = *bottleneck;
  cfg.validate();
  if (out_dir.empty()) throw UsageError("finetune needs --out");

  // the corpus world stays pinned to the checkpoint's seed
  const std::uint64_t world_seed = ck.config.seed;
  const std::uint64_t run_seed = flags.seed ? *flags.seed : cfg.seed;
  const Corpus train = resolve_corpus(cfg, Split::Train, world_seed);
  const Corpus val = resolve_corpus(cfg, Split::Val, world_seed);

  const FinetuneMode mode = finetune_mode_from_string(cfg.finetune.mode);
  const FinetuneSummary summary = finetune(cfg, checkpoint, mode, TaskSpec{}, run_seed,
                                           train, val, out_dir);
  std::cout << nlohmann::json{{"checkpoint", summary.checkpoint_path},
                              {"partition", summary.partition_path},
                              {"mode", finetune_mode_name(mode)},
                              {"trainable", summary.counts.trainable},
                              {"frozen", summary.counts.frozen},
                              {"reduction_fraction", summary.counts.reduction_fraction},
                              {"eval", retrieval_json(summary.final_eval)}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& split, std::size_t n, bool zero_shot,
             const std::string& out_dir, std::size_t batch_size) {
  if (checkpoint.empty()) throw UsageError("eval needs --checkpoint");
  Checkpoint ck = load_checkpoint(checkpoint);
  RunConfig cfg = ck.config;
  if (!data_dir.empty()) cfg.data.dir = data_dir;
  const Corpus corpus = resolve_corpus(cfg, parse_split(split), ck.config.seed);
  const std::size_t count = n == 0 ? corpus.size() : n;

  EvalOptions opt;
  opt.batch_size = batch_size;
  const std::string mode_str = ck.extra.value("finetune_mode", "none");
  if (!zero_shot && mode_str != "none") {
    opt = eval_options_for_mode(finetune_mode_from_string(mode_str), batch_size);
  }
  RetrievalMetrics metrics = eval_retrieval(ck.params, cfg.model, corpus, count, opt);

  nlohmann::json out = retrieval_json(metrics);
  out["zero_shot"] = zero_shot || mode_str == "none";
  out["split"] = split;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream os(fs::path(out_dir) / "eval.json");
    if (!os) throw IoError("cannot write eval.json under " + out_dir);
    os << out.dump(2) << '\n';
  }
  std::cout << out.dump() << '\n';
  return 0;
}

int cmd_heatmap(const std::string& checkpoint, const std::string& data_dir,
                const std::string& split, std::size_t n, const std::string& out_dir,
                std::size_t batch_size) {
  if (checkpoint.empty()) throw UsageError("heatmap needs --checkpoint");
  if (out_dir.empty()) throw UsageError("heatmap needs --out");
  Checkpoint ck = load_checkpoint(checkpoint);
  RunConfig cfg = ck.config;
  if (!data_dir.empty()) cfg.data.dir = data_dir;
  const Corpus corpus = resolve_corpus(cfg, parse_split(split), ck.config.seed);

  EvalOptions opt;
  opt.batch_size = batch_size;
  const std::string mode_str = ck.extra.value("finetune_mode", "none");
  if (mode_str != "none" && mode_str != "adapter1") {
    opt = eval_options_for_mode(finetune_mode_from_string(mode_str), batch_size);
  }
  const HeatmapResult result = export_heatmap(ck.params, cfg.model, corpus, n, out_dir, opt);
  std::cout << nlohmann::json{{"csv", result.csv_path},
                              {"pgm", result.pgm_path},
                              {"n", result.metrics.n},
                              {"aps", result.metrics.aps},
                              {"mean_offdiag", result.metrics.mean_offdiag}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& ops_arg) {
  std::vector<std::string> which;
  std::stringstream ss(ops_arg);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) which.push_back(item);
  }
  const auto results = run_op_checks(which);
  bool all_pass = true;
  std::printf("%-20s %12s %10s  %s\n", "op", "max_rel_err", "tolerance", "status");
  for (const auto& r : results) {
    std::printf("%-20s %12.3e %10.0e  %s\n", r.name.c_str(), r.max_rel_error,
                r.tolerance, r.pass ? "ok" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 2;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"contrastive vision-language pretraining with adapter fine-tuning"};
  app.require_subcommand(1);

  ConfigFlags gen_flags;
  std::string gen_out;
  CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic corpus");
  add_config_flags(gen, gen_flags, false);
  gen->add_option("--out", gen_out, "output directory")->required();

  ConfigFlags pre_flags;
  std::string pre_out;
  CLI::App* pre = app.add_subcommand("pretrain", "pre-train from scratch");
  add_config_flags(pre, pre_flags, true);
  pre->add_option("--out", pre_out, "run output directory");

  ConfigFlags ft_flags;
  std::string ft_out, ft_checkpoint, ft_mode;
  std::optional<std::size_t> ft_bottleneck;
  CLI::App* ft = app.add_subcommand("finetune", "fine-tune a pre-trained checkpoint");
  add_config_flags(ft, ft_flags, true);
  ft->add_option("--checkpoint", ft_checkpoint, "pre-trained checkpoint")->required();
  ft->add_option("--mode", ft_mode, "full | adapter1 | adapter2");
  ft->add_option("--bottleneck", ft_bottleneck, "adapter2 bottleneck width");
  ft->add_option("--out", ft_out, "run output directory")->required();

  std::string ev_checkpoint, ev_data, ev_split = "test", ev_out;
  std::size_t ev_n = 0, ev_batch = 32;
  bool ev_zero_shot = false;
  CLI::App* ev = app.add_subcommand("eval", "text-to-image retrieval metrics");
  ev->add_option("--checkpoint", ev_checkpoint, "checkpoint to score")->required();
  ev->add_option("--data", ev_data, "corpus directory override");
  ev->add_option("--split", ev_split, "corpus split (default test)");
  ev->add_option("--n", ev_n, "candidate count (default: whole split)");
  ev->add_option("--batch-size", ev_batch, "forward batch size");
  ev->add_flag("--zero-shot", ev_zero_shot, "score with pooled cosines, ignoring task heads");
  ev->add_option("--out", ev_out, "directory for eval.json");

  std::string hm_checkpoint, hm_data, hm_split = "test", hm_out;
  std::size_t hm_n = 16, hm_batch = 32;
  CLI::App* hm = app.add_subcommand("heatmap", "export the similarity matrix");
  hm->add_option("--checkpoint", hm_checkpoint, "checkpoint to visualize")->required();
  hm->add_option("--data", hm_data, "corpus directory override");
  hm->add_option("--split", hm_split, "corpus split (default test)");
  hm->add_option("--n", hm_n, "matrix size (default 16)");
  hm->add_option("--batch-size", hm_batch, "forward batch size");
  hm->add_option("--out", hm_out, "output directory")->required();

  std::string gc_ops = "all";
  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc->add_option("--ops", gc_ops, "comma-separated op list or \"all\"");

  std::vector<std::string> argv_storage = args;
  std::vector<char*> argv;
  argv.push_back(const_cast<char*>("cavl"));
  for (auto& a : argv_storage) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_flags, gen_out);
    if (pre->parsed()) return cmd_pretrain(pre_flags, pre_out);
    if (ft->parsed()) {
      return cmd_finetune(ft_flags, ft_out, ft_checkpoint, ft_mode, ft_bottleneck);
    }
    if (ev->parsed()) {
      return cmd_eval(ev_checkpoint, ev_data, ev_split, ev_n, ev_zero_shot, ev_out,
                      ev_batch);
    }
    if (hm->parsed()) {
      return cmd_heatmap(hm_checkpoint, hm_data, hm_split, hm_n, hm_out, hm_batch);
    }
    if (gc->parsed()) return cmd_gradcheck(gc_ops);
    throw UsageError("no subcommand given");
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace cavl

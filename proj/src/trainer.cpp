#include "cavl/trainer.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>

#include "cavl/log.hpp"
#include "cavl/metrics.hpp"

namespace cavl {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kInitStream = 0x494e4954ULL;     // parameter init
constexpr std::uint64_t kDataStream = 0x44415441ULL;     // shuffling + batches
constexpr std::uint64_t kAdapterStream = 0x41444150ULL;  // adapter init

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  return idx;
}

}  // namespace

std::size_t run_step_with_retry(const std::function<void(std::size_t)>& attempt,
                                std::size_t max_retries) {
  for (std::size_t retry = 0;; ++retry) {
    try {
      attempt(retry);
      return retry;
    } catch (const NonPositiveRatio& e) {
      if (retry == max_retries) {
        throw NonPositiveRatio(std::string(e.what()) + " (after " +
                               std::to_string(max_retries) + " batch retries)");
      }
      log_debug(std::string("retrying batch after: ") + e.what());
    }
  }
}

PretrainSummary pretrain(const RunConfig& cfg, const Corpus& train, const Corpus& val,
                         const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  log_open_file((fs::path(out_dir) / "run.log").string());
  MetricsWriter metrics((fs::path(out_dir) / "metrics.jsonl").string());

  Rng init_rng = Rng(cfg.seed).derive(kInitStream);
  ParamStore params = init_backbone_params(cfg.model, init_rng);
  AdamOptimizer optim(params);

  const std::size_t b = cfg.train.batch_size;
  const std::size_t steps_per_epoch = train.size() / b;
  if (steps_per_epoch == 0) {
    throw InvalidConfig("corpus of " + std::to_string(train.size()) +
                        " samples cannot fill a batch of " + std::to_string(b));
  }
  const Schedule sched = Schedule::linear_warmup(
      cfg.train.base_lr, cfg.train.epochs * steps_per_epoch, cfg.train.warmup_frac);

  const Rng data_root = Rng(cfg.seed).derive(kDataStream);
  BatchOptions batch_opt;
  batch_opt.kind = BatchKind::Pretrain;
  batch_opt.mask_rate = cfg.train.mask_rate;

  PretrainSummary summary;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    const std::vector<std::size_t> order =
        shuffled_indices(train.size(), data_root.derive(0x500000ULL + epoch));
    for (std::size_t bi = 0; bi < steps_per_epoch; ++bi) {
      const std::uint64_t step_stream = (epoch * steps_per_epoch + bi) * 8ULL;
      auto attempt = [&](std::size_t retry) {
        Rng rng = data_root.derive(step_stream + retry);
        std::vector<std::size_t> chosen(order.begin() + bi * b,
                                        order.begin() + (bi + 1) * b);
        if (retry > 0) {
          // fresh shuffle: redraw the batch membership from the whole corpus
          const std::vector<std::size_t> reshuffled =
              shuffled_indices(train.size(), rng.derive(0xFEEDULL));
          chosen.assign(reshuffled.begin(), reshuffled.begin() + b);
        }
        Batch batch = make_batch(train, chosen, rng, batch_opt);

        Tape tape;
        BoundParams bound(tape, params);
        EncoderOutputs enc = model_forward(tape, batch, bound, cfg.model);
        PretrainParts parts;
        parts.mlm = mlm_loss(tape, enc.states,
                             HeadVars{bound.at("head.mlm.w"), bound.at("head.mlm.b")},
                             batch.masked_rows, batch.mlm_targets);
        parts.nsp = nsp_loss(tape, enc.cls_states,
                             HeadVars{bound.at("head.nsp.w"), bound.at("head.nsp.b")},
                             batch.nsp_labels);
        parts.caption = caption_match_loss(
            tape, enc.cls_states, HeadVars{bound.at("head.cap.w"), bound.at("head.cap.b")},
            batch.match_labels);
        if (cfg.train.weights.pwcl > 0.0) {
          parts.pwcl = pwcl_loss(tape, enc.e_prime, enc.f_prime);
        }
        parts.aps = aps(tape.value(enc.e_prime), tape.value(enc.f_prime));
        CombinedLoss combined = pretrain_loss(tape, parts, cfg.train.weights);

        tape.backward(combined.total);
        ++step;
        const double lr = sched.at(step);
        optim.step(params, lr);
        metrics.step_record(step, epoch, lr, combined.report);
        summary.last_step = combined.report;
      };
      summary.retries += run_step_with_retry(attempt, 3);
    }

    if ((epoch + 1) % cfg.train.eval_every == 0 || epoch + 1 == cfg.train.epochs) {
      EvalOptions eopt;
      eopt.batch_size = b;
      summary.final_eval = eval_retrieval(params, cfg.model, val, val.size(), eopt);
      metrics.eval_record(step, epoch, summary.final_eval);
      log_info("epoch " + std::to_string(epoch + 1) + "/" +
               std::to_string(cfg.train.epochs) + " total=" +
               std::to_string(summary.last_step.total) + " eval aps=" +
               std::to_string(summary.final_eval.aps) + " offdiag=" +
               std::to_string(summary.final_eval.mean_offdiag) + " r@1=" +
               std::to_string(summary.final_eval.recall1));
    }
    metrics.flush();
  }
  summary.steps = step;

  const std::string ckpt = (fs::path(out_dir) / "checkpoint.cavl").string();
  save_checkpoint(params, &optim, cfg, cfg.seed,
                  nlohmann::json{{"stage", "pretrain"}, {"finetune_mode", "none"}}, ckpt);
  summary.checkpoint_path = ckpt;
  log_close_file();
  return summary;
}

EvalOptions eval_options_for_mode(FinetuneMode mode, std::size_t batch_size) {
  EvalOptions opt;
  opt.batch_size = batch_size;
  if (mode == FinetuneMode::Adapter1) {
    // backbone embeddings are frozen; the trained signal lives in the head
    opt.kind = ScoreKind::MatchHead;
  } else {
    opt.kind = ScoreKind::PooledCosine;
    opt.use_adapters = mode == FinetuneMode::Adapter2;
  }
  return opt;
}

FinetuneSummary finetune(const RunConfig& cfg, const std::string& checkpoint_path,
                         FinetuneMode mode, const TaskSpec& task, std::uint64_t seed,
                         const Corpus& train, const Corpus& eval_split,
                         const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  log_open_file((fs::path(out_dir) / "run.log").string());
  MetricsWriter metrics((fs::path(out_dir) / "metrics.jsonl").string());

  Checkpoint ck = load_checkpoint(checkpoint_path);
  ParamStore params = std::move(ck.params);

  Rng adapter_rng = Rng(seed).derive(kAdapterStream);
  ParameterPartition partition;
  switch (mode) {
    case FinetuneMode::Full:
      params.add("head.task.w", normal_init({cfg.model.hidden, task.output_dim},
                                            adapter_rng));
      params.add("head.task.b", Tensor(Shape{task.output_dim}));
      partition = partition_parameters(params, FinetuneMode::Full);
      apply_partition(params, partition);
      break;
    case FinetuneMode::Adapter1:
      partition = build_adapter1(params, cfg.model, task, adapter_rng);
      break;
    case FinetuneMode::Adapter2:
      partition = build_adapter2(params, cfg.model, cfg.finetune.bottleneck, task,
                                 adapter_rng);
      break;
  }

  FinetuneSummary summary;
  summary.partition = partition;
  summary.counts = count_parameters(partition);
  summary.partition_path = (fs::path(out_dir) / "partition.json").string();
  {
    std::ofstream os(summary.partition_path, std::ios::binary);
    if (!os) throw IoError("cannot open " + summary.partition_path);
    os << partition_to_json(partition, params, mode).dump(2) << '\n';
  }

  AdamOptimizer optim(params);
  const std::size_t b = cfg.finetune.batch_size;
  const std::size_t steps_per_epoch = train.size() / b;
  if (steps_per_epoch == 0) {
    throw InvalidConfig("fine-tune corpus cannot fill a batch of " + std::to_string(b));
  }
  const Schedule sched = Schedule::linear_warmup(
      cfg.finetune.lr, cfg.finetune.epochs * steps_per_epoch, cfg.train.warmup_frac);
  const Rng data_root = Rng(seed).derive(kDataStream + 1);
  BatchOptions batch_opt;
  batch_opt.kind = BatchKind::FinetuneRetrieval;
  const EncodeOptions encode_opt{mode == FinetuneMode::Adapter2};

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.finetune.epochs; ++epoch) {
    const std::vector<std::size_t> order =
        shuffled_indices(train.size(), data_root.derive(0x500000ULL + epoch));
    for (std::size_t bi = 0; bi < steps_per_epoch; ++bi) {
      const std::uint64_t step_stream = (epoch * steps_per_epoch + bi) * 8ULL;
      auto attempt = [&](std::size_t retry) {
        Rng rng = data_root.derive(step_stream + retry);
        std::vector<std::size_t> chosen(order.begin() + bi * b,
                                        order.begin() + (bi + 1) * b);
        Batch batch = make_batch(train, chosen, rng, batch_opt);

        Tape tape;
        BoundParams bound(tape, params);
        EncoderOutputs enc = model_forward(tape, batch, bound, cfg.model, encode_opt);
        Var logits = mode == FinetuneMode::Adapter1
                         ? adapter1_task_logits(tape, batch, bound, cfg.model, enc)
                         : cls_task_logits(tape, bound, enc.cls_states);
        Var task_ce = cross_entropy_mean(tape, logits, batch.match_labels);
        const double task_value = tape.value(task_ce)[0];
        double accuracy = 0.0;
        {
          const Tensor& z = tape.value(logits);
          std::size_t hits = 0;
          for (std::size_t r = 0; r < batch.size; ++r) {
            const Index pred = z.at(r, 1) > z.at(r, 0) ? 1 : 0;
            if (pred == batch.match_labels[r]) ++hits;
          }
          accuracy = static_cast<double>(hits) / static_cast<double>(batch.size);
        }

        Var total = task_ce;
        double pwcl_value = 0.0;
        if (mode != FinetuneMode::Adapter1) {
          // keep refining the pooled alignment on the matched sub-batch
          std::vector<Index> matched;
          for (std::size_t r = 0; r < batch.size; ++r) {
            if (batch.match_labels[r] == 1) matched.push_back(static_cast<Index>(r));
          }
          if (matched.size() >= 2) {
            Var e_m = gather_rows(tape, enc.e_prime, matched);
            Var f_m = gather_rows(tape, enc.f_prime, matched);
            Var pw = pwcl_loss(tape, e_m, f_m);
            pwcl_value = tape.value(pw)[0];
            total = add(tape, total, pw);
          }
        }

        tape.backward(total);
        ++step;
        const double lr = sched.at(step);
        optim.step(params, lr);
        metrics.finetune_step_record(step, epoch, lr, task_value, accuracy, pwcl_value,
                                     tape.value(total)[0]);
      };
      run_step_with_retry(attempt, 3);
    }

    if ((epoch + 1) % cfg.train.eval_every == 0 || epoch + 1 == cfg.finetune.epochs) {
      summary.final_eval = eval_retrieval(params, cfg.model, eval_split,
                                          eval_split.size(),
                                          eval_options_for_mode(mode, b));
      metrics.eval_record(step, epoch, summary.final_eval);
      log_info("finetune epoch " + std::to_string(epoch + 1) + " r@1=" +
               std::to_string(summary.final_eval.recall1));
    }
    metrics.flush();
  }
  summary.steps = step;

  const std::string ckpt = (fs::path(out_dir) / "checkpoint.cavl").string();
  save_checkpoint(params, &optim, cfg, seed,
                  nlohmann::json{{"stage", "finetune"},
                                 {"finetune_mode", finetune_mode_name(mode)},
                                 {"task", task.name}},
                  ckpt);
  summary.checkpoint_path = ckpt;
  log_close_file();
  return summary;
}

}  // namespace cavl

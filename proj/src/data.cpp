#include "cavl/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "cavl/roi_io.hpp"

namespace cavl {

using nlohmann::json;

// Vocabulary -----------------------------------------------------------------

Vocabulary Vocabulary::synthetic(std::size_t vocab_size, const GeneratorConfig& gen) {
  Vocabulary v;
  v.classes_ = gen.classes;
  v.attributes_ = gen.attributes;
  v.buckets_ = gen.buckets;
  const std::size_t content = gen.classes * kClassTokens + gen.attributes * gen.buckets;
  if (vocab_size < kNumSpecials + content + 8) {
    throw InvalidConfig("vocab_size " + std::to_string(vocab_size) +
                        " too small for the synthetic layout");
  }
  v.id_to_subword_.reserve(vocab_size);
  v.id_to_subword_ = {"[PAD]", "[CLS]", "[SEP]", "[MASK]"};
  for (std::size_t c = 0; c < gen.classes; ++c) {
    for (std::size_t j = 0; j < kClassTokens; ++j) {
      v.id_to_subword_.push_back("cls" + std::to_string(c) + "_" + std::to_string(j));
    }
  }
  for (std::size_t a = 0; a < gen.attributes; ++a) {
    for (std::size_t b = 0; b < gen.buckets; ++b) {
      v.id_to_subword_.push_back("attr" + std::to_string(a) + "_" + std::to_string(b));
    }
  }
  std::size_t filler = 0;
  while (v.id_to_subword_.size() < vocab_size) {
    v.id_to_subword_.push_back("w" + std::to_string(filler++));
  }
  for (std::size_t i = 0; i < v.id_to_subword_.size(); ++i) {
    v.subword_to_id_.emplace(v.id_to_subword_[i], static_cast<Index>(i));
  }
  return v;
}

const std::string& Vocabulary::subword(Index id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= size()) {
    throw IndexOutOfRange("vocabulary id " + std::to_string(id));
  }
  return id_to_subword_[static_cast<std::size_t>(id)];
}

Index Vocabulary::id_of(const std::string& subword) const {
  auto it = subword_to_id_.find(subword);
  if (it == subword_to_id_.end()) throw IndexOutOfRange("unknown subword " + subword);
  return it->second;
}

Index Vocabulary::class_token(std::size_t cls, std::size_t j) const {
  return static_cast<Index>(kNumSpecials + cls * kClassTokens + j % kClassTokens);
}

Index Vocabulary::attribute_token(std::size_t attr, std::size_t bucket) const {
  return static_cast<Index>(kNumSpecials + classes_ * kClassTokens + attr * buckets_ +
                            bucket);
}

Index Vocabulary::filler_token(std::size_t i) const {
  const std::size_t base = kNumSpecials + classes_ * kClassTokens + attributes_ * buckets_;
  return static_cast<Index>(base + i % filler_count());
}

std::size_t Vocabulary::filler_count() const {
  return size() - kNumSpecials - classes_ * kClassTokens - attributes_ * buckets_;
}

// Corpus ----------------------------------------------------------------------

void Corpus::rebuild_class_index() {
  by_class.assign(gen.classes, {});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    by_class[static_cast<std::size_t>(samples[i].latent_class)].push_back(i);
  }
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Finetune: return "finetune";
  }
  return "train";
}

namespace {

constexpr std::uint64_t kGeometryStream = 0x47454f4dULL;  // "GEOM"
constexpr std::uint64_t kSampleStreamBase = 0x53414d50ULL;

struct Geometry {
  std::vector<Tensor> class_centers;               // [classes] of [d_v]
  std::vector<std::vector<Tensor>> attr_offsets;   // [attributes][buckets] of [d_v]
};

Geometry make_geometry(std::uint64_t seed, const GeneratorConfig& gen,
                       const ModelConfig& model) {
  Rng rng = Rng(seed).derive(kGeometryStream);
  Geometry g;
  g.class_centers.reserve(gen.classes);
  for (std::size_t c = 0; c < gen.classes; ++c) {
    Tensor center(Shape{model.roi_feature_dim});
    for (std::size_t i = 0; i < center.numel(); ++i) center[i] = rng.normal();
    g.class_centers.push_back(std::move(center));
  }
  g.attr_offsets.resize(gen.attributes);
  for (std::size_t a = 0; a < gen.attributes; ++a) {
    for (std::size_t b = 0; b < gen.buckets; ++b) {
      Tensor off(Shape{model.roi_feature_dim});
      for (std::size_t i = 0; i < off.numel(); ++i) off[i] = rng.normal(0.0, 1.0);
      g.attr_offsets[a].push_back(std::move(off));
    }
  }
  return g;
}

}  // namespace

Corpus generate_synthetic_corpus(std::uint64_t seed, Split split, std::size_t n_samples,
                                 const GeneratorConfig& gen, const ModelConfig& model) {
  if (gen.classes < 2) throw InvalidConfig("synthetic corpus needs at least 2 classes");
  if (gen.tokens_per_half < gen.attributes + 1) {
    throw InvalidConfig("tokens_per_half must cover class and attribute slots");
  }
  Corpus corpus;
  corpus.gen = gen;
  corpus.vocab = Vocabulary::synthetic(model.vocab_size, gen);
  const Geometry geo = make_geometry(seed, gen, model);
  const Vocabulary& v = corpus.vocab;

  const Rng root(seed);
  corpus.samples.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    Rng rng = root.derive(kSampleStreamBase + static_cast<std::uint64_t>(split) * 0x10000000ULL + i);
    MultimodalSample s;
    s.id = static_cast<std::uint64_t>(split) * 0x10000000ULL + i;
    const std::size_t cls = i % gen.classes;  // round-robin keeps prefixes balanced
    s.latent_class = static_cast<Index>(cls);

    // Latent attributes shared by both modalities make alignment learnable
    // within a class, not just across classes.
    std::vector<std::size_t> z(gen.attributes);
    for (auto& b : z) b = rng.below(gen.buckets);

    auto any_filler = [&] { return v.filler_token(rng.below(v.filler_count())); };
    // Fillers come from a class-owned slice of the pool, so the whole token
    // template, not just the marked class tokens, identifies the class.
    const std::size_t fillers_per_class = v.filler_count() / gen.classes;
    auto filler = [&] {
      return v.filler_token(cls * fillers_per_class + rng.below(fillers_per_class));
    };
    auto with_noise = [&](Index id) {
      return rng.uniform() < gen.token_noise ? any_filler() : id;
    };
    // half 1: class token, attribute tokens, fillers
    s.tokens.push_back(with_noise(v.class_token(cls, rng.below(Vocabulary::kClassTokens))));
    for (std::size_t a = 0; a < gen.attributes; ++a) {
      s.tokens.push_back(with_noise(v.attribute_token(a, z[a])));
    }
    while (s.tokens.size() < gen.tokens_per_half) s.tokens.push_back(with_noise(filler()));
    // half 2: attribute tokens re-stated, class token, fillers
    for (std::size_t a = 0; a < gen.attributes; ++a) {
      s.tokens.push_back(with_noise(v.attribute_token(a, z[a])));
    }
    s.tokens.push_back(with_noise(v.class_token(cls, rng.below(Vocabulary::kClassTokens))));
    while (s.tokens.size() < 2 * gen.tokens_per_half) s.tokens.push_back(with_noise(filler()));

    // ROIs: class center + attribute offsets + isotropic noise, one score per
    // ROI; rows are kept in descending score order like a detector would.
    const std::size_t k = gen.rois_per_sample, d = model.roi_feature_dim;
    std::vector<double> score_vals(k);
    for (auto& x : score_vals) x = 0.55 + 0.45 * rng.uniform();
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return score_vals[a] > score_vals[b];
    });
    Tensor rois(Shape{k, d});
    Tensor scores(Shape{k});
    std::vector<double> base(d);
    for (std::size_t c = 0; c < d; ++c) base[c] = geo.class_centers[cls][c];
    for (std::size_t a = 0; a < gen.attributes; ++a) {
      for (std::size_t c = 0; c < d; ++c) base[c] += geo.attr_offsets[a][z[a]][c];
    }
    std::vector<std::vector<double>> rows(k, std::vector<double>(d));
    for (std::size_t r = 0; r < k; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        rows[r][c] = base[c] + rng.normal(0.0, gen.roi_noise);
      }
    }
    for (std::size_t r = 0; r < k; ++r) {
      scores[r] = score_vals[order[r]];
      std::copy(rows[order[r]].begin(), rows[order[r]].end(),
                rois.values().data() + r * d);
    }
    s.rois = std::move(rois);
    s.roi_scores = std::move(scores);
    corpus.samples.push_back(std::move(s));
  }
  corpus.rebuild_class_index();
  return corpus;
}

// Masking ----------------------------------------------------------------------

MaskingPlan apply_masking(std::vector<Index>& tokens, const Vocabulary& vocab, Rng& rng,
                          double rate, std::array<double, 3> split) {
  std::vector<std::size_t> maskable;
  maskable.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!vocab.is_special(tokens[i])) maskable.push_back(i);
  }
  if (maskable.empty()) {
    throw NoMaskablePositions("apply_masking: sequence holds only special tokens");
  }

  MaskingPlan plan;
  for (std::size_t pos : maskable) {
    if (rng.uniform() < rate) plan.positions.push_back(pos);
  }
  if (plan.positions.empty()) {
    plan.positions.push_back(maskable[rng.below(maskable.size())]);
  }

  const std::size_t vocab_size = vocab.size();
  for (std::size_t pos : plan.positions) {
    plan.targets.push_back(tokens[pos]);
    const double roll = rng.uniform();
    if (roll < split[0]) {
      plan.replacement.push_back(Replacement::Mask);
      tokens[pos] = Vocabulary::kMask;
    } else if (roll < split[0] + split[1]) {
      plan.replacement.push_back(Replacement::Random);
      tokens[pos] = static_cast<Index>(
          Vocabulary::kNumSpecials +
          rng.below(vocab_size - Vocabulary::kNumSpecials));
    } else {
      plan.replacement.push_back(Replacement::Keep);
    }
  }
  return plan;
}

// Batching -----------------------------------------------------------------------

namespace {

std::size_t pick_other_class_sample(const Corpus& corpus, Index cls, Rng& rng) {
  const std::size_t own = corpus.by_class[static_cast<std::size_t>(cls)].size();
  const std::size_t other = corpus.size() - own;
  if (other == 0) {
    throw Error("caption mismatch sampling needs samples outside class " +
                std::to_string(cls));
  }
  std::size_t pick = rng.below(other);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus.samples[i].latent_class == cls) continue;
    if (pick == 0) return i;
    --pick;
  }
  return corpus.size() - 1;  // unreachable
}

std::size_t pick_other_sample(std::size_t n, std::size_t self, Rng& rng) {
  std::size_t pick = rng.below(n - 1);
  return pick >= self ? pick + 1 : pick;
}

}  // namespace

namespace {

struct Slot {
  std::vector<Index> tokens;
  const MultimodalSample* image;
  std::uint64_t text_source;
  Index nsp = 1, match = 1;
  MaskingPlan plan;
};

Batch assemble_batch(std::span<const Slot> slots);

}  // namespace

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices, Rng& rng,
                 const BatchOptions& opt) {
  const std::size_t b = indices.size();
  if (b < 2) {
    throw BatchTooSmall("make_batch: pair-wise objectives need at least 2 samples");
  }
  std::vector<Slot> slots(b);

  for (std::size_t i = 0; i < b; ++i) {
    const MultimodalSample& src = corpus.samples[indices[i]];
    Slot& slot = slots[i];
    slot.image = &src;
    slot.tokens = src.tokens;
    slot.text_source = src.id;

    if (opt.kind == BatchKind::Pretrain) {
      if (rng.uniform() < 0.5) {
        // caption drawn from a different latent class
        const std::size_t donor = pick_other_class_sample(corpus, src.latent_class, rng);
        slot.tokens = corpus.samples[donor].tokens;
        slot.text_source = corpus.samples[donor].id;
        slot.match = 0;
      }
      if (rng.uniform() < 0.5) {
        // splice the second half from another sample
        const std::size_t donor = pick_other_sample(corpus.size(), indices[i], rng);
        const auto& dt = corpus.samples[donor].tokens;
        const std::size_t half = slot.tokens.size() / 2;
        const std::size_t dhalf = dt.size() / 2;
        slot.tokens.resize(half);
        slot.tokens.insert(slot.tokens.end(), dt.begin() + dhalf, dt.end());
        slot.nsp = 0;
      }
      slot.plan = apply_masking(slot.tokens, corpus.vocab, rng, opt.mask_rate,
                                opt.mask_split);
    } else if (opt.kind == BatchKind::FinetuneRetrieval) {
      if (rng.uniform() < 0.5) {
        // negative pair from any other sample, same class allowed
        const std::size_t donor = pick_other_sample(corpus.size(), indices[i], rng);
        slot.tokens = corpus.samples[donor].tokens;
        slot.text_source = corpus.samples[donor].id;
        slot.match = 0;
      }
    }
  }
  return assemble_batch(slots);
}

Batch make_pair_batch(const Corpus& corpus, std::span<const std::size_t> text_indices,
                      std::span<const std::size_t> image_indices) {
  if (text_indices.size() != image_indices.size()) {
    throw LengthMismatch("make_pair_batch: one image per text required");
  }
  if (text_indices.size() < 2) {
    throw BatchTooSmall("make_pair_batch: needs at least 2 pairs");
  }
  std::vector<Slot> slots(text_indices.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const MultimodalSample& text = corpus.samples[text_indices[i]];
    const MultimodalSample& image = corpus.samples[image_indices[i]];
    slots[i].tokens = text.tokens;
    slots[i].text_source = text.id;
    slots[i].image = &image;
    slots[i].match = text_indices[i] == image_indices[i] ? 1 : 0;
  }
  return assemble_batch(slots);
}

namespace {

Batch assemble_batch(std::span<const Slot> slots) {
  const std::size_t b = slots.size();
  std::size_t max_tokens = 0, max_rois = 0;
  for (const Slot& s : slots) {
    max_tokens = std::max(max_tokens, s.tokens.size());
    max_rois = std::max(max_rois, s.image->rois.extent(0));
  }

  Batch out;
  out.size = b;
  out.text_width = max_tokens + 2;  // [CLS] ... [SEP]
  out.vis_width = max_rois;
  out.seq = out.text_width + out.vis_width;
  const std::size_t tw = out.text_width, vw = out.vis_width, seq = out.seq;
  const std::size_t d_v = slots[0].image->rois.extent(1);

  out.token_ids.assign(b * tw, Vocabulary::kPad);
  out.token_segments.assign(b * tw, 0);
  out.token_positions.assign(b * tw, 0);
  out.roi_features = Tensor(Shape{b * vw, d_v});
  out.vis_segments.assign(b * vw, 1);
  out.vis_positions.assign(b * vw, 0);
  out.real.assign(b * seq, 0);
  out.text_content.assign(b * seq, 0);
  out.vis_content.assign(b * seq, 0);

  for (std::size_t i = 0; i < b; ++i) {
    const Slot& slot = slots[i];
    const std::size_t n = slot.tokens.size();
    out.token_ids[i * tw] = Vocabulary::kCls;
    out.token_positions[i * tw] = 0;
    for (std::size_t p = 0; p < n; ++p) {
      out.token_ids[i * tw + 1 + p] = slot.tokens[p];
      out.token_positions[i * tw + 1 + p] = static_cast<Index>(1 + p);
    }
    out.token_ids[i * tw + 1 + n] = Vocabulary::kSep;
    out.token_positions[i * tw + 1 + n] = static_cast<Index>(1 + n);

    const std::size_t k = slot.image->rois.extent(0);
    for (std::size_t r = 0; r < k; ++r) {
      const double* src = slot.image->rois.values().data() + r * d_v;
      std::copy(src, src + d_v, out.roi_features.values().data() + (i * vw + r) * d_v);
      out.vis_positions[i * vw + r] = static_cast<Index>(r);
    }

    for (std::size_t p = 0; p < n + 2; ++p) out.real[i * seq + p] = 1;
    for (std::size_t p = 0; p < n; ++p) out.text_content[i * seq + 1 + p] = 1;
    for (std::size_t r = 0; r < k; ++r) {
      out.real[i * seq + tw + r] = 1;
      out.vis_content[i * seq + tw + r] = 1;
    }

    for (std::size_t m = 0; m < slot.plan.positions.size(); ++m) {
      out.masked_rows.push_back(i * seq + 1 + slot.plan.positions[m]);
      out.mlm_targets.push_back(slot.plan.targets[m]);
    }
    out.nsp_labels.push_back(slot.nsp);
    out.match_labels.push_back(slot.match);
    out.text_source.push_back(slot.text_source);
    out.image_source.push_back(slot.image->id);
    out.image_class.push_back(slot.image->latent_class);
  }
  return out;
}

}  // namespace

// Corpus files ----------------------------------------------------------------------

void save_corpus(const Corpus& corpus, const std::string& dir, const std::string& split) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string roi_path = (fs::path(dir) / (split + ".rois")).string();
  std::vector<RoiRecord> records;
  records.reserve(corpus.size());
  for (const auto& s : corpus.samples) {
    records.push_back(RoiRecord{s.roi_scores, s.rois});
  }
  const std::vector<std::uint64_t> offsets = write_roi_file(roi_path, records);

  const std::string jsonl_path = (fs::path(dir) / (split + ".jsonl")).string();
  std::ofstream os(jsonl_path, std::ios::binary);
  if (!os) throw IoError("cannot open " + jsonl_path + " for writing");
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& s = corpus.samples[i];
    json line;
    line["id"] = s.id;
    line["latent_class"] = s.latent_class;
    line["pair_file_offset"] = offsets[i];
    line["tokens"] = s.tokens;
    os << line.dump() << '\n';
  }
  if (!os) throw IoError("write failed for " + jsonl_path);
}

Corpus load_corpus(const std::string& dir, const std::string& split,
                   std::size_t vocab_size, const GeneratorConfig& gen,
                   double score_threshold, std::size_t max_rois) {
  namespace fs = std::filesystem;
  const std::string jsonl_path = (fs::path(dir) / (split + ".jsonl")).string();
  const std::string roi_path = (fs::path(dir) / (split + ".rois")).string();
  std::ifstream is(jsonl_path, std::ios::binary);
  if (!is) throw IoError("cannot open " + jsonl_path);

  Corpus corpus;
  corpus.gen = gen;
  corpus.vocab = Vocabulary::synthetic(vocab_size, gen);

  std::vector<RoiRecord> records = read_roi_file(roi_path);
  std::string line;
  std::size_t i = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw MalformedFile(jsonl_path + ": bad JSON line: " + e.what());
    }
    if (i >= records.size()) {
      throw MalformedFile(jsonl_path + ": more lines than ROI records");
    }
    MultimodalSample s;
    s.id = j.at("id").get<std::uint64_t>();
    s.latent_class = j.at("latent_class").get<Index>();
    s.tokens = j.at("tokens").get<std::vector<Index>>();
    for (Index tok : s.tokens) {
      if (tok < 0 || static_cast<std::size_t>(tok) >= vocab_size) {
        throw MalformedFile(jsonl_path + ": token id outside vocabulary");
      }
    }
    IngestedRois ing =
        ingest_roi_features(records[i].features, records[i].scores, score_threshold,
                            max_rois);
    s.rois = std::move(ing.features);
    s.roi_scores = std::move(ing.scores);
    corpus.samples.push_back(std::move(s));
    ++i;
  }
  if (i != records.size()) {
    throw MalformedFile(jsonl_path + ": fewer lines than ROI records");
  }
  std::size_t max_class = 0;
  for (const auto& s : corpus.samples) {
    max_class = std::max(max_class, static_cast<std::size_t>(s.latent_class));
  }
  corpus.gen.classes = std::max(corpus.gen.classes, max_class + 1);
  corpus.rebuild_class_index();
  return corpus;
}

}  // namespace cavl

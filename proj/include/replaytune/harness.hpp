#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "replaytune/corpus.hpp"
#include "replaytune/errors.hpp"
#include "replaytune/loss.hpp"
#include "replaytune/metrics.hpp"
#include "replaytune/model.hpp"
#include "replaytune/optim.hpp"
#include "replaytune/replay.hpp"
#include "replaytune/rng.hpp"
#include "replaytune/topk.hpp"

namespace replaytune {

struct PositionStrategy {
  PositionStrategyKind kind = PositionStrategyKind::all;
  double fraction = 1.0;  // random/bucket: share of candidate positions kept
  int n_buckets = 5;
  enum class Confidence { gold_prob, max_prob };
  Confidence confidence = Confidence::gold_prob;

  void validate() const {
    if ((kind == PositionStrategyKind::random || kind == PositionStrategyKind::bucket) &&
        !(fraction > 0.0 && fraction <= 1.0))
      throw ConfigError("strategy: fraction must be in (0,1]");
    if (kind == PositionStrategyKind::bucket && n_buckets < 2)
      throw ConfigError("strategy: n_buckets must be >= 2");
  }
};

struct TrainConfig {
  uint64_t seed = 42;
  int batch_size = 32;
  int epochs = 1;
};

// A predictable position: token `pos` of sequence `seq` predicted from the
// context_len tokens before it.
struct PositionRef {
  uint32_t seq = 0;
  uint32_t pos = 0;
};

inline std::vector<PositionRef> predictable_positions(const Corpus& corpus,
                                                      int context_len) {
  std::vector<PositionRef> refs;
  auto w = static_cast<uint32_t>(context_len);
  for (uint32_t s = 0; s < corpus.size(); ++s) {
    auto len = static_cast<uint32_t>(corpus[s].size());
    for (uint32_t t = w; t < len; ++t) refs.push_back({s, t});
  }
  return refs;
}

struct EvalResult {
  double mean_nats = 0.0;
  double perplexity = 1.0;
  uint64_t positions = 0;
};

inline EvalResult evaluate(const TinyLM& model, const Corpus& corpus) {
  auto refs = predictable_positions(corpus, model.config().context_len);
  if (refs.empty()) throw ConfigError("evaluate: corpus has no predictable positions");
  auto w = static_cast<size_t>(model.config().context_len);
  double total = 0.0;
  for (const auto& ref : refs) {
    const auto& seq = corpus[ref.seq];
    std::span<const TokenId> ctx(seq.data() + ref.pos - w, w);
    Vec z = model.forward_logits(ctx);
    total += log_sum_exp(z) - z[static_cast<size_t>(seq[ref.pos])];
  }
  EvalResult r;
  r.positions = refs.size();
  r.mean_nats = total / static_cast<double>(refs.size());
  r.perplexity = std::exp(r.mean_nats);
  return r;
}

struct TrainOutput {
  TinyLM model;
  RunMetrics metrics;
};

namespace detail {

// Shared epoch/shuffle/batch/optimizer skeleton. Full SFT and Stage-1 replay
// differ only in the per-item loss; keeping one skeleton makes the S=V
// pipeline-equivalence oracle a genuine statement about the loss paths.
//
// ItemEval: (item_index, model, grad_accumulator) -> {loss_nats, softmax_units}
template <class ItemEval>
TrainOutput run_training(const TinyLM& base, size_t n_items, Optimizer& opt,
                         const TrainConfig& cfg, ItemEval&& eval_item) {
  if (n_items == 0) throw ConfigError("training: no items");
  if (cfg.batch_size < 1) throw ConfigError("training: batch_size must be >= 1");

  TrainOutput out{base, {}};
  TinyLM& model = out.model;
  RunMetrics& metrics = out.metrics;

  Rng rng(cfg.seed);
  std::vector<uint32_t> order(n_items);
  std::iota(order.begin(), order.end(), 0);

  std::vector<Vec> grad = model.zero_like();
  uint64_t step = 0;
  auto t0 = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    size_t i = 0;
    while (i < n_items) {
      size_t batch = std::min(static_cast<size_t>(cfg.batch_size), n_items - i);
      for (Vec& g : grad) std::fill(g.begin(), g.end(), 0.0);
      double batch_loss = 0.0;
      uint64_t units = 0;
      for (size_t b = 0; b < batch; ++b) {
        auto [loss, u] = eval_item(order[i + b], model, grad);
        batch_loss += loss;
        units += u;
      }
      double scale = 1.0 / static_cast<double>(batch);
      batch_loss *= scale;
      for (Vec& g : grad)
        for (double& x : g) x *= scale;

      if (!std::isfinite(batch_loss))
        throw NumericError("training aborted: non-finite loss at step " +
                           std::to_string(step + 1) + " (epoch " +
                           std::to_string(epoch) + ")");

      double gn = 0.0;
      for (const Vec& g : grad)
        for (double x : g) gn += x * x;
      gn = std::sqrt(gn);

      StepInfo info = opt.apply(model.tensors(), grad);
      ++step;

      metrics.rows.push_back({step, batch_loss, gn, info.any_clipped, units});
      metrics.softmax_units_total += units;
      metrics.tokens_processed += batch;
      metrics.max_abs_update = std::max(metrics.max_abs_update, info.max_abs_update);
      if (info.any_clipped) ++metrics.clipped_steps;
      i += batch;
    }
  }

  auto t1 = std::chrono::steady_clock::now();
  metrics.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
  metrics.tokens_per_sec =
      metrics.wall_seconds > 0.0 ? metrics.tokens_processed / metrics.wall_seconds : 0.0;
  metrics.final_loss = metrics.rows.empty() ? 0.0 : metrics.rows.back().loss;
  auto lt = metrics.loss_trace();
  auto gt = metrics.grad_norm_trace();
  metrics.stability = stability_metrics(lt, gt);
  metrics.rel_l2_distance = param_distance(model, base);
  return out;
}

inline std::span<const TokenId> context_of(const Corpus& corpus, uint32_t seq, uint32_t pos,
                                           int context_len) {
  const auto& s = corpus[seq];
  auto w = static_cast<size_t>(context_len);
  return std::span<const TokenId>(s.data() + pos - w, w);
}

}  // namespace detail

// Full-vocabulary cross-entropy fine-tuning over every predictable position.
inline TrainOutput train_full_sft(const TinyLM& base, const Corpus& corpus,
                                  Optimizer& opt, const TrainConfig& cfg) {
  auto refs = predictable_positions(corpus, base.config().context_len);
  auto v = static_cast<uint64_t>(base.config().vocab_size);
  int w = base.config().context_len;
  ForwardCache cache;
  auto out = detail::run_training(
      base, refs.size(), opt, cfg,
      [&](uint32_t idx, const TinyLM& model, std::vector<Vec>& grad) {
        const auto& ref = refs[idx];
        auto ctx = detail::context_of(corpus, ref.seq, ref.pos, w);
        TokenId gold = corpus[ref.seq][ref.pos];
        Vec z = model.forward_logits(ctx, cache);
        LossResult lr = full_ce(z, gold);
        model.backward_acc(ctx, cache, lr.grad_logits, grad);
        return std::pair<double, uint64_t>(lr.value, v);
      });
  out.metrics.r_ratio = 1.0;
  return out;
}

// Pretraining is full SFT from a fresh seeded initialization.
inline TrainOutput pretrain(const TinyLMConfig& model_cfg, uint64_t init_seed,
                            const Corpus& combined, Optimizer& opt,
                            const TrainConfig& cfg) {
  TinyLM lm = TinyLM::init(model_cfg, init_seed);
  return train_full_sft(lm, combined, opt, cfg);
}

struct CollectOutput {
  ReplayStats stats;
  uint64_t written = 0;
};

// Stage 0: run the base model over the selected positions, record candidate
// sets (and optionally their logits), and bind the file to the model
// fingerprint. The bucket strategy buckets positions by gold-token
// confidence quantiles and samples each bucket equally.
inline CollectOutput collect_stage0(const TinyLM& base, const Corpus& corpus,
                                    const SelectorConfig& sel,
                                    const PositionStrategy& strategy,
                                    const std::string& out_path, uint64_t seed) {
  sel.validate();
  strategy.validate();
  int w = base.config().context_len;
  auto all_refs = predictable_positions(corpus, w);
  Rng rng(seed);

  std::vector<PositionRef> selected;
  switch (strategy.kind) {
    case PositionStrategyKind::all:
      selected = all_refs;
      break;
    case PositionStrategyKind::random: {
      auto take = static_cast<size_t>(
          std::llround(strategy.fraction * static_cast<double>(all_refs.size())));
      take = std::min(take, all_refs.size());
      std::vector<uint32_t> idx(all_refs.size());
      std::iota(idx.begin(), idx.end(), 0);
      rng.shuffle(idx);
      for (size_t i = 0; i < take; ++i) selected.push_back(all_refs[idx[i]]);
      break;
    }
    case PositionStrategyKind::last_token: {
      for (uint32_t s = 0; s < corpus.size(); ++s) {
        auto len = static_cast<uint32_t>(corpus[s].size());
        if (len > static_cast<uint32_t>(w)) selected.push_back({s, len - 1});
      }
      break;
    }
    case PositionStrategyKind::bucket: {
      // First pass: confidence of every candidate position.
      std::vector<double> conf(all_refs.size());
      for (size_t i = 0; i < all_refs.size(); ++i) {
        const auto& ref = all_refs[i];
        auto ctx = detail::context_of(corpus, ref.seq, ref.pos, w);
        ProbVec p = softmax(base.forward_logits(ctx));
        if (strategy.confidence == PositionStrategy::Confidence::gold_prob)
          conf[i] = p[static_cast<size_t>(corpus[ref.seq][ref.pos])];
        else
          conf[i] = *std::max_element(p.values().begin(), p.values().end());
      }
      std::vector<uint32_t> idx(all_refs.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::sort(idx.begin(), idx.end(), [&](uint32_t a, uint32_t b) {
        if (conf[a] != conf[b]) return conf[a] < conf[b];
        return a < b;
      });
      size_t n = idx.size();
      auto nb = static_cast<size_t>(strategy.n_buckets);
      size_t per_bucket_take = static_cast<size_t>(std::llround(
          strategy.fraction * static_cast<double>(n) / static_cast<double>(nb)));
      size_t lo = 0;
      for (size_t b = 0; b < nb && lo < n; ++b) {
        size_t size = n / nb + (b < n % nb ? 1 : 0);
        std::vector<uint32_t> bucket(idx.begin() + lo, idx.begin() + lo + size);
        lo += size;
        rng.shuffle(bucket);
        size_t take = std::min(per_bucket_take, bucket.size());
        for (size_t i = 0; i < take; ++i) selected.push_back(all_refs[bucket[i]]);
      }
      break;
    }
  }
  std::sort(selected.begin(), selected.end(), [](const PositionRef& a, const PositionRef& b) {
    if (a.seq != b.seq) return a.seq < b.seq;
    return a.pos < b.pos;
  });

  std::vector<ReplayRecord> records;
  records.reserve(selected.size());
  double rho_sum = 0.0;
  uint64_t appended = 0;
  for (const auto& ref : selected) {
    auto ctx = detail::context_of(corpus, ref.seq, ref.pos, w);
    Vec z = base.forward_logits(ctx);
    TokenId gold = corpus[ref.seq][ref.pos];
    CandidateSet s = select(z, gold, sel);
    rho_sum += outside_mass(softmax(z), s);
    if (s.gold_appended) ++appended;

    ReplayRecord rec;
    rec.seq_id = ref.seq;
    rec.pos = ref.pos;
    rec.gold_id = gold;
    rec.candidates = s.token_ids;
    if (sel.store_logits) {
      std::vector<float> zl;
      zl.reserve(s.token_ids.size());
      for (TokenId id : s.token_ids) zl.push_back(static_cast<float>(z[static_cast<size_t>(id)]));
      rec.logits = std::move(zl);
    }
    records.push_back(std::move(rec));
  }

  ReplayFileHeader header;
  header.vocab_size = base.config().vocab_size;
  header.tau = sel.tau;
  header.k_max = sel.k_max;
  header.position_strategy = strategy.kind;
  header.model_fingerprint = base.fingerprint();

  CollectOutput out;
  out.written = write_records(out_path, header, records);
  out.stats = summarize(out_path);
  if (!records.empty()) {
    out.stats.mean_rho = rho_sum / static_cast<double>(records.size());
    out.stats.gold_appended_rate =
        static_cast<double>(appended) / static_cast<double>(records.size());
  }
  return out;
}

// Stage 1: replay fine-tuning on the restricted, renormalized loss over the
// recorded candidate sets. The replay file must carry the fingerprint of the
// starting model unless the caller explicitly overrides.
inline TrainOutput train_stage1(const TinyLM& base, const Corpus& corpus,
                                const std::string& replay_path, Optimizer& opt,
                                const TrainConfig& cfg,
                                bool override_fingerprint = false) {
  auto [header, records] = read_records(replay_path);
  if (header.vocab_size != base.config().vocab_size)
    throw ValidationError("replay file vocab_size does not match the model");
  if (!override_fingerprint && header.model_fingerprint != base.fingerprint())
    throw FingerprintMismatch(
        "replay file was collected from a different model (fingerprint " +
        std::to_string(header.model_fingerprint) + " vs " +
        std::to_string(base.fingerprint()) + "); pass the explicit override to proceed");

  int w = base.config().context_len;
  std::vector<CandidateSet> sets(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    if (rec.seq_id >= corpus.size())
      throw ValidationError("replay record " + std::to_string(i) + ": sequence out of range");
    const auto& seq = corpus[rec.seq_id];
    if (rec.pos >= seq.size() || rec.pos < static_cast<uint32_t>(w))
      throw ValidationError("replay record " + std::to_string(i) + ": position out of range");
    if (seq[rec.pos] != rec.gold_id)
      throw ValidationError("replay record " + std::to_string(i) +
                            ": gold token disagrees with the corpus");
    sets[i].token_ids = rec.candidates;
    sets[i].gold_id = rec.gold_id;
  }

  ForwardCache cache;
  auto out = detail::run_training(
      base, records.size(), opt, cfg,
      [&](uint32_t idx, const TinyLM& model, std::vector<Vec>& grad) {
        const auto& rec = records[idx];
        auto ctx = detail::context_of(corpus, static_cast<uint32_t>(rec.seq_id), rec.pos, w);
        Vec z = model.forward_logits(ctx, cache);
        LossResult lr = restricted_ce(z, sets[idx], rec.gold_id);
        model.backward_acc(ctx, cache, lr.grad_logits, grad);
        return std::pair<double, uint64_t>(lr.value, sets[idx].token_ids.size());
      });

  double mean_set = 0.0;
  for (const auto& s : sets) mean_set += static_cast<double>(s.token_ids.size());
  mean_set /= static_cast<double>(sets.size());
  out.metrics.r_ratio = mean_set / static_cast<double>(base.config().vocab_size);
  return out;
}

}  // namespace replaytune

#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "replaytune/corpus.hpp"
#include "replaytune/errors.hpp"
#include "replaytune/harness.hpp"
#include "replaytune/model.hpp"
#include "replaytune/optim.hpp"
#include "replaytune/topk.hpp"

namespace replaytune {

namespace detail {

inline void expect_keys(const nlohmann::json& j, const std::string& where,
                        std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known = known || it.key() == k;
    if (!known) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

}  // namespace detail

struct OptimizerSettings {
  std::string name = "moclip";  // moclip | adamw | tam | mofo
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;               // adamw/tam/mofo only; moclip has none
  double delta_max_deg = 45.0;     // moclip
  std::string clip_scope = "per_tensor";
  std::string moment_source = "clipped";
  std::string clip_mode = "rotate_preserve_norm";
  double mofo_fraction = 0.2;

  static OptimizerSettings from_json(const nlohmann::json& j) {
    detail::expect_keys(j, "optimizer",
                        {"name", "alpha", "beta1", "beta2", "weight_decay", "eps",
                         "delta_max_deg", "clip_scope", "moment_source", "clip_mode",
                         "mofo_fraction"});
    OptimizerSettings s;
    s.name = detail::get_or<std::string>(j, "name", s.name);
    s.alpha = detail::get_or<double>(j, "alpha", s.alpha);
    s.beta1 = detail::get_or<double>(j, "beta1", s.beta1);
    s.beta2 = detail::get_or<double>(j, "beta2", s.beta2);
    s.weight_decay = detail::get_or<double>(j, "weight_decay", s.weight_decay);
    s.eps = detail::get_or<double>(j, "eps", s.eps);
    s.delta_max_deg = detail::get_or<double>(j, "delta_max_deg", s.delta_max_deg);
    s.clip_scope = detail::get_or<std::string>(j, "clip_scope", s.clip_scope);
    s.moment_source = detail::get_or<std::string>(j, "moment_source", s.moment_source);
    s.clip_mode = detail::get_or<std::string>(j, "clip_mode", s.clip_mode);
    s.mofo_fraction = detail::get_or<double>(j, "mofo_fraction", s.mofo_fraction);
    return s;
  }

  nlohmann::ordered_json to_json() const {
    return {{"name", name},
            {"alpha", alpha},
            {"beta1", beta1},
            {"beta2", beta2},
            {"weight_decay", weight_decay},
            {"eps", eps},
            {"delta_max_deg", delta_max_deg},
            {"clip_scope", clip_scope},
            {"moment_source", moment_source},
            {"clip_mode", clip_mode},
            {"mofo_fraction", mofo_fraction}};
  }

  std::unique_ptr<Optimizer> build() const {
    AdamWConfig aw{alpha, beta1, beta2, eps, weight_decay};
    if (name == "adamw") return std::make_unique<AdamWOptimizer>(aw);
    if (name == "tam") {
      TamConfig tc{aw, parse_scope()};
      return std::make_unique<TamOptimizer>(tc);
    }
    if (name == "mofo") {
      MofoConfig mc{aw, mofo_fraction};
      return std::make_unique<MofoOptimizer>(mc);
    }
    if (name == "moclip") {
      MoClipConfig mc;
      mc.alpha = alpha;
      mc.beta1 = beta1;
      mc.beta2 = beta2;
      mc.weight_decay = weight_decay;
      mc.delta_max = delta_max_deg * std::numbers::pi / 180.0;
      mc.clip_scope = parse_scope();
      if (moment_source == "clipped")
        mc.moment_source = MomentSource::clipped;
      else if (moment_source == "raw")
        mc.moment_source = MomentSource::raw;
      else
        throw ConfigError("optimizer: unknown moment_source '" + moment_source + "'");
      if (clip_mode == "rotate_preserve_norm")
        mc.clip_mode = ClipMode::rotate_preserve_norm;
      else if (clip_mode == "shrink_perpendicular")
        mc.clip_mode = ClipMode::shrink_perpendicular;
      else
        throw ConfigError("optimizer: unknown clip_mode '" + clip_mode + "'");
      return std::make_unique<MoClipOptimizer>(mc);
    }
    throw ConfigError("optimizer: unknown name '" + name + "'");
  }

 private:
  ClipScope parse_scope() const {
    if (clip_scope == "per_tensor") return ClipScope::per_tensor;
    if (clip_scope == "global") return ClipScope::global;
    throw ConfigError("optimizer: unknown clip_scope '" + clip_scope + "'");
  }
};

struct CorpusSettings {
  int n_sequences = 600;
  int seq_len = 24;
  double val_fraction = 0.2;
  uint64_t split_seed = 99;
  uint64_t seed_a = 7;
  uint64_t seed_b = 11;
  std::vector<int> strides = {1, 3, 5, 7};
  double noise_rate = 0.05;
  // Domain A lives on [0, arith_modulus) and domain B's fillers on
  // [filler_base, vocab); the disjoint support is what a restricted replay
  // can protect.
  int arith_modulus = 32;
  int bracket_pairs = 4;
  int bracket_max_depth = 4;
  int filler_base = 32;

  static CorpusSettings from_json(const nlohmann::json& j) {
    detail::expect_keys(j, "corpus",
                        {"n_sequences", "seq_len", "val_fraction", "split_seed", "seed_a",
                         "seed_b", "strides", "noise_rate", "arith_modulus",
                         "bracket_pairs", "bracket_max_depth", "filler_base"});
    CorpusSettings s;
    s.n_sequences = detail::get_or<int>(j, "n_sequences", s.n_sequences);
    s.seq_len = detail::get_or<int>(j, "seq_len", s.seq_len);
    s.val_fraction = detail::get_or<double>(j, "val_fraction", s.val_fraction);
    s.split_seed = detail::get_or<uint64_t>(j, "split_seed", s.split_seed);
    s.seed_a = detail::get_or<uint64_t>(j, "seed_a", s.seed_a);
    s.seed_b = detail::get_or<uint64_t>(j, "seed_b", s.seed_b);
    s.strides = detail::get_or<std::vector<int>>(j, "strides", s.strides);
    s.noise_rate = detail::get_or<double>(j, "noise_rate", s.noise_rate);
    s.arith_modulus = detail::get_or<int>(j, "arith_modulus", s.arith_modulus);
    s.bracket_pairs = detail::get_or<int>(j, "bracket_pairs", s.bracket_pairs);
    s.bracket_max_depth = detail::get_or<int>(j, "bracket_max_depth", s.bracket_max_depth);
    s.filler_base = detail::get_or<int>(j, "filler_base", s.filler_base);
    if (!(s.val_fraction > 0.0 && s.val_fraction < 1.0))
      throw ConfigError("corpus: val_fraction must be in (0,1)");
    return s;
  }

  nlohmann::ordered_json to_json() const {
    return {{"n_sequences", n_sequences},
            {"seq_len", seq_len},
            {"val_fraction", val_fraction},
            {"split_seed", split_seed},
            {"seed_a", seed_a},
            {"seed_b", seed_b},
            {"strides", strides},
            {"noise_rate", noise_rate},
            {"arith_modulus", arith_modulus},
            {"bracket_pairs", bracket_pairs},
            {"bracket_max_depth", bracket_max_depth},
            {"filler_base", filler_base}};
  }
};

struct RunConfig {
  uint64_t seed = 42;
  uint64_t init_seed = 1234;
  TinyLMConfig model;
  CorpusSettings corpus;
  SelectorConfig selector;
  PositionStrategy strategy;
  OptimizerSettings optimizer;
  int batch_size = 32;
  int epochs = 2;
  int pretrain_epochs = 8;
  std::string data_dir = "data";

  static RunConfig from_json(const nlohmann::json& j) {
    detail::expect_keys(j, "config",
                        {"seed", "init_seed", "model", "corpus", "selector", "strategy",
                         "optimizer", "batch_size", "epochs", "pretrain_epochs",
                         "data_dir"});
    RunConfig c;
    c.seed = detail::get_or<uint64_t>(j, "seed", c.seed);
    c.init_seed = detail::get_or<uint64_t>(j, "init_seed", c.init_seed);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      detail::expect_keys(m, "model",
                          {"vocab_size", "context_len", "embed_dim", "hidden_dim",
                           "activation"});
      c.model.vocab_size = detail::get_or<int>(m, "vocab_size", c.model.vocab_size);
      c.model.context_len = detail::get_or<int>(m, "context_len", c.model.context_len);
      c.model.embed_dim = detail::get_or<int>(m, "embed_dim", c.model.embed_dim);
      c.model.hidden_dim = detail::get_or<int>(m, "hidden_dim", c.model.hidden_dim);
      c.model.activation = activation_from_name(
          detail::get_or<std::string>(m, "activation", activation_name(c.model.activation)));
      c.model.validate();
    }
    if (j.contains("corpus")) c.corpus = CorpusSettings::from_json(j.at("corpus"));
    if (j.contains("selector")) {
      const auto& s = j.at("selector");
      detail::expect_keys(s, "selector", {"tau", "k_max", "store_logits"});
      c.selector.tau = detail::get_or<double>(s, "tau", c.selector.tau);
      c.selector.k_max = detail::get_or<int>(s, "k_max", c.selector.k_max);
      c.selector.store_logits = detail::get_or<bool>(s, "store_logits", c.selector.store_logits);
      c.selector.validate();
    }
    if (j.contains("strategy")) {
      const auto& s = j.at("strategy");
      detail::expect_keys(s, "strategy", {"kind", "fraction", "n_buckets", "confidence"});
      c.strategy.kind = strategy_from_name(detail::get_or<std::string>(s, "kind", "all"));
      c.strategy.fraction = detail::get_or<double>(s, "fraction", c.strategy.fraction);
      c.strategy.n_buckets = detail::get_or<int>(s, "n_buckets", c.strategy.n_buckets);
      std::string conf = detail::get_or<std::string>(s, "confidence", "gold_prob");
      if (conf == "gold_prob")
        c.strategy.confidence = PositionStrategy::Confidence::gold_prob;
      else if (conf == "max_prob")
        c.strategy.confidence = PositionStrategy::Confidence::max_prob;
      else
        throw ConfigError("strategy: unknown confidence '" + conf + "'");
      c.strategy.validate();
    }
    if (j.contains("optimizer")) c.optimizer = OptimizerSettings::from_json(j.at("optimizer"));
    c.batch_size = detail::get_or<int>(j, "batch_size", c.batch_size);
    c.epochs = detail::get_or<int>(j, "epochs", c.epochs);
    c.pretrain_epochs = detail::get_or<int>(j, "pretrain_epochs", c.pretrain_epochs);
    c.data_dir = detail::get_or<std::string>(j, "data_dir", c.data_dir);
    if (c.batch_size < 1 || c.epochs < 1 || c.pretrain_epochs < 1)
      throw ConfigError("config: batch_size/epochs must be >= 1");
    return c;
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ": " + e.what());
    }
    return from_json(j);
  }

  // Fully-resolved echo; re-running from this document reproduces the run.
  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["init_seed"] = init_seed;
    j["model"] = model.to_json();
    j["corpus"] = corpus.to_json();
    j["selector"] = {{"tau", selector.tau},
                     {"k_max", selector.k_max},
                     {"store_logits", selector.store_logits}};
    j["strategy"] = {
        {"kind", strategy_name(strategy.kind)},
        {"fraction", strategy.fraction},
        {"n_buckets", strategy.n_buckets},
        {"confidence",
         strategy.confidence == PositionStrategy::Confidence::gold_prob ? "gold_prob"
                                                                        : "max_prob"}};
    j["optimizer"] = optimizer.to_json();
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["pretrain_epochs"] = pretrain_epochs;
    j["data_dir"] = data_dir;
    return j;
  }

  GrammarSpec grammar_a() const {
    GrammarSpec g;
    g.kind = GrammarKind::arithmetic;
    g.name = "arith";
    g.vocab_size = model.vocab_size;
    g.seed = corpus.seed_a;
    g.strides = corpus.strides;
    g.noise_rate = corpus.noise_rate;
    g.modulus = corpus.arith_modulus;
    return g;
  }

  GrammarSpec grammar_b() const {
    GrammarSpec g;
    g.kind = GrammarKind::bracket;
    g.name = "bracket";
    g.vocab_size = model.vocab_size;
    g.seed = corpus.seed_b;
    g.n_pairs = corpus.bracket_pairs;
    g.max_depth = corpus.bracket_max_depth;
    g.filler_base = corpus.filler_base;
    return g;
  }

  TrainConfig train_config() const { return {seed, batch_size, epochs}; }
  TrainConfig pretrain_config() const { return {seed, batch_size, pretrain_epochs}; }
};

}  // namespace replaytune

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "replaytune/errors.hpp"
#include "replaytune/numeric.hpp"
#include "replaytune/rng.hpp"
#include "replaytune/topk.hpp"

namespace replaytune {

enum class Activation { tanh_act, gelu };

inline std::string activation_name(Activation a) {
  return a == Activation::tanh_act ? "tanh" : "gelu";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "tanh") return Activation::tanh_act;
  if (s == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation: " + s);
}

// Fixed-context feed-forward language model: embedding concat -> one hidden
// layer -> logits. Small enough that every gradient below is hand-derived
// and checkable against finite differences.
struct TinyLMConfig {
  int vocab_size = 64;
  int context_len = 8;
  int embed_dim = 32;
  int hidden_dim = 128;
  Activation activation = Activation::tanh_act;

  void validate() const {
    if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
    if (context_len < 1 || embed_dim < 1 || hidden_dim < 1)
      throw ConfigError("model: dims must be >= 1");
  }

  size_t input_dim() const {
    return static_cast<size_t>(context_len) * static_cast<size_t>(embed_dim);
  }

  nlohmann::ordered_json to_json() const {
    return {{"vocab_size", vocab_size},
            {"context_len", context_len},
            {"embed_dim", embed_dim},
            {"hidden_dim", hidden_dim},
            {"activation", activation_name(activation)}};
  }

  static TinyLMConfig from_json(const nlohmann::json& j) {
    TinyLMConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.context_len = j.at("context_len").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.activation = activation_from_name(j.at("activation").get<std::string>());
    c.validate();
    return c;
  }
};

struct ForwardCache {
  Vec x;      // concatenated context embeddings
  Vec h_pre;  // pre-activation hidden
  Vec h;      // activated hidden
};

class TinyLM {
 public:
  // Tensor order is the declared (and serialized) order everywhere:
  // embeddings, hidden weights, hidden bias, output weights, output bias.
  enum TensorIndex { kEmbed = 0, kWh, kBh, kWout, kBout, kTensorCount };

  explicit TinyLM(TinyLMConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    size_t v = static_cast<size_t>(cfg_.vocab_size);
    size_t e = static_cast<size_t>(cfg_.embed_dim);
    size_t h = static_cast<size_t>(cfg_.hidden_dim);
    tensors_.resize(kTensorCount);
    tensors_[kEmbed].assign(v * e, 0.0);
    tensors_[kWh].assign(h * cfg_.input_dim(), 0.0);
    tensors_[kBh].assign(h, 0.0);
    tensors_[kWout].assign(v * h, 0.0);
    tensors_[kBout].assign(v, 0.0);
  }

  // Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, biases zero.
  // Draw order (embeddings, then hidden, then output weights) is part of the
  // reproducibility contract.
  static TinyLM init(TinyLMConfig cfg, uint64_t seed) {
    TinyLM lm(cfg);
    Rng rng(seed);
    auto fill = [&rng](Vec& t, size_t fan_in) {
      double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double& x : t) x = rng.uniform(-b, b);
    };
    fill(lm.tensors_[kEmbed], static_cast<size_t>(cfg.embed_dim));
    fill(lm.tensors_[kWh], cfg.input_dim());
    fill(lm.tensors_[kWout], static_cast<size_t>(cfg.hidden_dim));
    return lm;
  }

  const TinyLMConfig& config() const { return cfg_; }
  std::vector<Vec>& tensors() { return tensors_; }
  const std::vector<Vec>& tensors() const { return tensors_; }

  Vec forward_logits(std::span<const TokenId> context) const {
    ForwardCache cache;
    return forward_logits(context, cache);
  }

  Vec forward_logits(std::span<const TokenId> context, ForwardCache& cache) const {
    if (context.size() != static_cast<size_t>(cfg_.context_len))
      throw DimensionError("forward: context length mismatch");
    size_t e = static_cast<size_t>(cfg_.embed_dim);
    size_t h = static_cast<size_t>(cfg_.hidden_dim);
    size_t v = static_cast<size_t>(cfg_.vocab_size);

    cache.x.resize(cfg_.input_dim());
    for (size_t k = 0; k < context.size(); ++k) {
      TokenId tok = context[k];
      if (tok < 0 || static_cast<size_t>(tok) >= v)
        throw IndexError("forward: token out of range");
      const double* row = tensors_[kEmbed].data() + static_cast<size_t>(tok) * e;
      std::copy(row, row + e, cache.x.begin() + k * e);
    }

    cache.h_pre.resize(h);
    matvec(tensors_[kWh], h, cfg_.input_dim(), cache.x, cache.h_pre);
    for (size_t i = 0; i < h; ++i) cache.h_pre[i] += tensors_[kBh][i];

    cache.h.resize(h);
    for (size_t i = 0; i < h; ++i) cache.h[i] = activate(cache.h_pre[i]);

    Vec z(v);
    matvec(tensors_[kWout], v, h, cache.h, z);
    for (size_t i = 0; i < v; ++i) z[i] += tensors_[kBout][i];
    return z;
  }

  // Exact analytic gradients of <z, dz>, accumulated into acc (which must be
  // tensor-shaped). Accumulation keeps mini-batch loops allocation-free.
  void backward_acc(std::span<const TokenId> context, const ForwardCache& cache,
                    std::span<const double> dz, std::vector<Vec>& acc) const {
    size_t e = static_cast<size_t>(cfg_.embed_dim);
    size_t h = static_cast<size_t>(cfg_.hidden_dim);
    size_t v = static_cast<size_t>(cfg_.vocab_size);
    if (dz.size() != v) throw DimensionError("backward: dz length mismatch");
    if (acc.size() != tensors_.size()) throw DimensionError("backward: bad accumulator");

    axpy(1.0, dz, acc[kBout]);
    outer_acc(acc[kWout], dz, cache.h);

    Vec dh(h);
    matvec_transpose(tensors_[kWout], v, h, dz, dh);
    Vec dh_pre(h);
    for (size_t i = 0; i < h; ++i) dh_pre[i] = dh[i] * activate_grad(cache.h_pre[i]);

    axpy(1.0, dh_pre, acc[kBh]);
    outer_acc(acc[kWh], dh_pre, cache.x);

    Vec dx(cfg_.input_dim());
    matvec_transpose(tensors_[kWh], h, cfg_.input_dim(), dh_pre, dx);
    for (size_t k = 0; k < context.size(); ++k) {
      double* row = acc[kEmbed].data() + static_cast<size_t>(context[k]) * e;
      for (size_t i = 0; i < e; ++i) row[i] += dx[k * e + i];
    }
  }

  std::vector<Vec> backward(std::span<const TokenId> context, const ForwardCache& cache,
                            std::span<const double> dz) const {
    std::vector<Vec> g = zero_like();
    backward_acc(context, cache, dz, g);
    return g;
  }

  std::vector<Vec> backward(std::span<const TokenId> context,
                            std::span<const double> dz) const {
    ForwardCache cache;
    forward_logits(context, cache);
    return backward(context, cache, dz);
  }

  std::vector<Vec> zero_like() const {
    std::vector<Vec> g;
    g.reserve(tensors_.size());
    for (const Vec& t : tensors_) g.emplace_back(t.size(), 0.0);
    return g;
  }

  // FNV-1a over the little-endian bytes of every parameter, in tensor order.
  // Binds replay files to the exact model that produced them.
  uint64_t fingerprint() const {
    uint64_t hash = 0xcbf29ce484222325ULL;
    for (const Vec& t : tensors_) {
      for (double x : t) {
        uint64_t bits = std::bit_cast<uint64_t>(x);
        for (int b = 0; b < 8; ++b) {
          hash ^= (bits >> (8 * b)) & 0xFF;
          hash *= 0x100000001b3ULL;
        }
      }
    }
    return hash;
  }

  // Checkpoint layout: one line of config JSON, then the raw little-endian
  // 64-bit parameter arrays in tensor order.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out << cfg_.to_json().dump() << "\n";
    for (const Vec& t : tensors_) {
      for (double x : t) {
        uint64_t bits = std::bit_cast<uint64_t>(x);
        char bytes[8];
        for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
        out.write(bytes, 8);
      }
    }
    if (!out) throw IoError("short write on checkpoint: " + path);
  }

  static TinyLM load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::string header;
    if (!std::getline(in, header)) throw ParseError("checkpoint missing header: " + path);
    TinyLMConfig cfg;
    try {
      cfg = TinyLMConfig::from_json(nlohmann::json::parse(header));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("checkpoint header: " + std::string(e.what()));
    }
    TinyLM lm(cfg);
    for (Vec& t : lm.tensors_) {
      for (double& x : t) {
        char bytes[8];
        if (!in.read(bytes, 8)) throw ParseError("checkpoint truncated: " + path);
        uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
          bits |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[b])) << (8 * b);
        x = std::bit_cast<double>(bits);
      }
      ensure_finite(t, "checkpoint parameters");
    }
    return lm;
  }

 private:
  double activate(double x) const {
    if (cfg_.activation == Activation::tanh_act) return std::tanh(x);
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
  }

  double activate_grad(double x) const {
    if (cfg_.activation == Activation::tanh_act) {
      double t = std::tanh(x);
      return 1.0 - t * t;
    }
    double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
  }

  TinyLMConfig cfg_;
  std::vector<Vec> tensors_;
};

// Relative L2 distance |a - base| / |base| over the flattened parameters.
inline double param_distance(const TinyLM& a, const TinyLM& base) {
  const auto& ta = a.tensors();
  const auto& tb = base.tensors();
  if (ta.size() != tb.size()) throw DimensionError("param_distance: tensor count");
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].size() != tb[i].size())
      throw DimensionError("param_distance: shape mismatch in tensor " + std::to_string(i));
    for (size_t k = 0; k < ta[i].size(); ++k) {
      double d = ta[i][k] - tb[i][k];
      num += d * d;
      den += tb[i][k] * tb[i][k];
    }
  }
  if (den == 0.0) throw NumericError("param_distance: zero-norm base model");
  return std::sqrt(num) / std::sqrt(den);
}

}  // namespace replaytune

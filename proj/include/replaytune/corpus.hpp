#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "replaytune/errors.hpp"
#include "replaytune/rng.hpp"
#include "replaytune/topk.hpp"

namespace replaytune {

using Corpus = std::vector<std::vector<TokenId>>;

enum class GrammarKind { arithmetic, bracket };

// Two synthetic grammars over one shared vocabulary with disjoint transition
// structure, so fine-tuning on one measurably degrades the other.
//
// arithmetic: x_t = (start + t*stride) mod V with a bounded number of noised
// positions. bracket: depth-limited matched open/close pairs separated by
// uniform filler tokens.
struct GrammarSpec {
  GrammarKind kind = GrammarKind::arithmetic;
  std::string name = "arith";
  int vocab_size = 64;
  uint64_t seed = 0;

  // arithmetic
  std::vector<int> strides = {1, 3, 5, 7};
  double noise_rate = 0.05;
  double valid_diff_threshold = 0.85;  // validator floor, enforced at generation
  int modulus = 0;  // token range [0, modulus); 0 means the whole vocabulary.
                    // A modulus below vocab_size gives the domain a proper
                    // token-support subset, which is what makes restricted
                    // replay protective for the other domain.

  // bracket
  int n_pairs = 4;
  int open_base = 2;    // opens [open_base, open_base+n_pairs), closes shifted by n_pairs
  int filler_base = 16; // fillers [filler_base, vocab_size)
  int max_depth = 4;
  double p_close = 0.40;
  double p_open = 0.45;
  int min_matched_pairs = 2;
  // Fillers walk an affine map (mult coprime to the filler count) with an
  // occasional uniform jump, so they carry transition structure a model can
  // generalize instead of memorize.
  int filler_mult = 5;
  int filler_add = 7;
  double filler_jump = 0.1;

  void validate() const {
    if (vocab_size < 2) throw ConfigError("grammar: vocab_size must be >= 2");
    if (kind == GrammarKind::arithmetic) {
      if (strides.empty()) throw ConfigError("grammar: strides empty");
      if (!(noise_rate >= 0.0 && noise_rate < 1.0))
        throw ConfigError("grammar: noise_rate must be in [0,1)");
      if (modulus < 0 || modulus > vocab_size)
        throw ConfigError("grammar: modulus must be in [0, vocab_size]");
    } else {
      if (open_base + 2 * n_pairs > filler_base || filler_base >= vocab_size)
        throw ConfigError("grammar: bracket token ranges do not fit the vocabulary");
      if (max_depth < 1 || n_pairs < 1) throw ConfigError("grammar: bad bracket params");
    }
  }
};

namespace detail {

inline std::vector<TokenId> gen_arithmetic(const GrammarSpec& spec, Rng& rng, int len) {
  int m = spec.modulus > 0 ? spec.modulus : spec.vocab_size;
  std::vector<TokenId> seq(static_cast<size_t>(len));
  auto start = static_cast<TokenId>(rng.next_below(static_cast<uint64_t>(m)));
  int stride = spec.strides[rng.next_below(spec.strides.size())];
  for (int t = 0; t < len; ++t)
    seq[static_cast<size_t>(t)] = static_cast<TokenId>((start + static_cast<int64_t>(t) * stride) % m);

  // Noise count capped so the valid-diff fraction can never fall below the
  // validator threshold: each noised position breaks at most two diffs.
  int want = static_cast<int>(std::llround(spec.noise_rate * len));
  int cap = static_cast<int>(std::floor((len - 1) * (1.0 - spec.valid_diff_threshold) / 2.0));
  int n_noise = std::min(want, cap);
  if (n_noise > 0) {
    std::vector<int> positions(static_cast<size_t>(len));
    std::iota(positions.begin(), positions.end(), 0);
    for (int i = 0; i < n_noise; ++i) {
      size_t j = i + static_cast<size_t>(rng.next_below(positions.size() - static_cast<size_t>(i)));
      std::swap(positions[static_cast<size_t>(i)], positions[j]);
      seq[static_cast<size_t>(positions[static_cast<size_t>(i)])] =
          static_cast<TokenId>(rng.next_below(static_cast<uint64_t>(m)));
    }
  }
  return seq;
}

inline std::vector<TokenId> gen_bracket_attempt(const GrammarSpec& spec, Rng& rng, int len,
                                                int* matched_out) {
  std::vector<TokenId> seq;
  seq.reserve(static_cast<size_t>(len));
  std::vector<int> stack;
  int matched = 0;
  int n_fillers = spec.vocab_size - spec.filler_base;
  int f = static_cast<int>(rng.next_below(static_cast<uint64_t>(n_fillers)));
  for (int t = 0; t < len; ++t) {
    if (!stack.empty() && rng.next_double() < spec.p_close) {
      int j = stack.back();
      stack.pop_back();
      seq.push_back(static_cast<TokenId>(spec.open_base + spec.n_pairs + j));
      ++matched;
    } else if (static_cast<int>(stack.size()) < spec.max_depth &&
               rng.next_double() < spec.p_open) {
      int j = static_cast<int>(rng.next_below(static_cast<uint64_t>(spec.n_pairs)));
      stack.push_back(j);
      seq.push_back(static_cast<TokenId>(spec.open_base + j));
    } else {
      if (rng.next_double() < spec.filler_jump)
        f = static_cast<int>(rng.next_below(static_cast<uint64_t>(n_fillers)));
      else
        f = (spec.filler_mult * f + spec.filler_add) % n_fillers;
      seq.push_back(static_cast<TokenId>(spec.filler_base + f));
    }
  }
  *matched_out = matched;
  return seq;
}

inline std::vector<TokenId> gen_bracket(const GrammarSpec& spec, Rng& rng, int len) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    int matched = 0;
    auto seq = gen_bracket_attempt(spec, rng, len, &matched);
    if (matched >= spec.min_matched_pairs) return seq;
  }
  // Deterministic fallback so generation provably terminates: alternate
  // open/close pairs, then fillers.
  std::vector<TokenId> seq(static_cast<size_t>(len),
                           static_cast<TokenId>(spec.filler_base));
  for (int t = 0; t + 1 < len && t < 2 * spec.min_matched_pairs; t += 2) {
    int j = (t / 2) % spec.n_pairs;
    seq[static_cast<size_t>(t)] = static_cast<TokenId>(spec.open_base + j);
    seq[static_cast<size_t>(t) + 1] = static_cast<TokenId>(spec.open_base + spec.n_pairs + j);
  }
  return seq;
}

}  // namespace detail

// Deterministic generation: sequence i draws from an independent stream
// forked at tag i, so a shorter corpus is always a prefix of a longer one
// generated from the same spec.
inline Corpus generate(const GrammarSpec& spec, int n_sequences, int seq_len) {
  spec.validate();
  if (n_sequences < 0) throw ConfigError("generate: negative sequence count");
  if (n_sequences > 0 && seq_len < 2) throw ConfigError("generate: seq_len must be >= 2");
  Corpus out;
  out.reserve(static_cast<size_t>(n_sequences));
  Rng base(spec.seed);
  for (int i = 0; i < n_sequences; ++i) {
    Rng rng = base.fork(static_cast<uint64_t>(i));
    if (spec.kind == GrammarKind::arithmetic)
      out.push_back(detail::gen_arithmetic(spec, rng, seq_len));
    else
      out.push_back(detail::gen_bracket(spec, rng, seq_len));
  }
  return out;
}

// Accepts iff at least valid_diff_threshold of consecutive differences
// (mod V) are in the stride set.
inline bool validate_arithmetic(const GrammarSpec& spec, std::span<const TokenId> seq) {
  if (seq.size() < 2) return false;
  int m = spec.modulus > 0 ? spec.modulus : spec.vocab_size;
  size_t ok = 0;
  for (size_t t = 0; t + 1 < seq.size(); ++t) {
    if (seq[t] >= m || seq[t + 1] >= m) continue;  // out-of-range token: broken diff
    int d = (static_cast<int>(seq[t + 1]) - static_cast<int>(seq[t]) + m) % m;
    if (std::find(spec.strides.begin(), spec.strides.end(), d) != spec.strides.end()) ++ok;
  }
  return static_cast<double>(ok) / static_cast<double>(seq.size() - 1) >=
         spec.valid_diff_threshold;
}

// Accepts iff bracket discipline holds (every close matches the most recent
// unmatched open) and at least min_matched_pairs pairs complete. Unclosed
// opens at the end are fine (sequences are truncated).
inline bool validate_bracket(const GrammarSpec& spec, std::span<const TokenId> seq) {
  std::vector<int> stack;
  int matched = 0;
  for (TokenId tok : seq) {
    int t = static_cast<int>(tok);
    if (t >= spec.open_base && t < spec.open_base + spec.n_pairs) {
      stack.push_back(t - spec.open_base);
    } else if (t >= spec.open_base + spec.n_pairs && t < spec.open_base + 2 * spec.n_pairs) {
      int j = t - spec.open_base - spec.n_pairs;
      if (stack.empty() || stack.back() != j) return false;
      stack.pop_back();
      ++matched;
    }
  }
  return matched >= spec.min_matched_pairs;
}

inline bool validate_sequence(const GrammarSpec& spec, std::span<const TokenId> seq) {
  return spec.kind == GrammarKind::arithmetic ? validate_arithmetic(spec, seq)
                                              : validate_bracket(spec, seq);
}

// Disjoint, covering partition; order within parts follows a seeded shuffle.
inline std::vector<Corpus> split(const Corpus& corpus, const std::vector<double>& fractions,
                                 uint64_t seed) {
  double total = std::accumulate(fractions.begin(), fractions.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");
  std::vector<size_t> idx(corpus.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);

  std::vector<size_t> counts(fractions.size());
  size_t assigned = 0;
  for (size_t i = 0; i < fractions.size(); ++i) {
    counts[i] = static_cast<size_t>(std::floor(fractions[i] * static_cast<double>(corpus.size())));
    assigned += counts[i];
  }
  for (size_t i = 0; assigned < corpus.size(); i = (i + 1) % counts.size()) {
    ++counts[i];
    ++assigned;
  }

  std::vector<Corpus> parts(fractions.size());
  size_t pos = 0;
  for (size_t i = 0; i < counts.size(); ++i) {
    for (size_t k = 0; k < counts[i]; ++k) parts[i].push_back(corpus[idx[pos++]]);
  }
  return parts;
}

// Corpus files: one sequence per line, space-separated decimal token ids.
inline void save_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write corpus: " + path);
  for (const auto& seq : corpus) {
    for (size_t i = 0; i < seq.size(); ++i) {
      if (i) out << ' ';
      out << seq[i];
    }
    out << '\n';
  }
  if (!out) throw IoError("short write on corpus: " + path);
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus: " + path);
  Corpus corpus;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::vector<TokenId> seq;
    long long tok = 0;
    while (ss >> tok) seq.push_back(static_cast<TokenId>(tok));
    if (!ss.eof())
      throw ParseError(path + " line " + std::to_string(line_no) + ": bad token");
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

}  // namespace replaytune

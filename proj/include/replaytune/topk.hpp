#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "replaytune/errors.hpp"
#include "replaytune/numeric.hpp"

namespace replaytune {

using TokenId = int32_t;

struct SelectorConfig {
  double tau = 0.98;   // cumulative-mass threshold, in (0,1)
  int k_max = 200;     // upper cap on the dynamic K
  bool store_logits = false;

  void validate() const {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("selector: tau must be in (0,1)");
    if (k_max < 1) throw ConfigError("selector: k_max must be >= 1");
  }
};

// Per-position candidate set. token_ids keeps the selection order
// (probability descending, ties by ascending id); when the gold token was not
// covered it is appended at the end and gold_appended is set.
struct CandidateSet {
  std::vector<TokenId> token_ids;
  TokenId gold_id = 0;
  bool gold_appended = false;
};

namespace detail {

// Token order used everywhere selection happens: descending probability,
// then ascending id. Exact zero probabilities sort last, by id.
inline std::vector<TokenId> selection_order(std::span<const double> p) {
  std::vector<TokenId> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
    if (p[static_cast<size_t>(a)] != p[static_cast<size_t>(b)])
      return p[static_cast<size_t>(a)] > p[static_cast<size_t>(b)];
    return a < b;
  });
  return order;
}

}  // namespace detail

// Smallest k whose k most probable tokens reach cumulative mass tau, capped
// at k_max. If rounding keeps the running sum below tau even over the whole
// vocabulary, K* falls back to |p|.
inline int dynamic_k(const ProbVec& p, const SelectorConfig& cfg) {
  cfg.validate();
  auto order = detail::selection_order(p);
  double cum = 0.0;
  int k_star = static_cast<int>(p.size());
  for (size_t i = 0; i < order.size(); ++i) {
    cum += p[static_cast<size_t>(order[i])];
    if (cum >= cfg.tau) {
      k_star = static_cast<int>(i + 1);
      break;
    }
  }
  return std::min(k_star, cfg.k_max);
}

inline CandidateSet select(std::span<const double> z, TokenId gold,
                           const SelectorConfig& cfg) {
  if (gold < 0 || static_cast<size_t>(gold) >= z.size())
    throw IndexError("select: gold token out of range");
  ProbVec p = softmax(z);
  auto order = detail::selection_order(p);

  double cum = 0.0;
  size_t k_star = p.size();
  for (size_t i = 0; i < order.size(); ++i) {
    cum += p[static_cast<size_t>(order[i])];
    if (cum >= cfg.tau) {
      k_star = i + 1;
      break;
    }
  }
  size_t k = std::min(k_star, static_cast<size_t>(cfg.k_max));

  CandidateSet s;
  s.gold_id = gold;
  s.token_ids.assign(order.begin(), order.begin() + k);
  bool covered =
      std::find(s.token_ids.begin(), s.token_ids.end(), gold) != s.token_ids.end();
  if (!covered) {
    s.token_ids.push_back(gold);
    s.gold_appended = true;
  }
  return s;
}

// Outside mass rho: total probability of tokens excluded from the set.
// Summed directly over the excluded tokens, so a full-coverage set gives
// exactly zero.
inline double outside_mass(const ProbVec& p, const CandidateSet& s) {
  std::vector<char> in_set(p.size(), 0);
  for (TokenId id : s.token_ids) {
    if (id < 0 || static_cast<size_t>(id) >= p.size())
      throw IndexError("outside_mass: candidate id out of range");
    in_set[static_cast<size_t>(id)] = 1;
  }
  double rho = 0.0;
  for (size_t j = 0; j < p.size(); ++j) {
    if (!in_set[j]) rho += p[j];
  }
  return rho;
}

}  // namespace replaytune

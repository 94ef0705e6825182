#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "replaytune/errors.hpp"
#include "replaytune/numeric.hpp"
#include "replaytune/topk.hpp"

namespace replaytune {

// Loss value in nats plus the logit-space gradient. For the restricted loss
// the gradient is zero outside the candidate set.
struct LossResult {
  double value = 0.0;
  Vec grad_logits;
};

inline LossResult full_ce(std::span<const double> z, TokenId gold) {
  if (gold < 0 || static_cast<size_t>(gold) >= z.size())
    throw IndexError("full_ce: gold out of range");
  double lse = log_sum_exp(z);
  LossResult r;
  r.value = lse - z[static_cast<size_t>(gold)];
  r.grad_logits.resize(z.size());
  for (size_t j = 0; j < z.size(); ++j) r.grad_logits[j] = std::exp(z[j] - lse);
  r.grad_logits[static_cast<size_t>(gold)] -= 1.0;
  return r;
}

// Cross-entropy with the softmax renormalized over the candidate set. A gold
// token missing from the set is a hard contract violation: Stage 0
// guarantees inclusion, so absence means storage corruption and must never
// be silently repaired.
inline LossResult restricted_ce(std::span<const double> z, const CandidateSet& s,
                                TokenId gold) {
  if (gold < 0 || static_cast<size_t>(gold) >= z.size())
    throw IndexError("restricted_ce: gold out of range");
  bool has_gold = false;
  Vec z_s(s.token_ids.size());
  for (size_t i = 0; i < s.token_ids.size(); ++i) {
    TokenId id = s.token_ids[i];
    if (id < 0 || static_cast<size_t>(id) >= z.size())
      throw IndexError("restricted_ce: candidate id out of range");
    z_s[i] = z[static_cast<size_t>(id)];
    has_gold = has_gold || id == gold;
  }
  if (!has_gold)
    throw ContractViolation("restricted_ce: gold token not in candidate set");

  double lse = log_sum_exp(z_s);
  LossResult r;
  r.value = lse - z[static_cast<size_t>(gold)];
  r.grad_logits.assign(z.size(), 0.0);
  for (TokenId id : s.token_ids)
    r.grad_logits[static_cast<size_t>(id)] = std::exp(z[static_cast<size_t>(id)] - lse);
  r.grad_logits[static_cast<size_t>(gold)] -= 1.0;
  return r;
}

// Gradient bias of the restricted loss relative to the full loss, together
// with the closed forms it must satisfy: |Delta g|_1 = 2 rho and
// TV(p, p~) = rho. Both identities are re-checked on every call.
struct BiasReport {
  double rho = 0.0;
  double l1_bias = 0.0;
  double l2_bias = 0.0;
  double tv_distance = 0.0;
};

inline BiasReport gradient_bias(std::span<const double> z, const CandidateSet& s,
                                TokenId gold) {
  LossResult full = full_ce(z, gold);
  LossResult restricted = restricted_ce(z, s, gold);
  ProbVec p = softmax(z);

  BiasReport rep;
  rep.rho = outside_mass(p, s);

  double l1 = 0.0, l2sq = 0.0, tv = 0.0;
  for (size_t j = 0; j < z.size(); ++j) {
    double dg = restricted.grad_logits[j] - full.grad_logits[j];
    l1 += std::abs(dg);
    l2sq += dg * dg;
    // restricted grad minus full grad differs from p~ - p only by the
    // cancelled one-hot term, so |p~ - p| = |dg| coordinatewise.
    tv += std::abs(dg);
  }
  rep.l1_bias = l1;
  rep.l2_bias = std::sqrt(l2sq);
  rep.tv_distance = 0.5 * tv;

  if (std::abs(rep.l1_bias - 2.0 * rep.rho) > 1e-10)
    throw NumericError("gradient_bias: |dg|_1 != 2*rho (got " +
                       std::to_string(rep.l1_bias) + " vs rho " +
                       std::to_string(rep.rho) + ")");
  if (rep.l2_bias > rep.l1_bias + 1e-12)
    throw NumericError("gradient_bias: |dg|_2 exceeds |dg|_1");
  if (std::abs(rep.tv_distance - rep.rho) > 1e-12)
    throw NumericError("gradient_bias: TV distance != rho");
  return rep;
}

// Worst-case parameter-space bias bound 2 * |J|_2 * (1 - tau).
inline double param_bias_bound(double jacobian_norm, double tau) {
  return 2.0 * jacobian_norm * (1.0 - tau);
}

}  // namespace replaytune

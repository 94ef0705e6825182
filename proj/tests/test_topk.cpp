#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "replaytune/rng.hpp"
#include "replaytune/topk.hpp"

using namespace replaytune;

namespace {

// Brute-force oracle: enumerate prefixes of the fully sorted probability
// list (descending p, ascending id) until the cumulative mass reaches tau.
// Independent of the selection-order machinery in the implementation.
CandidateSet brute_force_select(const Vec& z, TokenId gold, const SelectorConfig& cfg) {
  ProbVec p = softmax(z);
  std::vector<TokenId> ids(p.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
    if (p[static_cast<size_t>(a)] != p[static_cast<size_t>(b)])
      return p[static_cast<size_t>(a)] > p[static_cast<size_t>(b)];
    return a < b;
  });
  size_t k_star = ids.size();
  double cum = 0.0;
  for (size_t k = 0; k < ids.size(); ++k) {
    cum += p[static_cast<size_t>(ids[k])];
    if (cum >= cfg.tau) {
      k_star = k + 1;
      break;
    }
  }
  size_t k = std::min(k_star, static_cast<size_t>(cfg.k_max));
  CandidateSet s;
  s.gold_id = gold;
  s.token_ids.assign(ids.begin(), ids.begin() + k);
  if (std::find(s.token_ids.begin(), s.token_ids.end(), gold) == s.token_ids.end()) {
    s.token_ids.push_back(gold);
    s.gold_appended = true;
  }
  return s;
}

}  // namespace

TEST_CASE("dynamic_k on hand-checkable distributions") {
  SelectorConfig cfg;
  cfg.tau = 0.85;
  cfg.k_max = 200;
  CHECK(dynamic_k(ProbVec(Vec{0.7, 0.2, 0.05, 0.05}), cfg) == 2);

  cfg.tau = 0.999;
  CHECK(dynamic_k(ProbVec(Vec{0.25, 0.25, 0.25, 0.25}), cfg) == 4);

  // uniform over 300: K* = ceil(0.9 * 300) = 270, capped at 200
  cfg.tau = 0.9;
  cfg.k_max = 200;
  Vec u(300, 1.0 / 300.0);
  CHECK(dynamic_k(ProbVec(u), cfg) == 200);
}

TEST_CASE("select includes the gold token and reports appending") {
  SelectorConfig cfg;
  cfg.tau = 0.85;
  cfg.k_max = 200;
  Vec z = {2.0, 1.0, 0.0, -1.0};  // top-2 mass 0.8808 >= 0.85

  CandidateSet s = select(z, 3, cfg);
  CHECK(s.token_ids == std::vector<TokenId>{0, 1, 3});
  CHECK(s.gold_appended);

  CandidateSet t = select(z, 0, cfg);
  CHECK(t.token_ids == std::vector<TokenId>{0, 1});
  CHECK(!t.gold_appended);

  CHECK_THROWS_AS(select(z, 4, cfg), IndexError);
  CHECK_THROWS_AS(select(z, -1, cfg), IndexError);
}

TEST_CASE("select with tau near 1 covers the whole vocabulary") {
  SelectorConfig cfg;
  cfg.tau = 0.9999999;
  cfg.k_max = 1000;
  Vec z = {0.3, -0.2, 1.4, 0.0, 0.0};
  CandidateSet s = select(z, 1, cfg);
  CHECK(s.token_ids.size() == z.size());
  CHECK(!s.gold_appended);
}

TEST_CASE("outside_mass") {
  Vec z = {2.0, 1.0, 0.0, -1.0};
  ProbVec p = softmax(z);

  CandidateSet full;
  full.gold_id = 0;
  full.token_ids = {0, 1, 2, 3};
  CHECK(outside_mass(p, full) == 0.0);

  CandidateSet half;
  half.gold_id = 0;
  half.token_ids = {0, 1};
  // frozen: p[2] + p[3] at full precision
  CHECK(outside_mass(p, half) == doctest::Approx(0.11920292202211756).epsilon(1e-12));

  ProbVec quarter(Vec{0.25, 0.25, 0.25, 0.25});
  CandidateSet two;
  two.gold_id = 1;
  two.token_ids = {1, 3};
  CHECK(outside_mass(quarter, two) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("select matches the brute-force prefix oracle on small vocabularies") {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    size_t v = 2 + rng.next_below(19);  // |V| <= 20
    Vec z(v);
    for (double& x : z) x = rng.normal() * rng.uniform(0.3, 6.0);
    SelectorConfig cfg;
    cfg.tau = rng.uniform(0.05, 0.999);
    cfg.k_max = static_cast<int>(1 + rng.next_below(v + 4));
    auto gold = static_cast<TokenId>(rng.next_below(v));

    CandidateSet got = select(z, gold, cfg);
    CandidateSet want = brute_force_select(z, gold, cfg);
    CHECK(got.token_ids == want.token_ids);
    CHECK(got.gold_appended == want.gold_appended);
  }
}

TEST_CASE("exact ties break by ascending token id") {
  SelectorConfig cfg;
  cfg.tau = 0.6;
  cfg.k_max = 10;
  Vec z = {1.0, 1.0, 0.0, 0.0};  // p = [.3655, .3655, .1345, .1345]
  CandidateSet s = select(z, 0, cfg);
  CHECK(s.token_ids == std::vector<TokenId>{0, 1});

  // all-equal logits: pure id order
  Vec eq(6, 2.5);
  cfg.tau = 0.5;
  CandidateSet t = select(eq, 5, cfg);
  CHECK(t.token_ids == std::vector<TokenId>{0, 1, 2, 5});
  CHECK(t.gold_appended);

  // determinism: identical inputs give identical output, tie case included
  for (int i = 0; i < 5; ++i) {
    CandidateSet again = select(eq, 5, cfg);
    CHECK(again.token_ids == t.token_ids);
  }
}

TEST_CASE("candidate mass satisfies the tau bound when the cap does not bind") {
  Rng rng(555);
  int uncapped_checked = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    size_t v = 3 + rng.next_below(60);
    Vec z(v);
    for (double& x : z) x = rng.normal() * rng.uniform(0.5, 5.0);
    SelectorConfig cfg;
    cfg.tau = rng.uniform(0.5, 0.995);
    cfg.k_max = static_cast<int>(1 + rng.next_below(v));
    auto gold = static_cast<TokenId>(rng.next_below(v));

    ProbVec p = softmax(z);
    SelectorConfig uncapped = cfg;
    uncapped.k_max = static_cast<int>(v);
    int k_star = dynamic_k(p, uncapped);

    CandidateSet s = select(z, gold, cfg);
    double rho = outside_mass(p, s);
    CHECK(std::find(s.token_ids.begin(), s.token_ids.end(), gold) != s.token_ids.end());
    CHECK(s.token_ids.size() <= static_cast<size_t>(cfg.k_max) + 1);
    if (k_star <= cfg.k_max) {
      CHECK(rho <= 1.0 - cfg.tau);
      ++uncapped_checked;
    }
  }
  CHECK(uncapped_checked > 200);  // the property was actually exercised
}

TEST_CASE("zero-probability tokens are selected only by id order after everything else") {
  // One dominant logit pushes the rest to exact zero probability.
  Vec z = {800.0, 0.0, 0.0, 0.0};
  SelectorConfig cfg;
  cfg.tau = 0.999;
  cfg.k_max = 3;
  CandidateSet s = select(z, 0, cfg);
  CHECK(s.token_ids.front() == 0);
  CHECK(!s.gold_appended);
}

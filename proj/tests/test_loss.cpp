#include <doctest.h>

#include <cmath>

#include "replaytune/loss.hpp"
#include "replaytune/rng.hpp"

using namespace replaytune;

namespace {

CandidateSet set_of(std::vector<TokenId> ids, TokenId gold) {
  CandidateSet s;
  s.token_ids = std::move(ids);
  s.gold_id = gold;
  return s;
}

}  // namespace

TEST_CASE("full cross-entropy on hand-checkable inputs") {
  LossResult r = full_ce(Vec{0.0, 0.0}, 0);
  CHECK(r.value == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(r.grad_logits[0] == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK(r.grad_logits[1] == doctest::Approx(0.5).epsilon(1e-15));

  // frozen: ln(1 + e^-10)
  LossResult s = full_ce(Vec{10.0, 0.0}, 0);
  CHECK(s.value == doctest::Approx(4.5398899216864647e-05).epsilon(1e-10));

  CHECK_THROWS_AS(full_ce(Vec{1.0, 2.0}, 2), IndexError);
}

TEST_CASE("full cross-entropy gradient sums to zero") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    size_t v = 2 + rng.next_below(50);
    Vec z(v);
    for (double& x : z) x = rng.normal() * 4.0;
    LossResult r = full_ce(z, static_cast<TokenId>(rng.next_below(v)));
    CHECK(r.value >= 0.0);
    double sum = 0.0;
    for (double g : r.grad_logits) sum += g;
    CHECK(std::abs(sum) <= 1e-12);
  }
}

TEST_CASE("restricted cross-entropy on hand-checkable inputs") {
  // frozen: ln(1 + e)
  LossResult r = restricted_ce(Vec{2.0, 1.0, 0.0, -1.0}, set_of({0, 1}, 1), 1);
  CHECK(r.value == doctest::Approx(1.3132616875182228).epsilon(1e-14));
  CHECK(r.grad_logits[2] == 0.0);
  CHECK(r.grad_logits[3] == 0.0);

  LossResult s = restricted_ce(Vec{0.0, 0.0, 0.0}, set_of({0, 1}, 0), 0);
  CHECK(s.value == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(s.grad_logits[0] == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK(s.grad_logits[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.grad_logits[2] == 0.0);
}

TEST_CASE("gold outside the candidate set is a contract violation") {
  CHECK_THROWS_AS(restricted_ce(Vec{1.0, 2.0, 3.0}, set_of({0, 1}, 0), 2),
                  ContractViolation);
}

TEST_CASE("restricted equals full when the set covers the vocabulary") {
  Rng rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    size_t v = 2 + rng.next_below(40);
    Vec z(v);
    for (double& x : z) x = rng.normal() * rng.uniform(0.5, 6.0);
    auto gold = static_cast<TokenId>(rng.next_below(v));
    std::vector<TokenId> all(v);
    for (size_t i = 0; i < v; ++i) all[i] = static_cast<TokenId>(i);

    LossResult full = full_ce(z, gold);
    LossResult restr = restricted_ce(z, set_of(all, gold), gold);
    CHECK(std::abs(full.value - restr.value) <= 1e-12);
    for (size_t i = 0; i < v; ++i)
      CHECK(std::abs(full.grad_logits[i] - restr.grad_logits[i]) <= 1e-12);
  }
}

TEST_CASE("restricted gradient: zero outside S, sums to zero, matches p~ - y") {
  Rng rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    size_t v = 4 + rng.next_below(30);
    Vec z(v);
    for (double& x : z) x = rng.normal() * 3.0;
    // random subset containing gold
    std::vector<TokenId> ids;
    for (size_t i = 0; i < v; ++i)
      if (rng.next_below(2) == 0) ids.push_back(static_cast<TokenId>(i));
    auto gold = static_cast<TokenId>(rng.next_below(v));
    if (std::find(ids.begin(), ids.end(), gold) == ids.end()) ids.push_back(gold);

    LossResult r = restricted_ce(z, set_of(ids, gold), gold);
    CHECK(r.value >= 0.0);
    double sum = 0.0;
    std::vector<char> in(v, 0);
    for (TokenId id : ids) in[static_cast<size_t>(id)] = 1;
    for (size_t i = 0; i < v; ++i) {
      if (!in[i]) CHECK(r.grad_logits[i] == 0.0);
      sum += r.grad_logits[i];
    }
    CHECK(std::abs(sum) <= 1e-12);
  }
}

TEST_CASE("restricted loss gradient matches central finite differences") {
  Rng rng(407);
  const double h = 1e-6;
  for (int trial = 0; trial < 120; ++trial) {
    size_t v = 4 + rng.next_below(12);
    Vec z(v);
    for (double& x : z) x = rng.normal() * 2.0;
    std::vector<TokenId> ids;
    for (size_t i = 0; i < v; ++i)
      if (rng.next_below(3) != 0) ids.push_back(static_cast<TokenId>(i));
    auto gold = static_cast<TokenId>(rng.next_below(v));
    if (std::find(ids.begin(), ids.end(), gold) == ids.end()) ids.push_back(gold);
    CandidateSet s = set_of(ids, gold);

    LossResult r = restricted_ce(z, s, gold);
    for (size_t i = 0; i < v; ++i) {
      Vec zp = z, zm = z;
      zp[i] += h;
      zm[i] -= h;
      double fd = (restricted_ce(zp, s, gold).value - restricted_ce(zm, s, gold).value) /
                  (2.0 * h);
      // absolute floor absorbs the ~1e-10 central-difference noise on
      // near-zero coordinates; significant coordinates must agree to 1e-6
      double diff = std::abs(fd - r.grad_logits[i]);
      double denom = std::max(std::abs(fd), std::abs(r.grad_logits[i]));
      CHECK((diff <= 1e-9 || diff / denom < 1e-6));
    }
  }
}

TEST_CASE("gradient bias report on constructed cases") {
  SUBCASE("full coverage means zero bias") {
    Vec z = {1.0, -0.5, 0.25};
    BiasReport rep = gradient_bias(z, set_of({0, 1, 2}, 1), 1);
    CHECK(rep.rho == 0.0);
    CHECK(rep.l1_bias <= 1e-15);
    CHECK(rep.tv_distance <= 1e-15);
  }
  SUBCASE("uniform over 4 with half coverage") {
    Vec z = {0.0, 0.0, 0.0, 0.0};
    BiasReport rep = gradient_bias(z, set_of({1, 2}, 1), 1);
    CHECK(rep.rho == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(rep.l1_bias == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rep.tv_distance == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(rep.l2_bias <= rep.l1_bias);
  }
}

TEST_CASE("bias identity |dg|_1 = 2 rho over random draws") {
  Rng rng(888);
  for (int trial = 0; trial < 1000; ++trial) {
    size_t v = 4 + rng.next_below(60);
    Vec z(v);
    for (double& x : z) x = rng.normal() * rng.uniform(0.5, 5.0);
    SelectorConfig cfg;
    cfg.tau = rng.uniform(0.5, 0.99);
    cfg.k_max = static_cast<int>(v);
    auto gold = static_cast<TokenId>(rng.next_below(v));
    CandidateSet s = select(z, gold, cfg);
    // gradient_bias re-checks the closed forms internally and throws on
    // violation beyond 1e-10.
    BiasReport rep;
    CHECK_NOTHROW(rep = gradient_bias(z, s, gold));
    CHECK(std::abs(rep.l1_bias - 2.0 * rep.rho) <= 1e-10);
  }
}

TEST_CASE("param_bias_bound arithmetic") {
  CHECK(param_bias_bound(3.0, 0.9) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(param_bias_bound(0.0, 0.5) == 0.0);
  CHECK(param_bias_bound(5.0, 0.999999) == doctest::Approx(1e-5).epsilon(1e-6));
}

#include <doctest.h>

#include <cmath>
#include <numbers>

#include "replaytune/optim.hpp"
#include "replaytune/rng.hpp"

using namespace replaytune;

namespace {
constexpr double kPi = std::numbers::pi;

double angle_between(const Vec& a, const Vec& b) {
  double c = dot(a, b) / (l2_norm(a) * l2_norm(b));
  return std::acos(std::clamp(c, -1.0, 1.0));
}
}  // namespace

TEST_CASE("angle_clip passes aligned gradients through") {
  Vec m = {1.0, 0.0};
  Vec g = {1.0, 0.5};  // ~26.57 degrees
  auto [gc, diag] = angle_clip(g, m, kPi / 4.0);
  CHECK(gc == g);
  CHECK(!diag.clipped);
  CHECK(diag.degenerate == ClipDegenerate::none);
  CHECK(diag.angle_before == doctest::Approx(std::atan2(0.5, 1.0)).epsilon(1e-12));
}

TEST_CASE("angle_clip rotates a perpendicular gradient onto the cap") {
  Vec m = {1.0, 0.0};
  Vec g = {0.0, 1.0};
  auto [gc, diag] = angle_clip(g, m, kPi / 4.0);
  CHECK(diag.clipped);
  CHECK(gc[0] == doctest::Approx(std::sqrt(2.0) / 2.0).epsilon(1e-12));
  CHECK(gc[1] == doctest::Approx(std::sqrt(2.0) / 2.0).epsilon(1e-12));
  CHECK(l2_norm(gc) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(angle_between(m, gc) == doctest::Approx(kPi / 4.0).epsilon(1e-9));
}

TEST_CASE("angle_clip degenerate cases") {
  SUBCASE("zero momentum") {
    Vec m = {0.0, 0.0};
    Vec g = {3.0, -4.0};
    auto [gc, diag] = angle_clip(g, m, kPi / 4.0);
    CHECK(gc == g);
    CHECK(diag.degenerate == ClipDegenerate::zero_momentum);
  }
  SUBCASE("zero gradient") {
    Vec m = {1.0, 2.0};
    Vec g = {0.0, 0.0};
    auto [gc, diag] = angle_clip(g, m, kPi / 4.0);
    CHECK(gc == g);
    CHECK(diag.degenerate == ClipDegenerate::none);
    CHECK(!diag.clipped);
  }
  SUBCASE("exactly antiparallel") {
    Vec m = {1.0, 1.0};
    Vec g = {-2.0, -2.0};
    auto [gc, diag] = angle_clip(g, m, kPi / 4.0);
    CHECK(gc == g);
    CHECK(diag.degenerate == ClipDegenerate::antiparallel);
    CHECK(!diag.clipped);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(angle_clip(Vec{1.0}, Vec{1.0, 2.0}, kPi / 4.0), DimensionError);
  }
}

TEST_CASE("angle_clip cap and norm preservation over random instances") {
  Rng rng(4242);
  for (int trial = 0; trial < 2000; ++trial) {
    size_t d = trial % 2 == 0 ? 2 + rng.next_below(8) : 50;
    Vec m(d), g(d);
    for (double& x : m) x = rng.normal();
    for (double& x : g) x = rng.normal() * rng.uniform(0.1, 10.0);
    double delta = rng.uniform(0.05, 1.5);
    auto [gc, diag] = angle_clip(g, m, delta);
    if (diag.degenerate != ClipDegenerate::none) continue;
    double after = angle_between(m, gc);
    CHECK(after <= delta + 1e-9);
    double cos_after = std::cos(after);
    CHECK(cos_after >= std::cos(delta) - 1e-9);
    if (diag.clipped) {
      CHECK(std::abs(l2_norm(gc) - l2_norm(g)) <= 1e-9);
      CHECK(diag.angle_after <= delta + 1e-9);
      CHECK(diag.angle_before > delta);
    } else {
      CHECK(gc == g);
    }
  }
}

TEST_CASE("shrink mode keeps the parallel component and lands on the cap") {
  Vec m = {2.0, 0.0};
  Vec g = {1.0, 3.0};
  double delta = kPi / 4.0;
  auto [gc, diag] = angle_clip(g, m, delta, ClipMode::shrink_perpendicular);
  CHECK(diag.clipped);
  CHECK(gc[0] == doctest::Approx(1.0).epsilon(1e-12));  // parallel part kept
  CHECK(gc[1] == doctest::Approx(std::tan(delta) * 1.0).epsilon(1e-12));
  CHECK(angle_between(m, gc) == doctest::Approx(delta).epsilon(1e-9));

  // obtuse gradient: shrink mode degenerates to pass-through
  Vec bad = {-1.0, 3.0};
  auto [gb, diagb] = angle_clip(bad, m, delta, ClipMode::shrink_perpendicular);
  CHECK(gb == bad);
  CHECK(diagb.degenerate == ClipDegenerate::antiparallel);
}

TEST_CASE("atan2_step on hand-checkable coordinates") {
  double alpha = 0.01;
  Vec delta = atan2_step(Vec{0.0, 1.0, 1.0}, Vec{5.0, 0.0, 1.0}, alpha);
  CHECK(delta[0] == 0.0);                                               // m_hat = 0
  CHECK(delta[1] == doctest::Approx(-alpha * kPi / 2.0).epsilon(1e-15));  // v_hat = 0
  CHECK(delta[2] == doctest::Approx(-alpha * kPi / 4.0).epsilon(1e-15));  // atan(1)

  CHECK_THROWS_AS(atan2_step(Vec{1.0}, Vec{-1.0}, alpha), NumericError);
  CHECK_THROWS_AS(atan2_step(Vec{1.0}, Vec{1.0, 2.0}, alpha), DimensionError);
}

TEST_CASE("atan2_step bounds hold for arbitrary moments") {
  Rng rng(17);
  for (int trial = 0; trial < 2000; ++trial) {
    size_t d = 1 + rng.next_below(32);
    double alpha = rng.uniform(1e-6, 0.5);
    Vec m(d), v(d);
    for (double& x : m) x = rng.normal() * std::exp(rng.uniform(-8.0, 8.0));
    for (double& x : v) x = rng.next_below(6) == 0 ? 0.0 : std::pow(rng.normal(), 2.0);
    Vec delta = atan2_step(m, v, alpha);
    for (double x : delta) CHECK(std::abs(x) <= alpha * (kPi / 2.0));
    CHECK(l2_norm(delta) <=
          alpha * kPi * std::sqrt(static_cast<double>(d)) / 2.0 * (1.0 + 1e-12));
  }
}

TEST_CASE("moclip single-step hand unroll") {
  MoClipConfig cfg;
  cfg.alpha = 0.1;
  cfg.beta1 = 0.0;
  cfg.beta2 = 0.0;
  cfg.weight_decay = 0.0;
  MoClipOptimizer opt(cfg);

  std::vector<Vec> params = {{0.0}};
  std::vector<Vec> grads = {{1.0}};
  StepInfo info = opt.apply(params, grads);
  // m_hat = 1, v_hat = 1 -> step = -alpha * pi/4
  CHECK(params[0][0] == doctest::Approx(-0.1 * kPi / 4.0).epsilon(1e-15));
  CHECK(info.max_abs_update == doctest::Approx(0.1 * kPi / 4.0).epsilon(1e-15));
  CHECK(opt.state().step == 1);
  CHECK(info.clips.size() == 1);
  CHECK(info.clips[0].degenerate == ClipDegenerate::zero_momentum);
}

TEST_CASE("moclip leaves parameters alone with zero gradients and no decay") {
  MoClipConfig cfg;
  cfg.weight_decay = 0.0;
  MoClipOptimizer opt(cfg);
  std::vector<Vec> params = {{1.0, -2.0}, {3.0}};
  std::vector<Vec> grads = {{0.0, 0.0}, {0.0}};
  auto before = params;
  opt.apply(params, grads);
  CHECK(params == before);
}

TEST_CASE("moclip rejects malformed gradients") {
  MoClipOptimizer opt(MoClipConfig{});
  std::vector<Vec> params = {{1.0, 2.0}};
  std::vector<Vec> bad_shape = {{1.0}};
  CHECK_THROWS_AS(opt.apply(params, bad_shape), DimensionError);
  std::vector<Vec> bad_value = {{1.0, std::nan("")}};
  CHECK_THROWS_AS(opt.apply(params, bad_value), NumericError);
}

TEST_CASE("moclip per-coordinate step bound across a noisy run") {
  MoClipConfig cfg;
  cfg.alpha = 0.05;
  cfg.weight_decay = 0.0;
  MoClipOptimizer opt(cfg);
  Rng rng(606);
  std::vector<Vec> params = {Vec(24, 0.0), Vec(8, 1.0)};
  for (int step = 0; step < 500; ++step) {
    std::vector<Vec> grads = {Vec(24), Vec(8)};
    for (Vec& g : grads)
      for (double& x : g) x = rng.normal() * std::exp(rng.uniform(-4.0, 4.0));
    StepInfo info = opt.apply(params, grads);
    CHECK(info.max_abs_update <= cfg.alpha * (kPi / 2.0));
  }
  CHECK(opt.state().step == 500);
}

TEST_CASE("adamw hand unroll and decay-only shrink") {
  AdamWConfig cfg;
  cfg.alpha = 0.2;
  cfg.beta1 = 0.0;
  cfg.beta2 = 0.0;
  cfg.eps = 0.0;
  cfg.weight_decay = 0.0;
  AdamWOptimizer opt(cfg);
  std::vector<Vec> params = {{0.0}};
  std::vector<Vec> grads = {{1.0}};
  opt.apply(params, grads);
  CHECK(params[0][0] == doctest::Approx(-0.2).epsilon(1e-15));

  AdamWConfig dec;
  dec.alpha = 0.5;
  dec.weight_decay = 0.1;
  AdamWOptimizer opt2(dec);
  std::vector<Vec> p2 = {{2.0}};
  std::vector<Vec> g2 = {{0.0}};
  opt2.apply(p2, g2);
  CHECK(p2[0][0] == doctest::Approx(2.0 * (1.0 - 0.5 * 0.1)).epsilon(1e-15));
}

TEST_CASE("tam damps by the gradient-momentum cosine per unit") {
  AdamWConfig base;
  base.alpha = 0.1;
  base.beta1 = 0.9;
  base.beta2 = 0.0;
  base.eps = 0.0;
  base.weight_decay = 0.0;

  // Prime the momentum with one step, then measure the second update, for
  // both TAM and plain AdamW on the same gradient sequence.
  auto second_step = [&](Optimizer& opt, const Vec& g2) {
    std::vector<Vec> params = {{0.0, 0.0}};
    std::vector<Vec> g1 = {{1.0, 0.0}};
    opt.apply(params, g1);
    Vec before = params[0];
    std::vector<Vec> gs = {g2};
    opt.apply(params, gs);
    return Vec{params[0][0] - before[0], params[0][1] - before[1]};
  };
  auto compare = [&](const Vec& g2, double damp) {
    TamOptimizer tam(TamConfig{base, ClipScope::per_tensor});
    AdamWOptimizer ref(base);
    Vec got = second_step(tam, g2);
    Vec want = second_step(ref, g2);
    CHECK(got[0] == doctest::Approx(damp * want[0]).epsilon(1e-12));
    CHECK(got[1] == doctest::Approx(damp * want[1]).epsilon(1e-12));
  };

  compare({1.0, 0.0}, 1.0);                       // phi = 0: identical to AdamW
  compare({0.5, std::sqrt(3.0) / 2.0}, 0.5);      // phi = 60 degrees: halved
  // phi = 90 degrees: zero update for that unit
  TamOptimizer tam(TamConfig{base, ClipScope::per_tensor});
  Vec perp = second_step(tam, {0.0, 1.0});
  CHECK(perp[0] == 0.0);
  CHECK(perp[1] == 0.0);
}

TEST_CASE("mofo masks the update to the top momentum coordinates") {
  MofoConfig cfg;
  cfg.adamw.alpha = 0.1;
  cfg.adamw.beta1 = 0.0;
  cfg.adamw.beta2 = 0.0;
  cfg.adamw.eps = 0.0;
  cfg.adamw.weight_decay = 0.0;
  cfg.fraction = 0.2;
  MofoOptimizer opt(cfg);

  std::vector<Vec> params = {Vec(10, 0.0)};
  std::vector<Vec> grads = {{0.1, 0.9, 0.2, 0.9, 0.3, 0.1, 0.2, 0.1, 0.05, 0.15}};
  opt.apply(params, grads);
  int moved = 0;
  for (double p : params[0])
    if (p != 0.0) ++moved;
  CHECK(moved == 2);  // exactly top 20% of 10 coordinates
  CHECK(params[0][1] != 0.0);
  CHECK(params[0][3] != 0.0);
}

TEST_CASE("mofo edge fractions") {
  std::vector<Vec> params = {Vec(5, 1.0)};
  std::vector<Vec> grads = {Vec(5, 1.0)};

  MofoConfig all;
  all.adamw.weight_decay = 0.0;
  all.fraction = 1.0;
  MofoOptimizer opt_all(all);
  auto pa = params;
  opt_all.apply(pa, grads);
  AdamWOptimizer ref(all.adamw);
  auto pr = params;
  ref.apply(pr, grads);
  CHECK(pa == pr);  // q = 1 is exactly AdamW

  MofoConfig none;
  none.adamw.weight_decay = 0.1;
  none.fraction = 0.0;
  MofoOptimizer opt_none(none);
  auto pn = params;
  opt_none.apply(pn, grads);
  for (double p : pn[0])
    CHECK(p == doctest::Approx(1.0 - none.adamw.alpha * 0.1).epsilon(1e-15));  // decay only
}

TEST_CASE("moclip matches adamw(eps=0) in the small-ratio regime") {
  // beta1 = 0 makes m_hat the raw gradient while a huge primed second moment
  // keeps |m_hat|/sqrt(v_hat) far under 1e-3, where arctan(x) ~ x.
  Rng rng(2718);
  int compared = 0;
  for (int trial = 0; trial < 200; ++trial) {
    double g = rng.uniform(-1.0, 1.0);
    if (std::abs(g) < 1e-6) continue;
    double alpha = 1e-3;

    MoClipConfig mcfg;
    mcfg.alpha = alpha;
    mcfg.beta1 = 0.0;
    mcfg.beta2 = 0.999;
    mcfg.weight_decay = 0.0;
    mcfg.delta_max = kPi / 2.0 - 1e-9;
    MoClipOptimizer mo(mcfg);

    AdamWConfig acfg;
    acfg.alpha = alpha;
    acfg.beta1 = 0.0;
    acfg.beta2 = 0.999;
    acfg.eps = 0.0;
    acfg.weight_decay = 0.0;
    AdamWOptimizer ad(acfg);

    // Prime both with one huge gradient, then compare the next update.
    std::vector<Vec> pm = {{0.0}}, pa = {{0.0}};
    std::vector<Vec> prime = {{1e7}};
    mo.apply(pm, prime);
    ad.apply(pa, prime);
    double m_before = pm[0][0], a_before = pa[0][0];
    std::vector<Vec> gs = {{g}};
    mo.apply(pm, gs);
    ad.apply(pa, gs);
    double dm = pm[0][0] - m_before;
    double da = pa[0][0] - a_before;
    REQUIRE(std::abs(da) > 0.0);
    CHECK(std::abs(dm - da) / std::abs(da) <= 1e-3);
    ++compared;
  }
  CHECK(compared > 150);
}

TEST_CASE("optimizers are deterministic given identical inputs") {
  auto run = [](uint64_t seed) {
    MoClipConfig cfg;
    cfg.alpha = 0.01;
    MoClipOptimizer opt(cfg);
    Rng rng(seed);
    std::vector<Vec> params = {Vec(16, 0.5), Vec(4, -0.25)};
    for (int s = 0; s < 50; ++s) {
      std::vector<Vec> grads = {Vec(16), Vec(4)};
      for (Vec& g : grads)
        for (double& x : g) x = rng.normal();
      opt.apply(params, grads);
    }
    return params;
  };
  auto a = run(12);
  auto b = run(12);
  CHECK(a == b);  // bitwise
}

TEST_CASE("global clip scope treats all tensors as one vector") {
  MoClipConfig cfg;
  cfg.clip_scope = ClipScope::global;
  cfg.weight_decay = 0.0;
  cfg.alpha = 0.01;
  MoClipOptimizer opt(cfg);
  std::vector<Vec> params = {{0.0}, {0.0}};
  std::vector<Vec> g1 = {{1.0}, {0.0}};
  StepInfo i1 = opt.apply(params, g1);
  CHECK(i1.clips.size() == 1);  // one unit, not one per tensor
  std::vector<Vec> g2 = {{0.0}, {1.0}};  // perpendicular to the momentum
  StepInfo i2 = opt.apply(params, g2);
  CHECK(i2.clips.size() == 1);
  CHECK(i2.clips[0].clipped);
}

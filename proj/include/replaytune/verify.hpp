#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "replaytune/harness.hpp"
#include "replaytune/loss.hpp"
#include "replaytune/model.hpp"
#include "replaytune/optim.hpp"
#include "replaytune/rng.hpp"
#include "replaytune/topk.hpp"

namespace replaytune {

struct TheoryCheck {
  std::string name;
  bool pass = true;
  uint64_t trials = 0;
  std::string detail;  // worst case seen, or the first failing instance
};

struct TheoryReport {
  std::vector<TheoryCheck> checks;

  bool all_pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }

  std::string to_string() const {
    std::ostringstream os;
    for (const auto& c : checks) {
      os << (c.pass ? "PASS" : "FAIL") << "  " << c.name << "  (" << c.trials
         << " trials)";
      if (!c.detail.empty()) os << "  " << c.detail;
      os << "\n";
    }
    return os.str();
  }
};

namespace detail {

inline Vec random_logits(Rng& rng, size_t n, double scale) {
  Vec z(n);
  for (double& x : z) x = rng.normal() * scale;
  return z;
}

// Spectral norm of an explicit matrix (rows x cols, row-major) by power
// iteration on A^T A: 50 iterations with 1e-6 relative tolerance.
inline double power_iteration_norm(const Vec& a, size_t rows, size_t cols, Rng& rng,
                                   int iters = 50, double tol = 1e-6) {
  Vec u(cols);
  for (double& x : u) x = rng.normal();
  double nu = l2_norm(u);
  for (double& x : u) x /= nu;
  Vec au(rows), atau(cols);
  double sigma = 0.0;
  for (int it = 0; it < iters; ++it) {
    matvec(a, rows, cols, u, au);
    double s = l2_norm(au);
    if (std::abs(s - sigma) <= tol * std::max(1.0, s)) {
      sigma = s;
      break;
    }
    sigma = s;
    matvec_transpose(a, rows, cols, au, atau);
    double n = l2_norm(atau);
    if (n == 0.0) return 0.0;
    for (size_t i = 0; i < cols; ++i) u[i] = atau[i] / n;
  }
  return sigma;
}

}  // namespace detail

// Randomized verification of every closed form and bound the library
// guarantees. A failing check names the instance that broke it.
inline TheoryReport verify_theory(uint64_t seed, int n_trials) {
  TheoryReport report;
  Rng rng(seed);

  // --- Restricted-loss bias: |dg|_1 = 2 rho, exact l2 form, TV = rho,
  // --- and rho <= 1 - tau whenever the cap did not bind.
  {
    TheoryCheck l1{"bias-identity-l1  (|dg|_1 = 2*rho, tol 1e-10)"};
    TheoryCheck l2{"bias-exact-l2  (elementwise form, tol 1e-10)"};
    TheoryCheck tau_bound{"tau-bound  (K* <= k_max  =>  rho <= 1 - tau)"};
    double worst_l1 = 0.0, worst_l2 = 0.0;
    for (int trial = 0; trial < n_trials; ++trial) {
      size_t v = 4 + rng.next_below(509);  // |V| in [4, 512]
      double scale = rng.uniform(0.5, 8.0);
      Vec z = detail::random_logits(rng, v, scale);
      double tau = rng.uniform(0.5, 0.999);
      auto gold = static_cast<TokenId>(rng.next_below(v));
      SelectorConfig sel;
      sel.tau = tau;
      bool capped_cfg = rng.next_below(10) < 3;
      sel.k_max = capped_cfg ? static_cast<int>(1 + rng.next_below(v)) : static_cast<int>(v);
      CandidateSet s = select(z, gold, sel);

      ProbVec p = softmax(z);
      BiasReport bias;
      try {
        bias = gradient_bias(z, s, gold);
      } catch (const NumericError& e) {
        l1.pass = false;
        l1.detail = "trial " + std::to_string(trial) + ": " + e.what();
        break;
      }
      worst_l1 = std::max(worst_l1, std::abs(bias.l1_bias - 2.0 * bias.rho));

      double in_sq = 0.0, out_sq = 0.0;
      std::vector<char> in_set(v, 0);
      for (TokenId id : s.token_ids) in_set[static_cast<size_t>(id)] = 1;
      double coef = bias.rho / (1.0 - bias.rho);
      for (size_t j = 0; j < v; ++j) {
        if (in_set[j])
          in_sq += (coef * p[j]) * (coef * p[j]);
        else
          out_sq += p[j] * p[j];
      }
      double l2_form = std::sqrt(in_sq + out_sq);
      double err = std::abs(bias.l2_bias - l2_form);
      worst_l2 = std::max(worst_l2, err);
      if (err > 1e-10 && l2.pass) {
        l2.pass = false;
        l2.detail = "trial " + std::to_string(trial) + ": V=" + std::to_string(v) +
                    " tau=" + std::to_string(tau) + " err=" + std::to_string(err);
      }

      // K* did not hit the cap exactly when the uncapped selection of the
      // same tau is no larger than k_max.
      SelectorConfig uncapped = sel;
      uncapped.k_max = static_cast<int>(v);
      int k_star = dynamic_k(p, uncapped);
      if (k_star <= sel.k_max) {
        ++tau_bound.trials;
        if (bias.rho > 1.0 - tau) {
          tau_bound.pass = false;
          tau_bound.detail = "trial " + std::to_string(trial) + ": rho=" +
                             std::to_string(bias.rho) + " > 1-tau=" +
                             std::to_string(1.0 - tau);
        }
      }
      ++l1.trials;
      ++l2.trials;
    }
    if (l1.pass) l1.detail = "worst |l1 - 2rho| = " + format_double(worst_l1);
    if (l2.pass) l2.detail = "worst err = " + format_double(worst_l2);
    report.checks.push_back(l1);
    report.checks.push_back(l2);
    report.checks.push_back(tau_bound);
  }

  // --- Full-coverage equivalence: S = V makes the restricted loss the full
  // --- loss, in value and gradient.
  {
    TheoryCheck eq{"full-coverage-equivalence  (S=V, tol 1e-12)"};
    double worst = 0.0;
    int trials = std::min(n_trials, 1000);
    for (int trial = 0; trial < trials; ++trial) {
      size_t v = 2 + rng.next_below(63);
      Vec z = detail::random_logits(rng, v, rng.uniform(0.5, 6.0));
      auto gold = static_cast<TokenId>(rng.next_below(v));
      SelectorConfig sel;
      sel.tau = 0.999999;
      sel.k_max = static_cast<int>(v);
      CandidateSet s;
      s.gold_id = gold;
      for (size_t j = 0; j < v; ++j) s.token_ids.push_back(static_cast<TokenId>(j));
      LossResult full = full_ce(z, gold);
      LossResult restr = restricted_ce(z, s, gold);
      double err = std::abs(full.value - restr.value);
      for (size_t j = 0; j < v; ++j)
        err = std::max(err, std::abs(full.grad_logits[j] - restr.grad_logits[j]));
      worst = std::max(worst, err);
      if (err > 1e-12 && eq.pass) {
        eq.pass = false;
        eq.detail = "trial " + std::to_string(trial) + ": err=" + format_double(err);
      }
      ++eq.trials;
    }
    if (eq.pass) eq.detail = "worst err = " + format_double(worst);
    report.checks.push_back(eq);
  }

  // --- Angle cap: post-clip angle <= delta_max + 1e-9, cosine bound, and
  // --- norm preservation in rotate mode.
  {
    TheoryCheck cap{"angle-cap  (angle' <= delta_max + 1e-9, cos >= cos(delta_max) - 1e-9)"};
    TheoryCheck norm{"clip-norm-preservation  (rotate mode, tol 1e-9)"};
    const size_t dims[] = {2, 10, 1000};
    double worst_angle = 0.0, worst_norm = 0.0;
    for (int trial = 0; trial < n_trials; ++trial) {
      size_t d = dims[static_cast<size_t>(trial) % 3];
      Vec m = detail::random_logits(rng, d, rng.uniform(0.1, 5.0));
      Vec g = detail::random_logits(rng, d, rng.uniform(0.1, 5.0));
      double delta = rng.uniform(5.0, 85.0) * std::numbers::pi / 180.0;
      auto [gc, diag] = angle_clip(g, m, delta);
      if (diag.degenerate != ClipDegenerate::none) continue;
      double mn = l2_norm(m), gn = l2_norm(gc);
      double c = dot(m, gc) / (mn * gn);
      double angle = std::acos(std::clamp(c, -1.0, 1.0));
      worst_angle = std::max(worst_angle, angle - delta);
      if ((angle > delta + 1e-9 || c < std::cos(delta) - 1e-9) && cap.pass) {
        cap.pass = false;
        cap.detail = "trial " + std::to_string(trial) + ": d=" + std::to_string(d) +
                     " delta=" + std::to_string(delta) + " angle'=" + std::to_string(angle);
      }
      if (diag.clipped) {
        double nerr = std::abs(gn - l2_norm(g));
        worst_norm = std::max(worst_norm, nerr);
        if (nerr > 1e-9 && norm.pass) {
          norm.pass = false;
          norm.detail = "trial " + std::to_string(trial) + ": |g'|-|g| = " + format_double(nerr);
        }
        ++norm.trials;
      }
      ++cap.trials;
    }
    if (cap.pass) cap.detail = "worst angle excess = " + format_double(worst_angle);
    if (norm.pass) norm.detail = "worst norm drift = " + format_double(worst_norm);
    report.checks.push_back(cap);
    report.checks.push_back(norm);
  }

  // --- atan2 step bounds: |dtheta|_inf <= alpha*pi/2 always, the l2 norm is
  // --- bounded by alpha*pi*sqrt(d)/2, and v_hat = 0 saturates exactly.
  {
    TheoryCheck inf_bound{"step-bound-inf  (|dtheta|_inf <= alpha*pi/2)"};
    TheoryCheck l2_bound{"step-bound-l2  (|dtheta|_2 <= alpha*pi*sqrt(d)/2)"};
    TheoryCheck sat{"step-bound-saturation  (v_hat=0 gives exactly alpha*pi/2, tol 1e-12)"};
    for (int trial = 0; trial < n_trials; ++trial) {
      size_t d = 1 + rng.next_below(64);
      double alpha = rng.uniform(1e-6, 1e-1);
      Vec m_hat = detail::random_logits(rng, d, rng.uniform(0.01, 100.0));
      Vec v_hat(d);
      for (double& x : v_hat) {
        x = rng.next_below(8) == 0 ? 0.0 : std::pow(rng.normal() * 10.0, 2.0);
      }
      Vec delta = atan2_step(m_hat, v_hat, alpha);
      double inf = 0.0;
      for (double x : delta) inf = std::max(inf, std::abs(x));
      if (inf > alpha * (std::numbers::pi / 2.0) && inf_bound.pass) {
        inf_bound.pass = false;
        inf_bound.detail = "trial " + std::to_string(trial) + ": inf=" + format_double(inf) +
                           " alpha=" + format_double(alpha);
      }
      double l2v = l2_norm(delta);
      double lim = alpha * std::numbers::pi * std::sqrt(static_cast<double>(d)) / 2.0;
      if (l2v > lim * (1.0 + 1e-12) && l2_bound.pass) {
        l2_bound.pass = false;
        l2_bound.detail = "trial " + std::to_string(trial) + ": l2=" + format_double(l2v);
      }
      ++inf_bound.trials;
      ++l2_bound.trials;
    }
    {
      double alpha = 0.37;
      Vec m_hat = {1.0, -2.5, 1e-8};
      Vec v_hat = {0.0, 0.0, 0.0};
      Vec delta = atan2_step(m_hat, v_hat, alpha);
      double want = alpha * std::numbers::pi / 2.0;
      for (double x : delta) {
        if (std::abs(std::abs(x) - want) > 1e-12) {
          sat.pass = false;
          sat.detail = "got " + format_double(std::abs(x)) + " want " + format_double(want);
        }
      }
      sat.trials = 1;
    }
    report.checks.push_back(inf_bound);
    report.checks.push_back(l2_bound);
    report.checks.push_back(sat);
  }

  // --- Parameter-space bias bound through the model Jacobian:
  // --- |J^T dg|_2 <= 2 |J|_2 (1 - tau), with |J|_2 from power iteration
  // --- (1e-3 slack absorbs the estimator tolerance).
  {
    TheoryCheck pb{"param-bias-bound  (|dg_theta|_2 <= 2*|J|_2*(1-tau) * (1+1e-3))"};
    int trials = std::min(n_trials, 20);
    for (int trial = 0; trial < trials; ++trial) {
      TinyLMConfig mc;
      mc.vocab_size = 8 + static_cast<int>(rng.next_below(8));
      mc.context_len = 2;
      mc.embed_dim = 3;
      mc.hidden_dim = 5;
      TinyLM lm = TinyLM::init(mc, rng.next_u64());
      std::vector<TokenId> ctx;
      for (int i = 0; i < mc.context_len; ++i)
        ctx.push_back(static_cast<TokenId>(rng.next_below(static_cast<uint64_t>(mc.vocab_size))));

      size_t d = 0;
      for (const auto& t : lm.tensors()) d += t.size();
      auto v = static_cast<size_t>(mc.vocab_size);

      // Explicit Jacobian, one backward per logit row.
      Vec jac(v * d);
      for (size_t r = 0; r < v; ++r) {
        Vec dz(v, 0.0);
        dz[r] = 1.0;
        auto g = lm.backward(ctx, dz);
        size_t off = 0;
        for (const auto& t : g) {
          std::copy(t.begin(), t.end(), jac.begin() + static_cast<long>(r * d + off));
          off += t.size();
        }
      }
      double sigma = detail::power_iteration_norm(jac, v, d, rng);

      Vec z = lm.forward_logits(ctx);
      double tau = rng.uniform(0.6, 0.99);
      auto gold = static_cast<TokenId>(rng.next_below(v));
      SelectorConfig sel;
      sel.tau = tau;
      sel.k_max = mc.vocab_size;
      CandidateSet s = select(z, gold, sel);
      LossResult full = full_ce(z, gold);
      LossResult restr = restricted_ce(z, s, gold);
      Vec dg(v);
      for (size_t j = 0; j < v; ++j) dg[j] = restr.grad_logits[j] - full.grad_logits[j];
      auto gtheta = lm.backward(ctx, dg);
      double gnorm = 0.0;
      for (const auto& t : gtheta)
        for (double x : t) gnorm += x * x;
      gnorm = std::sqrt(gnorm);

      double bound = param_bias_bound(sigma, tau) * (1.0 + 1e-3);
      if (gnorm > bound && pb.pass) {
        pb.pass = false;
        pb.detail = "trial " + std::to_string(trial) + ": |dg_theta|=" + format_double(gnorm) +
                    " bound=" + format_double(bound);
      }
      ++pb.trials;
    }
    report.checks.push_back(pb);
  }

  // --- Small-ratio regime: one MoClip step collapses to one AdamW(eps=0)
  // --- step when |m_hat| / sqrt(v_hat) <= 1e-3 (arctan(x) ~ x).
  {
    TheoryCheck small{"atan2-adamw-small-ratio  (rel tol 1e-3 when |m|/sqrt(v) <= 1e-3)"};
    for (int trial = 0; trial < std::min(n_trials, 2000); ++trial) {
      double m_hat = rng.uniform(-1.0, 1.0);
      double ratio = rng.uniform(1e-9, 1e-3);
      double v_hat = (m_hat / ratio) * (m_hat / ratio);
      double alpha = rng.uniform(1e-5, 1e-2);
      Vec delta = atan2_step(Vec{m_hat}, Vec{v_hat}, alpha);
      double adamw = -alpha * m_hat / std::sqrt(v_hat);
      double rel = std::abs(delta[0] - adamw) / std::max(1e-300, std::abs(adamw));
      if (rel > 1e-3 && small.pass) {
        small.pass = false;
        small.detail = "trial " + std::to_string(trial) + ": rel=" + format_double(rel);
      }
      ++small.trials;
    }
    report.checks.push_back(small);
  }

  return report;
}

}  // namespace replaytune

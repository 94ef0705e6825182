#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "replaytune/errors.hpp"
#include "replaytune/numeric.hpp"

namespace replaytune {

enum class ClipScope { per_tensor, global };
enum class MomentSource { clipped, raw };
enum class ClipMode { rotate_preserve_norm, shrink_perpendicular };
enum class ClipDegenerate { none, zero_momentum, antiparallel };

struct ClipDiagnostics {
  double angle_before = 0.0;  // radians
  double angle_after = 0.0;
  bool clipped = false;
  ClipDegenerate degenerate = ClipDegenerate::none;
};

struct MoClipConfig {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double delta_max = std::numbers::pi / 4.0;  // 45 degrees
  double weight_decay = 0.01;
  ClipScope clip_scope = ClipScope::per_tensor;
  MomentSource moment_source = MomentSource::clipped;
  ClipMode clip_mode = ClipMode::rotate_preserve_norm;

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("moclip: alpha must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("moclip: betas must be in [0,1)");
    if (!(delta_max > 0.0 && delta_max < std::numbers::pi / 2.0))
      throw ConfigError("moclip: delta_max must be in (0, pi/2)");
    if (weight_decay < 0.0) throw ConfigError("moclip: weight_decay must be >= 0");
  }
};

struct AdamWConfig {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct TamConfig {
  AdamWConfig adamw;
  ClipScope clip_scope = ClipScope::per_tensor;
};

struct MofoConfig {
  AdamWConfig adamw;
  double fraction = 0.2;  // top fraction of coordinates by |m_hat|, per tensor
};

// First/second moments per parameter tensor plus the step counter.
struct OptimizerState {
  std::vector<Vec> m;
  std::vector<Vec> v;
  uint64_t step = 0;
};

// Per-apply diagnostics surfaced to the harness and the theory suite.
struct StepInfo {
  std::vector<ClipDiagnostics> clips;  // one entry per clip-scope unit
  bool any_clipped = false;
  double max_abs_update = 0.0;  // inf-norm of the update term, decay excluded
  uint64_t antiparallel_total = 0;
};

namespace detail {

inline double norm_over(const std::vector<std::span<const double>>& spans) {
  double s = 0.0;
  for (auto sp : spans)
    for (double x : sp) s += x * x;
  return std::sqrt(s);
}

inline double dot_over(const std::vector<std::span<const double>>& a,
                       const std::vector<std::span<const double>>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += dot(a[i], b[i]);
  return s;
}

// Clips one scope unit in place. The unit may span several tensors (global
// scope); all geometry is computed over the concatenation.
inline ClipDiagnostics clip_unit(std::vector<std::span<double>> g,
                                 std::vector<std::span<const double>> m_prev,
                                 double delta_max, ClipMode mode,
                                 uint64_t* antiparallel_counter) {
  ClipDiagnostics diag;
  std::vector<std::span<const double>> g_view(g.begin(), g.end());

  double m_norm = norm_over(m_prev);
  double g_norm = norm_over(g_view);
  if (m_norm < 1e-12) {
    diag.degenerate = ClipDegenerate::zero_momentum;
    return diag;
  }
  if (g_norm < 1e-12) return diag;

  double a = dot_over(g_view, m_prev) / m_norm;  // parallel coefficient
  double cos_phi = std::clamp(a / g_norm, -1.0, 1.0);
  double phi = std::acos(cos_phi);
  diag.angle_before = phi;
  diag.angle_after = phi;
  if (phi <= delta_max) return diag;

  // Perpendicular norm from the residual vector itself; the
  // difference-of-squares form g^2 - a^2 loses all precision near
  // antiparallel and would turn exact pass-through cases into garbage
  // rotations.
  double am = a / m_norm;
  double perp_sq = 0.0;
  for (size_t s = 0; s < g.size(); ++s) {
    auto gs = g[s];
    auto ms = m_prev[s];
    for (size_t i = 0; i < gs.size(); ++i) {
      double r = gs[i] - am * ms[i];
      perp_sq += r * r;
    }
  }
  double perp_norm = std::sqrt(perp_sq);
  if (perp_norm <= 1e-12 * g_norm) {
    // Exactly antiparallel: no perpendicular direction to rotate through.
    // Pass the gradient unchanged rather than zeroing the coordinates.
    diag.degenerate = ClipDegenerate::antiparallel;
    if (antiparallel_counter) ++*antiparallel_counter;
    return diag;
  }

  if (mode == ClipMode::shrink_perpendicular && a <= 0.0) {
    // Obtuse parallel component: shrinking the perpendicular part cannot
    // reach the target angle, so this mode degenerates to pass-through.
    diag.degenerate = ClipDegenerate::antiparallel;
    if (antiparallel_counter) ++*antiparallel_counter;
    return diag;
  }

  double par_coef, perp_coef;  // g' = par_coef * m_hat + perp_coef * u_hat
  if (mode == ClipMode::rotate_preserve_norm) {
    par_coef = g_norm * std::cos(delta_max);
    perp_coef = g_norm * std::sin(delta_max);
  } else {
    par_coef = a;
    perp_coef = std::min(perp_norm, std::tan(delta_max) * a);
  }

  // u_hat_i = (g_i - a * m_hat_i) / perp_norm, expressed with unit scalars so
  // the rewrite is a single pass.
  double gc = perp_coef / perp_norm;
  double mc = par_coef / m_norm - gc * am;
  for (size_t s = 0; s < g.size(); ++s) {
    auto gs = g[s];
    auto ms = m_prev[s];
    for (size_t i = 0; i < gs.size(); ++i) gs[i] = gc * gs[i] + mc * ms[i];
  }

  diag.clipped = true;
  double new_norm = norm_over(std::vector<std::span<const double>>(g.begin(), g.end()));
  double new_dot = dot_over(std::vector<std::span<const double>>(g.begin(), g.end()), m_prev);
  double c = std::clamp(new_dot / (m_norm * new_norm), -1.0, 1.0);
  diag.angle_after = std::acos(c);
  return diag;
}

inline double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

inline void check_grads(const std::vector<Vec>& params, const std::vector<Vec>& grads,
                        const char* who) {
  if (params.size() != grads.size())
    throw DimensionError(std::string(who) + ": tensor count mismatch");
  for (size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != params[i].size())
      throw DimensionError(std::string(who) + ": shape mismatch in tensor " +
                           std::to_string(i));
    if (!all_finite(grads[i]))
      throw NumericError(std::string(who) + ": non-finite gradient in tensor " +
                         std::to_string(i));
  }
}

}  // namespace detail

// Gradient-momentum angle clipping. Returns the (possibly rotated) gradient
// and what happened. Rotation preserves |g| and lands the angle exactly on
// delta_max; shrink mode keeps the parallel component and caps the
// perpendicular one.
inline std::pair<Vec, ClipDiagnostics> angle_clip(
    std::span<const double> g, std::span<const double> m_prev, double delta_max,
    ClipMode mode = ClipMode::rotate_preserve_norm) {
  if (g.size() != m_prev.size()) throw DimensionError("angle_clip: shape mismatch");
  Vec out(g.begin(), g.end());
  ClipDiagnostics diag = detail::clip_unit({std::span<double>(out)}, {m_prev},
                                           delta_max, mode, nullptr);
  return {std::move(out), diag};
}

// Elementwise atan2 update: delta(i) = -alpha * sign(m_hat_i) *
// atan2(|m_hat_i|, sqrt(v_hat_i)). No epsilon anywhere; atan2(x, 0) = pi/2
// caps the step at alpha*pi/2 even when the second moment vanishes.
inline Vec atan2_step(std::span<const double> m_hat, std::span<const double> v_hat,
                      double alpha) {
  if (m_hat.size() != v_hat.size()) throw DimensionError("atan2_step: shape mismatch");
  Vec delta(m_hat.size());
  for (size_t i = 0; i < m_hat.size(); ++i) {
    if (v_hat[i] < 0.0) throw NumericError("atan2_step: negative second moment");
    delta[i] = -alpha * detail::sign(m_hat[i]) *
               std::atan2(std::abs(m_hat[i]), std::sqrt(v_hat[i]));
  }
  return delta;
}

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual StepInfo apply(std::vector<Vec>& params, const std::vector<Vec>& grads) = 0;
  virtual const OptimizerState& state() const = 0;
  virtual const char* name() const = 0;
};

class MoClipOptimizer final : public Optimizer {
 public:
  explicit MoClipOptimizer(MoClipConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  StepInfo apply(std::vector<Vec>& params, const std::vector<Vec>& grads) override {
    detail::check_grads(params, grads, "moclip");
    lazy_init(params);
    state_.step += 1;
    auto t = static_cast<double>(state_.step);

    std::vector<Vec> g_eff = grads;
    StepInfo info;
    if (cfg_.clip_scope == ClipScope::per_tensor) {
      for (size_t i = 0; i < g_eff.size(); ++i) {
        auto d = detail::clip_unit({std::span<double>(g_eff[i])},
                                   {std::span<const double>(state_.m[i])},
                                   cfg_.delta_max, cfg_.clip_mode,
                                   &antiparallel_count_);
        info.clips.push_back(d);
      }
    } else {
      std::vector<std::span<double>> gs;
      std::vector<std::span<const double>> ms;
      for (size_t i = 0; i < g_eff.size(); ++i) {
        gs.emplace_back(g_eff[i]);
        ms.emplace_back(state_.m[i]);
      }
      info.clips.push_back(detail::clip_unit(gs, ms, cfg_.delta_max, cfg_.clip_mode,
                                             &antiparallel_count_));
    }
    for (const auto& d : info.clips) info.any_clipped = info.any_clipped || d.clipped;
    info.antiparallel_total = antiparallel_count_;

    double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    for (size_t i = 0; i < params.size(); ++i) {
      Vec& p = params[i];
      Vec& m = state_.m[i];
      Vec& v = state_.v[i];
      const Vec& gc = g_eff[i];
      const Vec& gv = cfg_.moment_source == MomentSource::clipped ? g_eff[i] : grads[i];
      for (size_t k = 0; k < p.size(); ++k) {
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gc[k];
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gv[k] * gv[k];
        double m_hat = m[k] / bc1;
        double v_hat = v[k] / bc2;
        double upd = -cfg_.alpha * detail::sign(m_hat) *
                     std::atan2(std::abs(m_hat), std::sqrt(v_hat));
        info.max_abs_update = std::max(info.max_abs_update, std::abs(upd));
        p[k] = p[k] + upd - cfg_.alpha * cfg_.weight_decay * p[k];
      }
    }
    return info;
  }

  const OptimizerState& state() const override { return state_; }
  const char* name() const override { return "moclip"; }
  const MoClipConfig& config() const { return cfg_; }

 private:
  void lazy_init(const std::vector<Vec>& params) {
    if (!state_.m.empty()) return;
    for (const Vec& p : params) {
      state_.m.emplace_back(p.size(), 0.0);
      state_.v.emplace_back(p.size(), 0.0);
    }
  }

  MoClipConfig cfg_;
  OptimizerState state_;
  uint64_t antiparallel_count_ = 0;
};

class AdamWOptimizer final : public Optimizer {
 public:
  explicit AdamWOptimizer(AdamWConfig cfg) : cfg_(cfg) {}

  StepInfo apply(std::vector<Vec>& params, const std::vector<Vec>& grads) override {
    detail::check_grads(params, grads, "adamw");
    lazy_init(params);
    state_.step += 1;
    auto t = static_cast<double>(state_.step);
    double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t);

    StepInfo info;
    for (size_t i = 0; i < params.size(); ++i) {
      Vec& p = params[i];
      Vec& m = state_.m[i];
      Vec& v = state_.v[i];
      const Vec& g = grads[i];
      for (size_t k = 0; k < p.size(); ++k) {
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
        double m_hat = m[k] / bc1;
        double v_hat = v[k] / bc2;
        // zero momentum gives a zero update even at eps = 0 (avoids 0/0)
        double upd = m_hat == 0.0 ? 0.0
                                  : -cfg_.alpha * m_hat / (std::sqrt(v_hat) + cfg_.eps);
        info.max_abs_update = std::max(info.max_abs_update, std::abs(upd));
        p[k] = p[k] + upd - cfg_.alpha * cfg_.weight_decay * p[k];
      }
    }
    return info;
  }

  const OptimizerState& state() const override { return state_; }
  const char* name() const override { return "adamw"; }

 private:
  void lazy_init(const std::vector<Vec>& params) {
    if (!state_.m.empty()) return;
    for (const Vec& p : params) {
      state_.m.emplace_back(p.size(), 0.0);
      state_.v.emplace_back(p.size(), 0.0);
    }
  }

  AdamWConfig cfg_;
  OptimizerState state_;
};

// TAM baseline: AdamW with the update of each clip-scope unit damped by
// max(cos(angle(m_prev, g)), 0). No hard cap; misaligned units shrink
// proportionally instead.
class TamOptimizer final : public Optimizer {
 public:
  explicit TamOptimizer(TamConfig cfg) : cfg_(cfg) {}

  StepInfo apply(std::vector<Vec>& params, const std::vector<Vec>& grads) override {
    detail::check_grads(params, grads, "tam");
    lazy_init(params);

    std::vector<double> damp;
    if (cfg_.clip_scope == ClipScope::per_tensor) {
      for (size_t i = 0; i < params.size(); ++i)
        damp.push_back(unit_damp({std::span<const double>(grads[i])},
                                 {std::span<const double>(state_.m[i])}));
    } else {
      std::vector<std::span<const double>> gs, ms;
      for (size_t i = 0; i < params.size(); ++i) {
        gs.emplace_back(grads[i]);
        ms.emplace_back(state_.m[i]);
      }
      damp.assign(params.size(), unit_damp(gs, ms));
    }

    state_.step += 1;
    auto t = static_cast<double>(state_.step);
    double bc1 = 1.0 - std::pow(cfg_.adamw.beta1, t);
    double bc2 = 1.0 - std::pow(cfg_.adamw.beta2, t);

    StepInfo info;
    for (size_t i = 0; i < params.size(); ++i) {
      Vec& p = params[i];
      Vec& m = state_.m[i];
      Vec& v = state_.v[i];
      const Vec& g = grads[i];
      double di = damp[i];
      for (size_t k = 0; k < p.size(); ++k) {
        m[k] = cfg_.adamw.beta1 * m[k] + (1.0 - cfg_.adamw.beta1) * g[k];
        v[k] = cfg_.adamw.beta2 * v[k] + (1.0 - cfg_.adamw.beta2) * g[k] * g[k];
        double m_hat = m[k] / bc1;
        double v_hat = v[k] / bc2;
        double upd = (di == 0.0 || m_hat == 0.0)
                         ? 0.0
                         : -cfg_.adamw.alpha * di * m_hat /
                               (std::sqrt(v_hat) + cfg_.adamw.eps);
        info.max_abs_update = std::max(info.max_abs_update, std::abs(upd));
        p[k] = p[k] + upd - cfg_.adamw.alpha * cfg_.adamw.weight_decay * p[k];
      }
    }
    return info;
  }

  const OptimizerState& state() const override { return state_; }
  const char* name() const override { return "tam"; }

 private:
  static double unit_damp(const std::vector<std::span<const double>>& g,
                          const std::vector<std::span<const double>>& m) {
    double mn = detail::norm_over(m);
    double gn = detail::norm_over(g);
    if (mn < 1e-12 || gn < 1e-12) return 1.0;  // first step / zero grad: undamped
    double c = std::clamp(detail::dot_over(g, m) / (mn * gn), -1.0, 1.0);
    return std::max(c, 0.0);
  }

  void lazy_init(const std::vector<Vec>& params) {
    if (!state_.m.empty()) return;
    for (const Vec& p : params) {
      state_.m.emplace_back(p.size(), 0.0);
      state_.v.emplace_back(p.size(), 0.0);
    }
  }

  TamConfig cfg_;
  OptimizerState state_;
};

// MoFO baseline: the AdamW step is masked to the top fraction of coordinates
// per tensor ranked by |m_hat| (ties broken by ascending index). Moments
// update everywhere; decoupled decay applies everywhere.
class MofoOptimizer final : public Optimizer {
 public:
  explicit MofoOptimizer(MofoConfig cfg) : cfg_(cfg) {
    if (cfg_.fraction < 0.0 || cfg_.fraction > 1.0)
      throw ConfigError("mofo: fraction must be in [0,1]");
  }

  StepInfo apply(std::vector<Vec>& params, const std::vector<Vec>& grads) override {
    detail::check_grads(params, grads, "mofo");
    lazy_init(params);
    state_.step += 1;
    auto t = static_cast<double>(state_.step);
    double bc1 = 1.0 - std::pow(cfg_.adamw.beta1, t);
    double bc2 = 1.0 - std::pow(cfg_.adamw.beta2, t);

    StepInfo info;
    std::vector<size_t> order;
    for (size_t i = 0; i < params.size(); ++i) {
      Vec& p = params[i];
      Vec& m = state_.m[i];
      Vec& v = state_.v[i];
      const Vec& g = grads[i];
      size_t n = p.size();
      Vec m_hat(n), v_hat(n);
      for (size_t k = 0; k < n; ++k) {
        m[k] = cfg_.adamw.beta1 * m[k] + (1.0 - cfg_.adamw.beta1) * g[k];
        v[k] = cfg_.adamw.beta2 * v[k] + (1.0 - cfg_.adamw.beta2) * g[k] * g[k];
        m_hat[k] = m[k] / bc1;
        v_hat[k] = v[k] / bc2;
      }
      // top ceil(q*n) coordinates move; ceil so tiny tensors still learn.
      size_t take = cfg_.fraction == 0.0
                        ? 0
                        : std::min(n, static_cast<size_t>(std::ceil(
                                          cfg_.fraction * static_cast<double>(n))));
      order.resize(n);
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        double ma = std::abs(m_hat[a]), mb = std::abs(m_hat[b]);
        if (ma != mb) return ma > mb;
        return a < b;
      });
      std::vector<char> mask(n, 0);
      for (size_t j = 0; j < take; ++j) mask[order[j]] = 1;

      for (size_t k = 0; k < n; ++k) {
        double upd = 0.0;
        if (mask[k] && m_hat[k] != 0.0) {
          upd = -cfg_.adamw.alpha * m_hat[k] / (std::sqrt(v_hat[k]) + cfg_.adamw.eps);
          info.max_abs_update = std::max(info.max_abs_update, std::abs(upd));
        }
        p[k] = p[k] + upd - cfg_.adamw.alpha * cfg_.adamw.weight_decay * p[k];
      }
    }
    return info;
  }

  const OptimizerState& state() const override { return state_; }
  const char* name() const override { return "mofo"; }

 private:
  void lazy_init(const std::vector<Vec>& params) {
    if (!state_.m.empty()) return;
    for (const Vec& p : params) {
      state_.m.emplace_back(p.size(), 0.0);
      state_.v.emplace_back(p.size(), 0.0);
    }
  }

  MofoConfig cfg_;
  OptimizerState state_;
};

}  // namespace replaytune

#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "replaytune/errors.hpp"
#include "replaytune/replay.hpp"

namespace replaytune {

struct StabilityMetrics {
  double loss_variance = 0.0;  // population variance over the trailing window
  double grad_norm_cv = 0.0;   // std/mean over the whole trace
  int spike_count = 0;
};

namespace detail {

inline std::pair<double, double> mean_std(std::span<const double> xs) {
  if (xs.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - m) * (x - m);
  var /= static_cast<double>(xs.size());
  return {m, std::sqrt(var)};
}

}  // namespace detail

// Spike rule: a step whose loss exceeds the trailing-window mean by
// k_sigma standard deviations, counted with a refractory period so one
// excursion is one spike. The paper leaves the definition open; this
// operationalization is echoed in every report.
inline StabilityMetrics stability_metrics(std::span<const double> loss_trace,
                                          std::span<const double> grad_norm_trace,
                                          size_t window = 100, double k_sigma = 4.0,
                                          size_t refractory = 10) {
  StabilityMetrics out;
  if (!loss_trace.empty()) {
    size_t n = loss_trace.size();
    size_t w = std::min(window, n);
    auto [m, s] = detail::mean_std(loss_trace.subspan(n - w, w));
    out.loss_variance = s * s;
  }
  if (!grad_norm_trace.empty()) {
    auto [m, s] = detail::mean_std(grad_norm_trace);
    out.grad_norm_cv = m > 0.0 ? s / m : 0.0;
  }

  const size_t min_history = 10;
  size_t i = min_history;
  while (i < loss_trace.size()) {
    size_t lo = i > window ? i - window : 0;
    auto [m, s] = detail::mean_std(loss_trace.subspan(lo, i - lo));
    if (loss_trace[i] > m + k_sigma * s) {
      ++out.spike_count;
      i += refractory + 1;
    } else {
      ++i;
    }
  }
  return out;
}

struct FlopAccounting {
  double r = 0.0;       // mean |S_t| / |V|
  double saving = 0.0;  // 1 - r
};

inline FlopAccounting flop_accounting(const ReplayStats& stats, int vocab_size) {
  if (vocab_size < 1) throw ConfigError("flop_accounting: bad vocab size");
  FlopAccounting f;
  f.r = stats.mean_set_size / static_cast<double>(vocab_size);
  f.saving = 1.0 - f.r;
  return f;
}

// One training step as logged to metrics.csv.
struct StepRow {
  uint64_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
  uint64_t softmax_units = 0;
};

struct RunMetrics {
  std::vector<StepRow> rows;
  StabilityMetrics stability;
  double r_ratio = 1.0;
  uint64_t softmax_units_total = 0;
  uint64_t tokens_processed = 0;
  double max_abs_update = 0.0;  // inf-norm over all steps, decay excluded
  uint64_t clipped_steps = 0;
  double final_loss = 0.0;
  double rel_l2_distance = 0.0;
  double delta_ppl_base = 0.0;  // nats; filled by the caller that knows the base split
  double wall_seconds = 0.0;
  double tokens_per_sec = 0.0;

  std::vector<double> loss_trace() const {
    std::vector<double> t;
    t.reserve(rows.size());
    for (const auto& r : rows) t.push_back(r.loss);
    return t;
  }
  std::vector<double> grad_norm_trace() const {
    std::vector<double> t;
    t.reserve(rows.size());
    for (const auto& r : rows) t.push_back(r.grad_norm);
    return t;
  }
};

inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void write_metrics_csv(const std::string& path, const std::vector<StepRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write metrics: " + path);
  out << "step,loss,grad_norm,clipped_flag,softmax_units\n";
  for (const auto& r : rows) {
    out << r.step << ',' << format_double(r.loss) << ',' << format_double(r.grad_norm)
        << ',' << (r.clipped ? 1 : 0) << ',' << r.softmax_units << '\n';
  }
  if (!out) throw IoError("short write on metrics: " + path);
}

}  // namespace replaytune

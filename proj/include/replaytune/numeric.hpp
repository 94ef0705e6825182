#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "replaytune/errors.hpp"

namespace replaytune {

using Vec = std::vector<double>;

inline bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

inline void ensure_finite(std::span<const double> v, const char* what) {
  if (!all_finite(v)) throw NumericError(std::string(what) + ": non-finite entry");
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw DimensionError("axpy: length mismatch");
  for (size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

// y = W x, W row-major [rows x cols].
inline void matvec(std::span<const double> w, size_t rows, size_t cols,
                   std::span<const double> x, std::span<double> y) {
  if (w.size() != rows * cols || x.size() != cols || y.size() != rows)
    throw DimensionError("matvec: shape mismatch");
  for (size_t r = 0; r < rows; ++r) {
    const double* row = w.data() + r * cols;
    double s = 0.0;
    for (size_t c = 0; c < cols; ++c) s += row[c] * x[c];
    y[r] = s;
  }
}

// y = W^T v.
inline void matvec_transpose(std::span<const double> w, size_t rows, size_t cols,
                             std::span<const double> v, std::span<double> y) {
  if (w.size() != rows * cols || v.size() != rows || y.size() != cols)
    throw DimensionError("matvec_transpose: shape mismatch");
  std::fill(y.begin(), y.end(), 0.0);
  for (size_t r = 0; r < rows; ++r) {
    const double* row = w.data() + r * cols;
    double vr = v[r];
    for (size_t c = 0; c < cols; ++c) y[c] += row[c] * vr;
  }
}

// W += u v^T, W row-major [|u| x |v|].
inline void outer_acc(std::span<double> w, std::span<const double> u,
                      std::span<const double> v) {
  if (w.size() != u.size() * v.size())
    throw DimensionError("outer_acc: shape mismatch");
  for (size_t r = 0; r < u.size(); ++r) {
    double* row = w.data() + r * v.size();
    double ur = u[r];
    for (size_t c = 0; c < v.size(); ++c) row[c] += ur * v[c];
  }
}

inline double log_sum_exp(std::span<const double> z) {
  if (z.empty()) throw DimensionError("log_sum_exp: empty input");
  double m = *std::max_element(z.begin(), z.end());
  if (z.size() == 1) return z[0];
  double s = 0.0;
  for (double x : z) s += std::exp(x - m);
  return m + std::log(s);
}

// Probability vector: entries >= 0, summing to 1 within 1e-12. softmax()
// produces one by construction; the checked constructor guards any other
// entry point.
class ProbVec {
 public:
  explicit ProbVec(Vec values) : values_(std::move(values)) {
    if (values_.empty()) throw DimensionError("ProbVec: empty");
    double sum = 0.0;
    for (double p : values_) {
      if (!(p >= 0.0)) throw NumericError("ProbVec: negative or NaN entry");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw NumericError("ProbVec: entries sum to " + std::to_string(sum));
  }

  static ProbVec trusted(Vec values) { return ProbVec(std::move(values), 0); }

  const Vec& values() const { return values_; }
  double operator[](size_t i) const { return values_[i]; }
  size_t size() const { return values_.size(); }
  operator std::span<const double>() const { return values_; }

 private:
  ProbVec(Vec values, int) : values_(std::move(values)) {}
  Vec values_;
};

inline ProbVec softmax(std::span<const double> z) {
  if (z.empty()) throw DimensionError("softmax: empty input");
  ensure_finite(z, "softmax");
  double m = *std::max_element(z.begin(), z.end());
  Vec p(z.size());
  double s = 0.0;
  for (size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - m);
    s += p[i];
  }
  for (double& x : p) x /= s;
  return ProbVec::trusted(std::move(p));
}

}  // namespace replaytune

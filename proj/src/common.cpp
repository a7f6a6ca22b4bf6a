#include "rlvr/common.hpp"

#include <cmath>

namespace rlvr {

double Matrix::frobenius_norm() const { return l2_norm(data_); }

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void add_outer(Matrix& g, std::span<const double> u, std::span<const double> h) {
  require(g.rows() == u.size() && g.cols() == h.size(), "add_outer: shape mismatch");
  for (std::size_t r = 0; r < u.size(); ++r) {
    if (u[r] == 0.0) continue;
    auto row = g.row(r);
    for (std::size_t c = 0; c < h.size(); ++c) row[c] += u[r] * h[c];
  }
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace rlvr

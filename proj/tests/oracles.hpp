#pragma once

// Test-only reference implementations. Each one is written directly from the
// defining formula and shares no code path with the library routine it checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "embedmask/geometry.hpp"
#include "embedmask/tensor.hpp"

namespace oracle {

/// Jaccard set loss of predicting `pred` against `gt`: 1 - |gt & pred| / |gt | pred|.
inline double jaccard_loss(const std::vector<std::uint8_t>& gt, const std::vector<std::uint8_t>& pred) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    inter += (gt[i] && pred[i]) ? 1 : 0;
    uni += (gt[i] || pred[i]) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

/// Sum of squared coordinate differences.
inline double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

/// Direct cross-correlation with zero padding, HWC layout, KKIO kernel.
inline embedmask::Tensor<double> conv2d_direct(const embedmask::Tensor<double>& x, const embedmask::Tensor<double>& w,
                                               const embedmask::Tensor<double>& b, std::size_t stride) {
  const long h = static_cast<long>(x.extent(0)), wd = static_cast<long>(x.extent(1));
  const long cin = static_cast<long>(x.extent(2)), k = static_cast<long>(w.extent(0)), cout = static_cast<long>(w.extent(3));
  const long pad = k / 2, s = static_cast<long>(stride);
  const long ho = (h + 2 * pad - k) / s + 1, wo = (wd + 2 * pad - k) / s + 1;
  embedmask::Tensor<double> out(embedmask::Shape{static_cast<std::size_t>(ho), static_cast<std::size_t>(wo),
                                                 static_cast<std::size_t>(cout)});
  for (long oy = 0; oy < ho; ++oy)
    for (long ox = 0; ox < wo; ++ox)
      for (long co = 0; co < cout; ++co) {
        double acc = b[static_cast<std::size_t>(co)];
        for (long ky = 0; ky < k; ++ky)
          for (long kx = 0; kx < k; ++kx) {
            const long iy = oy * s + ky - pad, ix = ox * s + kx - pad;
            if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
            for (long ci = 0; ci < cin; ++ci) {
              acc += x[static_cast<std::size_t>((iy * wd + ix) * cin + ci)] *
                     w[static_cast<std::size_t>(((ky * k + kx) * cin + ci) * cout + co)];
            }
          }
        out[static_cast<std::size_t>((oy * wo + ox) * cout + co)] = acc;
      }
  return out;
}

/// Biased sample variance of rows about their mean: mean_j ||x_j - mean(x)||^2.
inline double mean_sq_deviation(const std::vector<std::vector<double>>& rows) {
  const std::size_t d = rows.front().size();
  std::vector<double> mu(d, 0.0);
  for (const auto& r : rows)
    for (std::size_t k = 0; k < d; ++k) mu[k] += r[k] / static_cast<double>(rows.size());
  double acc = 0;
  for (const auto& r : rows)
    for (std::size_t k = 0; k < d; ++k) acc += (r[k] - mu[k]) * (r[k] - mu[k]);
  return acc / static_cast<double>(rows.size());
}

inline embedmask::Tensor<double> random_tensor(std::mt19937_64& rng, embedmask::Shape shape, double lo = -1.0,
                                               double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  embedmask::Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

/// Random orthogonal D x D matrix (Gram-Schmidt on a Gaussian matrix), row-major.
inline std::vector<double> random_orthogonal(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> m(d * d);
  for (auto& v : m) v = n(rng);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += m[i * d + k] * m[j * d + k];
      for (std::size_t k = 0; k < d; ++k) m[i * d + k] -= dot * m[j * d + k];
    }
    double norm = 0;
    for (std::size_t k = 0; k < d; ++k) norm += m[i * d + k] * m[i * d + k];
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < d; ++k) m[i * d + k] /= norm;
  }
  return m;
}

}  // namespace oracle

#pragma once

// Embedding coupling: pixel-to-center assignment, the Gaussian coupling
// probability, the fixed-margin hinge loss, the Lovász hinge mask loss, center
// averaging and the smooth loss.
//
// Var-level functions take row-major [N, D] pixel embeddings, [1, D] centers
// and scalar margins, and are differentiable in all three.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "embedmask/ops.hpp"

namespace embedmask {

/// Receives non-fatal diagnostics (empty instance lists and the like).
inline std::function<void(std::string_view)>& warning_handler() {
  static std::function<void(std::string_view)> handler = [](std::string_view msg) {
    std::clog << "warning: " << msg << '\n';
  };
  return handler;
}

inline void warn(std::string_view msg) {
  if (warning_handler()) warning_handler()(msg);
}

/// sqrt(2 ln 2): phi = 0.5 exactly at distance Sigma * this.
inline constexpr double kHalfProbabilityRadius = 1.1774100225154747;

struct MarginConfig {
  double delta_a = 0.5;
  double delta_b = 1.5;
  double delta = 0.8;

  void validate() const {
    if (!(delta_a > 0 && delta_b > 0 && delta > 0)) throw std::invalid_argument("margins must be positive");
    if (!(delta_a < delta && delta <= delta_b)) {
      throw std::invalid_argument("margins must satisfy delta_a < delta <= delta_b");
    }
  }
};

struct LossWeights {
  double lambda1 = 0.5;
  double lambda2 = 0.1;
};

enum class CenterSource { averaged_training, single_proposal_inference };

/// A cluster center in value form. `margin` is Sigma.
struct ClusterCenter {
  std::vector<double> Q;
  double sigma = 1.0;
  CenterSource source = CenterSource::averaged_training;
};

// ---- value-level ---------------------------------------------------------------

template <typename T>
T squared_distance(std::span<const T> p, std::span<const T> q) {
  if (p.size() != q.size()) {
    throw ShapeError("embedding dimension mismatch: " + std::to_string(p.size()) + " vs " + std::to_string(q.size()));
  }
  T s{0};
  for (std::size_t k = 0; k < p.size(); ++k) s += (p[k] - q[k]) * (p[k] - q[k]);
  return s;
}

/// 1 iff ||p - Q|| <= delta (boundary inclusive).
template <typename T>
bool hard_assign(std::span<const T> p, std::span<const T> Q, T delta) {
  return std::sqrt(squared_distance(p, Q)) <= delta;
}

inline bool hard_assign(std::span<const double> p, const ClusterCenter& c, double delta) {
  return hard_assign<double>(p, c.Q, delta);
}

template <typename T>
T gaussian_phi(std::span<const T> p, std::span<const T> Q, T sigma) {
  if (!(sigma > T{0})) throw std::invalid_argument("gaussian_phi: Sigma must be positive");
  return std::exp(-squared_distance(p, Q) / (T{2} * sigma * sigma));
}

/// Same coupling parameterized by the precision a = 1 / (2 Sigma^2).
template <typename T>
T gaussian_phi_precision(std::span<const T> p, std::span<const T> Q, T a) {
  if (!(a > T{0})) throw std::invalid_argument("gaussian_phi: precision must be positive");
  return std::exp(-squared_distance(p, Q) * a);
}

inline double sigma_from_precision(double a) { return std::sqrt(1.0 / (2.0 * a)); }
inline double precision_from_sigma(double sigma) { return 1.0 / (2.0 * sigma * sigma); }

// ---- Var-level helpers -----------------------------------------------------------

/// Repeats a [1, D] row n times via a ones-column product.
template <typename T>
Var<T> repeat_rows(const Var<T>& row, std::size_t n) {
  return matmul(Var<T>::constant(Tensor<T>(Shape{n, 1}, T{1})), row);
}

/// Column means of an [m, D] tensor as a [1, D] row.
template <typename T>
Var<T> row_mean(const Var<T>& rows) {
  const std::size_t m = rows.shape().at(0);
  if (m == 0) throw ShapeError("row_mean of empty sample set");
  return matmul(Var<T>::constant(Tensor<T>(Shape{1, m}, T{1} / static_cast<T>(m))), rows);
}

/// phi for every row of `pixels` [N, D] against center [1, D] with scalar Sigma.
template <typename T>
Var<T> gaussian_phi(const Var<T>& pixels, const Var<T>& center, const Var<T>& sigma) {
  if (sigma.numel() != 1) throw ShapeError("gaussian_phi: Sigma must be scalar");
  if (!(sigma.value()[0] > T{0})) throw std::invalid_argument("gaussian_phi: Sigma must be positive");
  const Var<T> d2 = sq_dist_last(pixels, repeat_rows(center, pixels.shape().at(0)));
  return exp(neg(div(d2, mul(sigma, sigma) * T{2})));
}

/// phi with the precision parameterization, phi = exp(-a ||p - Q||^2).
template <typename T>
Var<T> gaussian_phi_precision(const Var<T>& pixels, const Var<T>& center, const Var<T>& precision) {
  if (precision.numel() != 1) throw ShapeError("gaussian_phi: precision must be scalar");
  const Var<T> d2 = sq_dist_last(pixels, repeat_rows(center, pixels.shape().at(0)));
  return exp(neg(mul(d2, reshape(precision, Shape{}))));
}

// ---- fixed-margin hinge ------------------------------------------------------------

template <typename T>
struct HingeInstance {
  Var<T> pixels;                   // [N, D] embeddings over the supervised set
  std::vector<std::uint8_t> fg;    // N labels
  Var<T> center;                   // [1, D]
};

/// Mean over instances of the per-instance mean over N_k of the pull term
/// [d - delta_a]_+^2 (foreground) and the push term [delta_b - d]_+^2
/// (background); both terms share the N_k normalizer.
template <typename T>
Var<T> hinge_loss(const std::vector<HingeInstance<T>>& instances, const MarginConfig& margins) {
  if (instances.empty()) {
    warn("hinge_loss: empty instance list, loss defined as 0");
    return Var<T>::constant(T{0});
  }
  Var<T> total = Var<T>::constant(T{0});
  for (const auto& inst : instances) {
    const std::size_t n = inst.pixels.shape().at(0);
    if (n == 0 || inst.fg.size() != n) throw ShapeError("hinge_loss: supervised set empty or label count mismatch");
    Tensor<T> fg(Shape{n}), bg(Shape{n});
    for (std::size_t i = 0; i < n; ++i) {
      fg[i] = inst.fg[i] ? T{1} : T{0};
      bg[i] = T{1} - fg[i];
    }
    const Var<T> d = sqrt(sq_dist_last(inst.pixels, repeat_rows(inst.center, n)));
    const Var<T> pull = relu(d - static_cast<T>(margins.delta_a));
    const Var<T> push = relu(static_cast<T>(margins.delta_b) - d);
    const Var<T> per_pixel = add(mul(mul(pull, pull), Var<T>::constant(fg)), mul(mul(push, push), Var<T>::constant(bg)));
    total = add(total, sum(per_pixel) * (T{1} / static_cast<T>(n)));
  }
  return total * (T{1} / static_cast<T>(instances.size()));
}

// ---- Lovász hinge ----------------------------------------------------------------

/// Gradient of the Lovász extension of the Jaccard loss for labels already
/// sorted by descending error.
inline std::vector<double> lovasz_grad(const std::vector<std::uint8_t>& sorted_gt) {
  const std::size_t n = sorted_gt.size();
  std::vector<double> w(n, 0.0);
  double positives = 0;
  for (auto g : sorted_gt) positives += g ? 1.0 : 0.0;
  if (positives == 0) return w;
  double cum_pos = 0, cum_neg = 0, prev = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (sorted_gt[j]) cum_pos += 1; else cum_neg += 1;
    const double inter = positives - cum_pos;
    const double uni = positives + cum_neg;
    const double jac = 1.0 - inter / uni;
    w[j] = j == 0 ? jac : jac - prev;
    prev = jac;
  }
  return w;
}

/// Descending order of `errors`, ties broken by ascending index.
template <typename T>
std::vector<std::size_t> descending_order(std::span<const T> errors) {
  std::vector<std::size_t> order(errors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return errors[a] > errors[b]; });
  for (std::size_t i : order) detail::record_branch(i);
  return order;
}

/// Lovász hinge over one pixel set. Scores are s = 2 phi - 1, labels map to
/// y = +-1, errors are [1 - s y]_+. The sort permutation is held fixed in the
/// backward pass.
template <typename T>
Var<T> lovasz_hinge(const Var<T>& phi, const std::vector<std::uint8_t>& gt) {
  const std::size_t n = phi.numel();
  if (gt.size() != n) {
    throw ShapeError("lovasz_hinge: " + std::to_string(n) + " probabilities vs " + std::to_string(gt.size()) + " labels");
  }
  if (n == 0) throw ShapeError("lovasz_hinge: empty pixel set");
  Tensor<T> signs(Shape{n});
  for (std::size_t i = 0; i < n; ++i) signs[i] = gt[i] ? T{1} : T{-1};
  const Var<T> scores = reshape(phi, Shape{n}) * T{2} - T{1};
  const Var<T> errors = relu(T{1} - mul(scores, Var<T>::constant(signs)));
  const auto order = descending_order<T>(errors.value().values());
  std::vector<std::uint8_t> gt_sorted(n);
  for (std::size_t i = 0; i < n; ++i) gt_sorted[i] = gt[order[i]];
  const auto weights = lovasz_grad(gt_sorted);
  Tensor<T> wt(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) wt[i] = static_cast<T>(weights[i]);
  const Var<T> sorted = gather_rows(reshape(errors, Shape{n, 1}), order);
  return sum(mul(sorted, Var<T>::constant(wt)));
}

// ---- mask loss -------------------------------------------------------------------

enum class MarginKind { sigma, precision };

template <typename T>
struct MaskInstance {
  Var<T> pixels;                 // [N, D]
  std::vector<std::uint8_t> gt;  // N labels
  Var<T> center;                 // [1, D]
  Var<T> margin;                 // scalar: Sigma or a = 1/(2 Sigma^2) per `kind`
  MarginKind kind = MarginKind::sigma;
};

template <typename T>
Var<T> coupling_probability(const MaskInstance<T>& inst) {
  return inst.kind == MarginKind::sigma ? gaussian_phi(inst.pixels, inst.center, inst.margin)
                                        : gaussian_phi_precision(inst.pixels, inst.center, inst.margin);
}

/// Mean over instances of the Lovász hinge of phi over each supervised set.
template <typename T>
Var<T> mask_loss(const std::vector<MaskInstance<T>>& instances) {
  if (instances.empty()) {
    warn("mask_loss: empty instance list, loss defined as 0");
    return Var<T>::constant(T{0});
  }
  Var<T> total = Var<T>::constant(T{0});
  for (const auto& inst : instances) total = add(total, lovasz_hinge(coupling_probability(inst), inst.gt));
  return total * (T{1} / static_cast<T>(instances.size()));
}

// ---- center averaging and smooth loss ------------------------------------------

template <typename T>
struct AggregatedCenter {
  Var<T> Q;       // [1, D]
  Var<T> margin;  // [1, 1]
};

/// Q = mean of q_j, margin = mean of the per-sample margins.
template <typename T>
AggregatedCenter<T> aggregate_center(const Var<T>& q_samples, const Var<T>& margin_samples) {
  if (q_samples.shape().size() != 2 || q_samples.shape()[0] == 0) {
    throw std::invalid_argument("aggregate_center: empty sample set");
  }
  if (margin_samples.shape() != Shape{q_samples.shape()[0], 1}) {
    throw ShapeError("aggregate_center: margins " + to_string(margin_samples.shape()) + " do not match samples " +
                     to_string(q_samples.shape()));
  }
  return {row_mean(q_samples), row_mean(margin_samples)};
}

inline ClusterCenter aggregate_center(const std::vector<std::vector<double>>& q, const std::vector<double>& sigma) {
  if (q.empty() || q.size() != sigma.size()) throw std::invalid_argument("aggregate_center: empty or mismatched samples");
  ClusterCenter c;
  c.Q.assign(q.front().size(), 0.0);
  for (const auto& row : q) {
    if (row.size() != c.Q.size()) throw ShapeError("aggregate_center: ragged sample dimensions");
    for (std::size_t k = 0; k < row.size(); ++k) c.Q[k] += row[k];
  }
  for (auto& v : c.Q) v /= static_cast<double>(q.size());
  c.sigma = std::accumulate(sigma.begin(), sigma.end(), 0.0) / static_cast<double>(sigma.size());
  c.source = CenterSource::averaged_training;
  return c;
}

template <typename T>
struct SmoothInstance {
  Var<T> q_samples;       // [m, D]
  Var<T> margin_samples;  // [m, 1]; ignored when the margin term is off
  AggregatedCenter<T> center;
};

/// Mean over instances of the per-instance mean ||q_j - Q_k||^2, plus (when
/// `with_margin_term`) the same for the margins.
template <typename T>
Var<T> smooth_loss(const std::vector<SmoothInstance<T>>& instances, bool with_margin_term = true) {
  if (instances.empty()) {
    warn("smooth_loss: empty instance list, loss defined as 0");
    return Var<T>::constant(T{0});
  }
  Var<T> q_term = Var<T>::constant(T{0});
  Var<T> m_term = Var<T>::constant(T{0});
  for (const auto& inst : instances) {
    const std::size_t m = inst.q_samples.shape().at(0);
    q_term = add(q_term, mean(sq_dist_last(inst.q_samples, repeat_rows(inst.center.Q, m))));
    if (with_margin_term) {
      const Var<T> dev = sub(inst.margin_samples, reshape(inst.center.margin, Shape{}));
      m_term = add(m_term, mean(mul(dev, dev)));
    }
  }
  const T inv_k = T{1} / static_cast<T>(instances.size());
  return with_margin_term ? add(q_term * inv_k, m_term * inv_k) : q_term * inv_k;
}

}  // namespace embedmask

#pragma once

// Finite-difference checks of every loss gradient at randomized, non-degenerate
// 64-bit points: hinge, coupling probability, mask loss, smooth loss and the
// full objective through a small network.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "embedmask/coupling.hpp"
#include "embedmask/gradcheck.hpp"
#include "embedmask/losses.hpp"
#include "embedmask/model.hpp"
#include "embedmask/rng.hpp"

namespace embedmask {

struct GradSuiteResult {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t trials = 0;
  bool pass = false;
};

inline const std::vector<std::string>& gradcheck_names() {
  static const std::vector<std::string> n = {"hinge", "phi", "mask_loss", "smooth", "total"};
  return n;
}

namespace detail {

inline Tensor<double> uniform_tensor(Pcg32& rng, Shape shape, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

struct CouplingPoint {
  Tensor<double> pixels, center, margin;
  std::vector<std::uint8_t> gt;
};

/// Random pixels around a center, resampled until no distance sits within
/// `gap` of any value in `kinks` and the Lovász errors are pairwise separated.
inline CouplingPoint coupling_point(Pcg32& rng, std::size_t n, std::size_t d, const std::vector<double>& kinks) {
  for (;;) {
    CouplingPoint p{uniform_tensor(rng, Shape{n, d}, -1, 1), uniform_tensor(rng, Shape{1, d}, -0.5, 0.5),
                    Tensor<double>::scalar(rng.uniform(0.4, 1.5)), std::vector<std::uint8_t>(n)};
    bool any = false;
    for (auto& g : p.gt) any |= (g = rng.uniform() < 0.5) != 0;
    if (!any) p.gt[0] = 1;
    const double sigma = p.margin[0];
    std::vector<double> errs;
    bool ok = true;
    for (std::size_t i = 0; i < n; ++i) {
      double d2 = 0;
      for (std::size_t k = 0; k < d; ++k) d2 += (p.pixels[i * d + k] - p.center[k]) * (p.pixels[i * d + k] - p.center[k]);
      for (double kink : kinks) ok &= std::abs(std::sqrt(d2) - kink) > 1e-3;
      const double phi = std::exp(-d2 / (2 * sigma * sigma));
      errs.push_back(p.gt[i] ? 2 - 2 * phi : 2 * phi);
      ok &= phi > 1e-6 && phi < 1 - 1e-6;
    }
    std::sort(errs.begin(), errs.end());
    for (std::size_t i = 1; i < errs.size(); ++i) ok &= errs[i] - errs[i - 1] > 1e-3;
    if (ok) return p;
  }
}

inline GradSuiteResult finish(std::string name, double worst, double tol, std::size_t trials) {
  return {std::move(name), worst, tol, trials, worst < tol};
}

}  // namespace detail

inline GradSuiteResult gradcheck_hinge(std::size_t trials = 20, std::uint64_t seed = 1) {
  Pcg32 rng(derive_seed(seed, 1));
  const MarginConfig m;
  double worst = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto p = detail::coupling_point(rng, 16, 4, {m.delta_a, m.delta_b});
    const auto r = finite_diff_check(
        [&](const std::vector<Var<double>>& in) { return hinge_loss<double>({{in[0], p.gt, in[1]}}, m); },
        {p.pixels, p.center}, 1e-5);
    worst = std::max(worst, r.max_rel_error);
  }
  return detail::finish("hinge", worst, 1e-4, trials);
}

inline GradSuiteResult gradcheck_phi(std::size_t trials = 20, std::uint64_t seed = 1) {
  Pcg32 rng(derive_seed(seed, 2));
  double worst = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto p = detail::coupling_point(rng, 8, 4, {});
    const Tensor<double> proj = detail::uniform_tensor(rng, Shape{8}, 0.5, 1.5);
    const auto r = finite_diff_check(
        [&](const std::vector<Var<double>>& in) {
          return sum(mul(gaussian_phi(in[0], in[1], in[2]), Var<double>::constant(proj)));
        },
        {p.pixels, p.center, p.margin}, 1e-5);
    worst = std::max(worst, r.max_rel_error);
  }
  return detail::finish("phi", worst, 1e-4, trials);
}

inline GradSuiteResult gradcheck_mask_loss(std::size_t trials = 20, std::uint64_t seed = 1) {
  Pcg32 rng(derive_seed(seed, 3));
  double worst = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto p = detail::coupling_point(rng, 25, 4, {});
    const Tensor<double> a = Tensor<double>::scalar(precision_from_sigma(p.margin[0]));
    const auto r = finite_diff_check(
        [&](const std::vector<Var<double>>& in) {
          return mask_loss<double>({{in[0], p.gt, in[1], in[2], MarginKind::precision}});
        },
        {p.pixels, p.center, a}, 1e-5);
    worst = std::max(worst, r.max_rel_error);
  }
  return detail::finish("mask_loss", worst, 1e-4, trials);
}

inline GradSuiteResult gradcheck_smooth(std::size_t trials = 20, std::uint64_t seed = 1) {
  Pcg32 rng(derive_seed(seed, 4));
  double worst = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t m = 2 + static_cast<std::size_t>(rng.uniform_int(0, 5));
    const Tensor<double> q = detail::uniform_tensor(rng, Shape{m, 4}, -1, 1);
    const Tensor<double> a = detail::uniform_tensor(rng, Shape{m, 1}, 0.2, 2.0);
    const auto r = finite_diff_check(
        [](const std::vector<Var<double>>& in) {
          return smooth_loss<double>({{in[0], in[1], aggregate_center(in[0], in[1])}});
        },
        {q, a}, 1e-5);
    worst = std::max(worst, r.max_rel_error);
  }
  return detail::finish("smooth", worst, 1e-4, trials);
}

/// Small network and 32 x 32 scene used for the end-to-end check.
struct CompositeCase {
  ModelParams<double> params;
  Scene scene;
  SceneTargets targets;
  TrainConfig train;
};

inline constexpr double kCompositeBias = 0.1;

inline CompositeCase composite_case(std::uint64_t seed) {
  SceneSpec spec;
  spec.height = spec.width = 32;
  spec.min_count = 1;
  spec.max_count = 2;
  spec.min_size = 10;
  spec.max_size = 16;
  ModelConfig mc;
  mc.width = 4;
  mc.embed_dim = 4;
  TrainConfig tc;
  for (std::uint64_t attempt = 0;; ++attempt) {
    CompositeCase c;
    c.train = tc;
    c.scene = generate_scene(derive_seed(seed, attempt), spec);
    c.params = init_params<double>(derive_seed(seed, 1000 + attempt), mc);
    // Spread the output layers so every head contributes a non-trivial gradient,
    // and move biases off zero: with zero biases, units whose receptive field
    // is entirely dead sit exactly on the relu kink.
    Pcg32 rng(derive_seed(seed, 2000 + attempt));
    for (std::size_t i = 0; i < c.params.size(); ++i) {
      const std::string& n = c.params.names[i];
      const bool head = n.rfind("q.", 0) == 0 || n.rfind("cls.", 0) == 0 || n.rfind("centerness.", 0) == 0 ||
                        n.rfind("margin.", 0) == 0;
      const bool bias = n.size() > 5 && n.compare(n.size() - 5, 5, ".bias") == 0;
      if (head) {
        for (auto& v : c.params.tensors[i].values()) v += 0.2 * rng.normal();
      }
      if (bias) {
        for (auto& v : c.params.tensors[i].values()) v += kCompositeBias + 0.05 * rng.normal();
      }
      // The rare-positive prior leaves focal gradients near 1e-10, below what
      // central differences resolve at 64-bit.
      if (n == "cls.bias") {
        for (auto& v : c.params.tensors[i].values()) v = rng.normal();
      }
    }
    c.targets = make_scene_targets(c.scene, mc, tc);
    auto out = forward(c.scene.image.cast<double>(), c.params);
    // Shift the margin so a * d^2 is about 1 on average: a saturated coupling
    // leaves the pixel branch with gradients too small to difference.
    const auto sets = embed_sets_for(out, c.scene, c.targets);
    double ad2 = 0;
    std::size_t n = 0;
    const std::size_t d = mc.embed_dim;
    for (std::size_t k = 0; k < sets.size(); ++k) {
      for (std::size_t g : sets[k]) {
        for (std::size_t e : c.targets.pixel_sets[k].index) {
          double d2 = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const double diff = out.pixel.value()[e * d + j] - out.q.value()[g * d + j];
            d2 += diff * diff;
          }
          ad2 += out.precision.value()[g] * d2;
          ++n;
        }
      }
    }
    if (n == 0) continue;
    c.params.tensors[c.params.index_of("margin.bias")][0] -= std::log(ad2 / static_cast<double>(n));
    out = forward(c.scene.image.cast<double>(), c.params);
    const auto loss = total_loss(out, c.scene, c.targets, tc);
    if (loss.breakdown.skipped < loss.breakdown.instances && loss.breakdown.positives > 0) return c;
  }
}

inline constexpr double kCompositeStep = 3e-4;

inline GradSuiteResult gradcheck_total(std::size_t trials = 20, std::uint64_t seed = 1) {
  double worst = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const CompositeCase c = composite_case(derive_seed(seed, 100 + t));
    const Tensor<double> image = c.scene.image.cast<double>();
    // The proposal sets are a sampling decision; hold them at the base point.
    const auto sets = embed_sets_for(forward(image, c.params), c.scene, c.targets);
    const auto r = finite_diff_check(
        [&](const std::vector<Var<double>>& in) {
          return total_loss(forward(image, in, c.params.config), c.scene, c.targets, c.train, &sets).total;
        },
        c.params.tensors, kCompositeStep, FiniteDiffOptions{true, 3});
    worst = std::max(worst, r.max_rel_error);
  }
  return detail::finish("total", worst, 1e-3, trials);
}

inline GradSuiteResult run_gradcheck(const std::string& which, std::size_t trials = 20, std::uint64_t seed = 1) {
  if (which == "hinge") return gradcheck_hinge(trials, seed);
  if (which == "phi") return gradcheck_phi(trials, seed);
  if (which == "mask_loss") return gradcheck_mask_loss(trials, seed);
  if (which == "smooth") return gradcheck_smooth(trials, seed);
  if (which == "total") return gradcheck_total(trials, seed);
  throw std::invalid_argument("unknown gradient check '" + which + "'");
}

}  // namespace embedmask

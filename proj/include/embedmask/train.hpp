#pragma once

// Momentum SGD with linear warmup and a single step decay, and the training
// loop. Per-scene forward/backward passes may run on worker threads; gradients
// are reduced in batch order so results do not depend on the thread count.

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <thread>
#include <vector>

#include "embedmask/config.hpp"
#include "embedmask/losses.hpp"
#include "embedmask/model.hpp"
#include "embedmask/rng.hpp"
#include "json.hpp"

namespace embedmask {

/// base_lr * min(1, iter / warmup), divided by 10 from 2/3 of the schedule on.
inline double learning_rate(std::size_t iter, const TrainConfig& cfg) {
  double lr = cfg.lr;
  if (cfg.warmup_iters > 0) lr *= std::min(1.0, static_cast<double>(iter) / static_cast<double>(cfg.warmup_iters));
  if (3 * iter >= 2 * cfg.total_iters) lr *= 0.1;
  return lr;
}

template <typename T>
struct SgdState {
  std::vector<Tensor<T>> velocity;
  std::size_t skipped = 0;
};

/// One momentum-SGD update. Returns false (and leaves params untouched) when
/// any gradient is non-finite.
template <typename T>
bool sgd_step(ModelParams<T>& params, const std::vector<Tensor<T>>& grads, std::size_t iter, const TrainConfig& cfg,
              SgdState<T>& state) {
  if (grads.size() != params.size()) throw ShapeError("sgd_step: gradient count does not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape() != params.tensors[i].shape()) {
      throw ShapeError("sgd_step: gradient shape " + to_string(grads[i].shape()) + " does not match " +
                       params.names[i] + " " + to_string(params.tensors[i].shape()));
    }
  }
  double sq = 0;
  for (const auto& g : grads) {
    for (T v : g.values()) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  if (!std::isfinite(sq)) {
    ++state.skipped;
    return false;
  }
  if (state.velocity.empty()) {
    for (const auto& p : params.tensors) state.velocity.emplace_back(p.shape());
  }
  const double norm = std::sqrt(sq);
  const T clip = cfg.grad_clip > 0 && norm > cfg.grad_clip ? static_cast<T>(cfg.grad_clip / norm) : T{1};
  const T lr = static_cast<T>(learning_rate(iter, cfg));
  const T mom = static_cast<T>(cfg.momentum), wd = static_cast<T>(cfg.weight_decay);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto p = params.tensors[i].values();
    auto v = state.velocity[i].values();
    auto g = grads[i].values();
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = mom * v[k] + clip * g[k] + wd * p[k];
      p[k] -= lr * v[k];
    }
  }
  return true;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct SceneGradient {
  std::vector<Tensor<float>> grads;
  LossBreakdown breakdown;
};

template <typename T>
SceneLoss<T> scene_objective(const ModelParams<T>& params, const std::vector<Var<T>>& vars, const Scene& scene,
                             const SceneTargets& targets, const TrainConfig& cfg) {
  const HeadOutputs<T> out = forward(scene.image.cast<T>(), vars, params.config);
  return total_loss(out, scene, targets, cfg);
}

inline SceneGradient scene_gradient(const ModelParams<float>& params, const Scene& scene, const SceneTargets& targets,
                                    const TrainConfig& cfg) {
  Tape<float> tape;
  const auto vars = bind(tape, params);
  SceneLoss<float> loss = scene_objective(params, vars, scene, targets, cfg);
  tape.backward(loss.total);
  SceneGradient r;
  r.breakdown = loss.breakdown;
  for (const auto& v : vars) r.grads.push_back(v.grad());
  return r;
}

struct TrainResult {
  ModelParams<float> params;
  std::size_t skipped_steps = 0;
  LossBreakdown last;
  bool diverged = false;
};

struct TrainOptions {
  std::size_t threads = 1;
  std::ostream* log = nullptr;                                         // JSON lines
  std::function<void(std::size_t iter, const LossBreakdown&)> progress;  // optional
};

inline TrainResult train(const RunConfig& cfg, const std::vector<Scene>& scenes, const TrainOptions& opt = {}) {
  cfg.validate();
  if (scenes.empty()) throw std::invalid_argument("train: no training scenes");
  const TrainConfig& tc = cfg.train;
  TrainResult result;
  result.params = init_params<float>(cfg.seed, cfg.model);
  SgdState<float> state;

  std::vector<SceneTargets> targets;
  targets.reserve(scenes.size());
  for (const auto& s : scenes) targets.push_back(make_scene_targets(s, cfg.model, tc));

  Pcg32 order_rng(derive_seed(cfg.seed, 0x0BA7C4));
  std::vector<std::size_t> order(scenes.size());
  std::size_t cursor = order.size();
  auto next_scene = [&] {
    if (cursor == order.size()) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
      }
      cursor = 0;
    }
    return order[cursor++];
  };

  std::vector<SceneGradient> work(tc.batch);
  std::vector<std::size_t> batch(tc.batch);
  std::size_t consecutive_skips = 0;
  for (std::size_t iter = 0; iter < tc.total_iters; ++iter) {
    for (auto& b : batch) b = next_scene();
    bool aborted = false;
    LossBreakdown bad;
    try {
      parallel_for(tc.batch, opt.threads, [&](std::size_t i) {
        work[i] = scene_gradient(result.params, scenes[batch[i]], targets[batch[i]], tc);
      });
    } catch (const NonFiniteLossError& e) {
      aborted = true;
      bad = e.breakdown();
    }

    LossBreakdown mean;
    bool stepped = false;
    if (!aborted) {
      std::vector<Tensor<float>> grads = work[0].grads;
      mean = work[0].breakdown;
      for (std::size_t i = 1; i < tc.batch; ++i) {
        mean += work[i].breakdown;
        for (std::size_t p = 0; p < grads.size(); ++p) {
          auto dst = grads[p].values();
          auto src = work[i].grads[p].values();
          for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        }
      }
      const float inv = 1.0f / static_cast<float>(tc.batch);
      for (auto& g : grads)
        for (auto& v : g.values()) v *= inv;
      mean = mean.scaled(1.0 / static_cast<double>(tc.batch));
      mean.positives = mean.positives / tc.batch;
      mean.instances = mean.instances / tc.batch;
      stepped = sgd_step(result.params, grads, iter, tc, state);
    }
    if (!stepped) {
      ++result.skipped_steps;
      ++consecutive_skips;
    } else {
      consecutive_skips = 0;
      result.last = mean;
    }

    if (opt.log && (iter % tc.log_every == 0 || iter + 1 == tc.total_iters || !stepped)) {
      nlohmann::json line = {{"iter", iter},
                             {"lr", learning_rate(iter, tc)},
                             {"breakdown", to_json(aborted ? bad : mean)},
                             {"skipped", (aborted ? bad : mean).skipped},
                             {"step_skipped", !stepped}};
      *opt.log << line.dump() << '\n';
    }
    if (opt.progress) opt.progress(iter, aborted ? bad : mean);
    if (consecutive_skips >= 50) {
      result.diverged = true;
      break;
    }
  }
  if (!result.params.all_finite()) result.diverged = true;
  return result;
}

}  // namespace embedmask

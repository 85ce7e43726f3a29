#pragma once

// Training objective: focal classification, center-ness BCE and -ln(IoU) box
// regression on the proposal grid, plus the embedding losses on the
// pixel-embedding map, combined into one weighted total.

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "embedmask/config.hpp"
#include "embedmask/coupling.hpp"
#include "embedmask/model.hpp"
#include "embedmask/sampling.hpp"
#include "json.hpp"

namespace embedmask {

inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kFocalGamma = 2.0;  // the focal term below is written for gamma = 2

struct LossBreakdown {
  double cls = 0, center = 0, box = 0, mask = 0, smooth = 0, total = 0;
  std::size_t positives = 0;
  std::size_t instances = 0;
  std::size_t skipped = 0;  // instances without usable proposal samples this step

  bool all_finite() const {
    return std::isfinite(cls) && std::isfinite(center) && std::isfinite(box) && std::isfinite(mask) &&
           std::isfinite(smooth) && std::isfinite(total);
  }

  LossBreakdown& operator+=(const LossBreakdown& o) {
    cls += o.cls, center += o.center, box += o.box, mask += o.mask, smooth += o.smooth, total += o.total;
    positives += o.positives, instances += o.instances, skipped += o.skipped;
    return *this;
  }
  LossBreakdown scaled(double f) const {
    LossBreakdown b = *this;
    b.cls *= f, b.center *= f, b.box *= f, b.mask *= f, b.smooth *= f, b.total *= f;
    return b;
  }
};

inline nlohmann::json to_json(const LossBreakdown& b) {
  return {{"cls", b.cls},       {"center", b.center},       {"box", b.box},
          {"mask", b.mask},     {"smooth", b.smooth},       {"total", b.total},
          {"positives", b.positives}, {"instances", b.instances}, {"skipped", b.skipped}};
}

class NonFiniteLossError : public std::runtime_error {
 public:
  explicit NonFiniteLossError(const LossBreakdown& b)
      : std::runtime_error("non-finite loss: " + to_json(b).dump()), breakdown_(b) {}
  const LossBreakdown& breakdown() const noexcept { return breakdown_; }

 private:
  LossBreakdown breakdown_;
};

/// Parameter-independent targets of one scene, computed once and reused.
struct SceneTargets {
  DetectionTargets detection;
  GridSpec embed_grid;
  std::vector<PixelSet> pixel_sets;  // per instance
};

inline SceneTargets make_scene_targets(const Scene& scene, const ModelConfig& model, const TrainConfig& train) {
  const std::size_t h = scene.image.extent(0), w = scene.image.extent(1);
  const std::size_t s = ModelConfig::kFeatureStride;
  SceneTargets t;
  t.detection = sample_detection_targets(GridSpec{h / s, w / s, s}, scene.instances, train.radius_factor);
  t.embed_grid = GridSpec{h / model.embed_stride, w / model.embed_stride, model.embed_stride};
  for (const auto& inst : scene.instances) t.pixel_sets.push_back(pixel_supervision_set(inst, train.expand_factor, t.embed_grid));
  return t;
}

template <typename T>
struct DetectionLosses {
  Var<T> cls, center, box;
  bool no_positives = false;
};

template <typename T>
DetectionLosses<T> detection_losses(const HeadOutputs<T>& out, const DetectionTargets& det,
                                    const std::vector<InstanceTarget>& instances) {
  const std::size_t g = out.locations();
  const std::size_t c = out.cls.shape().at(1);
  if (det.grid.size() != g) throw ShapeError("detection_losses: target grid does not match outputs");
  const std::size_t npos = det.positives.size();
  const T norm = T{1} / static_cast<T>(std::max<std::size_t>(1, npos));

  Tensor<T> onehot(Shape{g, c}), offhot(Shape{g, c}, T{1});
  for (std::size_t i = 0; i < g; ++i) {
    if (det.assigned[i] == DetectionTargets::kNone) continue;
    const auto k = static_cast<std::size_t>(instances.at(static_cast<std::size_t>(det.assigned[i])).category);
    onehot[i * c + k] = T{1};
    offhot[i * c + k] = T{0};
  }
  const Var<T>& x = out.cls;
  const Var<T> p = sigmoid(x), q = sigmoid(neg(x));
  const Var<T> pos = mul(mul(q, q), log_sigmoid(x)) * static_cast<T>(-kFocalAlpha);
  const Var<T> negt = mul(mul(p, p), log_sigmoid(neg(x))) * static_cast<T>(-(1 - kFocalAlpha));
  DetectionLosses<T> d;
  d.cls = sum(add(mul(pos, Var<T>::constant(onehot)), mul(negt, Var<T>::constant(offhot)))) * norm;
  d.no_positives = npos == 0;
  if (npos == 0) {
    d.center = Var<T>::constant(T{0});
    d.box = Var<T>::constant(T{0});
    return d;
  }

  Tensor<T> ct(Shape{npos, 1}), ctn(Shape{npos, 1}), box_t(Shape{npos, 4}), area_t(Shape{npos, 1});
  for (std::size_t i = 0; i < npos; ++i) {
    ct[i] = static_cast<T>(det.centerness[i]);
    ctn[i] = T{1} - ct[i];
    const Ltrb& l = det.ltrb[i];
    box_t[4 * i] = static_cast<T>(l.l), box_t[4 * i + 1] = static_cast<T>(l.t);
    box_t[4 * i + 2] = static_cast<T>(l.r), box_t[4 * i + 3] = static_cast<T>(l.b);
    area_t[i] = static_cast<T>((l.l + l.r) * (l.t + l.b));
  }
  const Var<T> cx = gather_rows(out.centerness, det.positives);
  d.center = neg(sum(add(mul(log_sigmoid(cx), Var<T>::constant(ct)), mul(log_sigmoid(neg(cx)), Var<T>::constant(ctn))))) * norm;

  const Var<T> pb = gather_rows(out.box, det.positives);
  auto col = [](const Var<T>& v, std::size_t k) { return slice_last(v, k, k + 1); };
  const Var<T> area_p = mul(add(col(pb, 0), col(pb, 2)), add(col(pb, 1), col(pb, 3)));
  const Var<T> m = min_const(pb, box_t);
  const Var<T> inter = mul(add(col(m, 0), col(m, 2)), add(col(m, 1), col(m, 3)));
  const Var<T> uni = sub(add(area_p, Var<T>::constant(area_t)), inter);
  d.box = neg(sum(log(div(inter, uni)))) * norm;
  return d;
}

/// Embedding-map pixel under proposal location g.
inline std::size_t embed_index_of_location(const DetectionTargets& det, const GridSpec& embed, std::size_t g) {
  const auto ex = static_cast<std::size_t>(det.grid.x(g) / static_cast<double>(embed.stride));
  const auto ey = static_cast<std::size_t>(det.grid.y(g) / static_cast<double>(embed.stride));
  return std::min(ey, embed.height - 1) * embed.width + std::min(ex, embed.width - 1);
}

template <typename T>
struct SceneLoss {
  Var<T> total;
  LossBreakdown breakdown;
};

/// Proposal locations feeding each instance's cluster center (IoU-filtered
/// detection positives). Selection is not differentiated through.
template <typename T>
std::vector<std::vector<std::size_t>> embed_sets_for(const HeadOutputs<T>& out, const Scene& scene,
                                                     const SceneTargets& targets) {
  return sample_embed_targets(targets.detection, out.box.value(), scene.instances);
}

/// Full objective for one scene: cls + center + box + lambda1 * mask + lambda2 * smooth.
/// `fixed_sets` pins the proposal sets instead of sampling them from the
/// current box predictions.
template <typename T>
SceneLoss<T> total_loss(const HeadOutputs<T>& out, const Scene& scene, const SceneTargets& targets,
                        const TrainConfig& cfg, const std::vector<std::vector<std::size_t>>* fixed_sets = nullptr) {
  const auto det = detection_losses(out, targets.detection, scene.instances);
  const auto embed_sets = fixed_sets ? *fixed_sets : embed_sets_for(out, scene, targets);
  if (embed_sets.size() != scene.instances.size()) throw ShapeError("total_loss: one proposal set per instance required");

  std::vector<MaskInstance<T>> masks;
  std::vector<HingeInstance<T>> hinges;
  std::vector<SmoothInstance<T>> smooths;
  LossBreakdown b;
  b.positives = targets.detection.positives.size();
  b.instances = scene.instances.size();
  for (std::size_t k = 0; k < scene.instances.size(); ++k) {
    const auto& mk = embed_sets[k];
    const auto& bk = targets.pixel_sets[k];
    if (mk.empty() || bk.index.empty()) {
      ++b.skipped;
      continue;
    }
    Var<T> q_samples;
    if (cfg.center_mode == CenterMode::proposal) {
      q_samples = gather_rows(out.q, mk);
    } else {
      std::vector<std::size_t> idx;
      for (std::size_t g : mk) idx.push_back(embed_index_of_location(targets.detection, targets.embed_grid, g));
      q_samples = gather_rows(out.pixel, idx);
    }
    const Var<T> a_samples = gather_rows(out.precision, mk);
    const AggregatedCenter<T> center = aggregate_center(q_samples, a_samples);
    const Var<T> pixels = gather_rows(out.pixel, bk.index);
    switch (cfg.margin_mode) {
      case MarginMode::learnable:
        masks.push_back({pixels, bk.fg, center.Q, center.margin, MarginKind::precision});
        break;
      case MarginMode::constant:
        masks.push_back({pixels, bk.fg, center.Q, Var<T>::constant(static_cast<T>(cfg.sigma0)), MarginKind::sigma});
        break;
      case MarginMode::fixed_hinge:
        hinges.push_back({pixels, bk.fg, center.Q});
        break;
    }
    smooths.push_back({q_samples, a_samples, center});
  }

  const bool margin_term = cfg.margin_mode == MarginMode::learnable;
  Var<T> mask = Var<T>::constant(T{0}), smooth = Var<T>::constant(T{0});
  if (!smooths.empty()) {
    mask = cfg.margin_mode == MarginMode::fixed_hinge ? hinge_loss(hinges, cfg.margins) : mask_loss(masks);
    smooth = smooth_loss(smooths, margin_term);
  }

  SceneLoss<T> r;
  r.total = add(add(add(det.cls, det.center), det.box),
                add(mask * static_cast<T>(cfg.lambda1), smooth * static_cast<T>(cfg.lambda2)));
  b.cls = det.cls.item();
  b.center = det.center.item();
  b.box = det.box.item();
  b.mask = mask.item();
  b.smooth = smooth.item();
  b.total = r.total.item();
  r.breakdown = b;
  if (!b.all_finite()) throw NonFiniteLossError(b);
  return r;
}

}  // namespace embedmask

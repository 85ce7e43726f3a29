#pragma once

// Inference: detection scoring, per-category greedy NMS, and mask extraction by
// thresholding the coupling between each survivor's proposal embedding and the
// pixel-embedding map.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "embedmask/config.hpp"
#include "embedmask/coupling.hpp"
#include "embedmask/geometry.hpp"
#include "embedmask/model.hpp"
#include "embedmask/sampling.hpp"

namespace embedmask {

struct Detection {
  std::size_t location = 0;
  std::size_t category = 0;
  double score = 0;
  Box box;
};

struct PredictedInstance {
  Box box;
  Category category = Category::circle;
  double score = 0;
  BitMask mask;
  std::size_t location = 0;
  double sigma = 0;  // coupling margin used for the mask
};

inline double sigmoid_value(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// Every (location, category) pair scoring at least `score_thresh`, with
/// score = sigmoid(category logit) * sigmoid(center-ness logit).
template <typename T>
std::vector<Detection> score_detections(const HeadOutputs<T>& out, double score_thresh, double image_h, double image_w) {
  std::vector<Detection> dets;
  const std::size_t c = out.cls.shape().at(1);
  const auto& cls = out.cls.value();
  const auto& ctr = out.centerness.value();
  const auto& box = out.box.value();
  for (std::size_t g = 0; g < out.locations(); ++g) {
    const double cs = sigmoid_value(static_cast<double>(ctr[g]));
    const auto [x, y] = out.location_xy(g);
    for (std::size_t k = 0; k < c; ++k) {
      const double score = sigmoid_value(static_cast<double>(cls[g * c + k])) * cs;
      if (score < score_thresh) continue;
      Box b = decode_box(x, y, box[4 * g], box[4 * g + 1], box[4 * g + 2], box[4 * g + 3]);
      b = Box{std::clamp(b.x1, 0.0, image_w), std::clamp(b.y1, 0.0, image_h), std::clamp(b.x2, 0.0, image_w),
              std::clamp(b.y2, 0.0, image_h)};
      dets.push_back({g, k, score, b});
    }
  }
  return dets;
}

/// Greedy per-category suppression: in descending score order (ties by
/// location index, then category), drop any detection whose box IoU with a
/// kept detection of the same category exceeds `iou_thresh`; keep at most
/// `top_k` overall.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh, std::size_t top_k) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.location != b.location) return a.location < b.location;
    return a.category < b.category;
  });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    if (kept.size() >= top_k) break;
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.category == d.category && box_iou(k.box, d.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

/// Coupling test used at inference for one proposal.
struct MaskRule {
  MarginMode mode = MarginMode::learnable;
  double precision = 1.0;  // a = 1 / (2 Sigma^2), for learnable / constant
  double delta = 0.8;      // fixed_hinge radius

  bool accepts(double d2) const {
    if (mode == MarginMode::fixed_hinge) return std::sqrt(d2) <= delta;
    return std::exp(-precision * d2) >= 0.5;
  }
  double sigma() const { return mode == MarginMode::fixed_hinge ? delta / kHalfProbabilityRadius : sigma_from_precision(precision); }
};

/// Mask at image resolution: the rule is evaluated on the embedding map,
/// upscaled by nearest neighbour, and restricted to pixels whose centers lie
/// inside `box`.
template <typename T>
BitMask extract_mask(const Tensor<T>& pixel, const GridSpec& embed, std::span<const T> Q, const MaskRule& rule,
                     const Box& box) {
  const std::size_t d = Q.size();
  const std::size_t h = embed.height * embed.stride, w = embed.width * embed.stride;
  std::vector<std::uint8_t> decision(embed.size(), 0);
  for (std::size_t e = 0; e < embed.size(); ++e) {
    // Only cells that can reach a pixel inside the box matter.
    const double cx = embed.x(e), cy = embed.y(e), half = 0.5 * static_cast<double>(embed.stride);
    if (cx + half < box.x1 || cx - half > box.x2 || cy + half < box.y1 || cy - half > box.y2) continue;
    double d2 = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = static_cast<double>(pixel[e * d + k]) - static_cast<double>(Q[k]);
      d2 += diff * diff;
    }
    decision[e] = rule.accepts(d2) ? 1 : 0;
  }
  BitMask mask(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (!pixel_center_inside(box, y, x)) continue;
      if (decision[(y / embed.stride) * embed.width + x / embed.stride]) mask.set(y, x);
    }
  }
  return mask;
}

template <typename T>
MaskRule mask_rule_for(const HeadOutputs<T>& out, std::size_t location, const TrainConfig& train) {
  MaskRule r;
  r.mode = train.margin_mode;
  r.delta = train.margins.delta;
  if (train.margin_mode == MarginMode::learnable) {
    r.precision = static_cast<double>(out.precision.value()[location]);
  } else {
    r.precision = precision_from_sigma(train.sigma0);
  }
  return r;
}

template <typename T>
std::vector<PredictedInstance> infer_from_outputs(const HeadOutputs<T>& out, const TrainConfig& train,
                                                  const InferConfig& infer) {
  const std::size_t h = out.embed_h * out.embed_stride, w = out.embed_w * out.embed_stride;
  auto dets = nms(score_detections(out, infer.score_thresh, static_cast<double>(h), static_cast<double>(w)),
                  infer.nms_iou, infer.top_k);
  const GridSpec embed{out.embed_h, out.embed_w, out.embed_stride};
  const std::size_t d = out.q.shape().at(1);
  std::vector<PredictedInstance> result;
  for (const auto& det : dets) {
    const auto q = out.q.value().values().subspan(det.location * d, d);
    const MaskRule rule = mask_rule_for(out, det.location, train);
    PredictedInstance p;
    p.box = det.box;
    p.category = static_cast<Category>(det.category);
    p.score = det.score;
    p.location = det.location;
    p.sigma = rule.sigma();
    p.mask = extract_mask<T>(out.pixel.value(), embed, std::span<const T>(q.data(), q.size()), rule, det.box);
    result.push_back(std::move(p));
  }
  return result;
}

template <typename T>
std::vector<PredictedInstance> infer_masks(const Tensor<T>& image, const ModelParams<T>& params,
                                           const TrainConfig& train, const InferConfig& infer) {
  return infer_from_outputs(forward(image, params), train, infer);
}

}  // namespace embedmask

#pragma once

// Mask AP in the COCO style: greedy per-image matching by mask IoU, 101-point
// interpolated precision, IoU thresholds 0.50:0.95, and small/medium/large
// splits by dataset terciles of ground-truth mask area.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "embedmask/geometry.hpp"
#include "embedmask/infer.hpp"
#include "embedmask/scenes.hpp"
#include "json.hpp"

namespace embedmask {

inline constexpr std::array<double, 10> kIouThresholds = {0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};

struct MatchFlags {
  std::vector<std::uint8_t> tp;       // per prediction, in input order
  std::vector<std::uint8_t> ignored;  // per prediction: matched an ignored gt or out of the area range
};

/// Greedy matching of score-sorted predictions against ground truths of one
/// image and category: each prediction takes the highest-IoU unmatched gt with
/// IoU >= thresh. Non-ignored gts are preferred; a prediction that can only
/// match an ignored gt is itself ignored.
inline MatchFlags match_predictions(const std::vector<BitMask>& preds, const std::vector<BitMask>& gts, double thresh,
                                    const std::vector<std::uint8_t>& gt_ignored = {}) {
  MatchFlags f;
  f.tp.assign(preds.size(), 0);
  f.ignored.assign(preds.size(), 0);
  std::vector<std::uint8_t> taken(gts.size(), 0);
  auto is_ignored = [&](std::size_t j) { return !gt_ignored.empty() && gt_ignored[j]; };
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (int pass = 0; pass < 2; ++pass) {
      double best = thresh;
      std::optional<std::size_t> pick;
      for (std::size_t j = 0; j < gts.size(); ++j) {
        if (taken[j] || is_ignored(j) != (pass == 1)) continue;
        const double iou = mask_iou(preds[i], gts[j]);
        if (iou >= best && (!pick || iou > best)) {
          best = iou;
          pick = j;
        }
      }
      if (pick) {
        taken[*pick] = 1;
        if (pass == 0) f.tp[i] = 1;
        else f.ignored[i] = 1;
        break;
      }
    }
  }
  return f;
}

/// 101-point interpolated AP from score-ordered TP flags.
inline double average_precision(const std::vector<std::uint8_t>& tp_flags, std::size_t total_gt) {
  if (total_gt == 0) return 0.0;
  const std::size_t n = tp_flags.size();
  std::vector<double> precision(n), recall(n);
  double tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += tp_flags[i] ? 1 : 0;
    precision[i] = tp / static_cast<double>(i + 1);
    recall[i] = tp / static_cast<double>(total_gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double acc = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
    if (it != recall.end()) acc += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return acc / 101.0;
}

struct EvalReport {
  double AP = 0, AP50 = 0, AP75 = 0;
  std::array<double, kNumCategories> per_category{};
  std::array<bool, kNumCategories> category_present{};
  double AP_small = 0, AP_medium = 0, AP_large = 0;
  double area_small_max = 0, area_medium_max = 0;  // tercile boundaries in pixels
  std::size_t images = 0, instances = 0, predictions = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t k = 0; k < kNumCategories; ++k) {
    per[category_name(static_cast<Category>(k))] = r.category_present[k] ? nlohmann::json(r.per_category[k]) : nlohmann::json(nullptr);
  }
  return {{"AP", r.AP},
          {"AP50", r.AP50},
          {"AP75", r.AP75},
          {"per_category", per},
          {"AP_small", r.AP_small},
          {"AP_medium", r.AP_medium},
          {"AP_large", r.AP_large},
          {"area_thresholds", {r.area_small_max, r.area_medium_max}},
          {"images", r.images},
          {"instances", r.instances},
          {"predictions", r.predictions}};
}

struct AreaRange {
  double lo = 0, hi = std::numeric_limits<double>::infinity();
  bool contains(double a) const { return a >= lo && a < hi; }
};

namespace detail {

/// Mean AP over categories with ground truth, for each IoU threshold.
inline std::vector<std::vector<double>> ap_table(const std::vector<std::vector<PredictedInstance>>& preds,
                                                 const std::vector<std::vector<InstanceTarget>>& gts,
                                                 const AreaRange& range, std::array<bool, kNumCategories>& present) {
  std::vector<std::vector<double>> table(kNumCategories);  // [category][threshold]
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    std::size_t total = 0;
    for (const auto& img : gts)
      for (const auto& g : img)
        if (static_cast<std::size_t>(g.category) == c && range.contains(static_cast<double>(g.mask.popcount()))) ++total;
    present[c] = total > 0;
    if (!present[c]) continue;
    for (double t : kIouThresholds) {
      struct Scored {
        double score;
        std::size_t order;
        bool tp;
      };
      std::vector<Scored> all;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        std::vector<std::size_t> pi;
        for (std::size_t p = 0; p < preds[i].size(); ++p)
          if (static_cast<std::size_t>(preds[i][p].category) == c) pi.push_back(p);
        std::stable_sort(pi.begin(), pi.end(), [&](std::size_t a, std::size_t b) { return preds[i][a].score > preds[i][b].score; });
        std::vector<BitMask> pm, gm;
        std::vector<std::uint8_t> gi;
        for (std::size_t p : pi) pm.push_back(preds[i][p].mask);
        for (const auto& g : gts[i]) {
          if (static_cast<std::size_t>(g.category) != c) continue;
          gm.push_back(g.mask);
          gi.push_back(range.contains(static_cast<double>(g.mask.popcount())) ? 0 : 1);
        }
        const MatchFlags f = match_predictions(pm, gm, t, gi);
        for (std::size_t k = 0; k < pi.size(); ++k) {
          if (f.ignored[k]) continue;
          if (!f.tp[k] && !range.contains(static_cast<double>(pm[k].popcount()))) continue;
          all.push_back({preds[i][pi[k]].score, all.size(), f.tp[k] != 0});
        }
      }
      std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
      std::vector<std::uint8_t> flags;
      for (const auto& s : all) flags.push_back(s.tp ? 1 : 0);
      table[c].push_back(average_precision(flags, total));
    }
  }
  return table;
}

inline double mean_over(const std::vector<std::vector<double>>& table, const std::array<bool, kNumCategories>& present,
                        std::optional<std::size_t> threshold) {
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    if (!present[c]) continue;
    if (threshold) {
      acc += table[c][*threshold];
    } else {
      acc += std::accumulate(table[c].begin(), table[c].end(), 0.0) / static_cast<double>(table[c].size());
    }
    ++n;
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

}  // namespace detail

/// Evaluates predictions against ground truth, image by image.
inline EvalReport evaluate(const std::vector<std::vector<PredictedInstance>>& preds,
                           const std::vector<std::vector<InstanceTarget>>& gts) {
  if (preds.size() != gts.size()) throw std::invalid_argument("evaluate: prediction and ground-truth image counts differ");
  EvalReport r;
  r.images = gts.size();
  std::vector<double> areas;
  for (const auto& img : gts)
    for (const auto& g : img) areas.push_back(static_cast<double>(g.mask.popcount()));
  for (const auto& img : preds) r.predictions += img.size();
  r.instances = areas.size();
  std::sort(areas.begin(), areas.end());
  if (!areas.empty()) {
    r.area_small_max = areas[areas.size() / 3];
    r.area_medium_max = areas[2 * areas.size() / 3];
  }

  const auto table = detail::ap_table(preds, gts, AreaRange{}, r.category_present);
  r.AP = detail::mean_over(table, r.category_present, std::nullopt);
  r.AP50 = detail::mean_over(table, r.category_present, 0);
  r.AP75 = detail::mean_over(table, r.category_present, 5);
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    if (r.category_present[c]) {
      r.per_category[c] = std::accumulate(table[c].begin(), table[c].end(), 0.0) / static_cast<double>(table[c].size());
    }
  }
  const std::array<AreaRange, 3> ranges = {AreaRange{0, r.area_small_max}, AreaRange{r.area_small_max, r.area_medium_max},
                                           AreaRange{r.area_medium_max, std::numeric_limits<double>::infinity()}};
  std::array<double*, 3> out = {&r.AP_small, &r.AP_medium, &r.AP_large};
  for (std::size_t i = 0; i < 3; ++i) {
    std::array<bool, kNumCategories> present{};
    const auto t = detail::ap_table(preds, gts, ranges[i], present);
    *out[i] = detail::mean_over(t, present, std::nullopt);
  }
  return r;
}

/// Ground truth recast as perfect predictions (score 1).
inline std::vector<PredictedInstance> as_predictions(const std::vector<InstanceTarget>& gts) {
  std::vector<PredictedInstance> out;
  for (const auto& g : gts) out.push_back({g.box, g.category, 1.0, g.mask, 0, 0.0});
  return out;
}

}  // namespace embedmask

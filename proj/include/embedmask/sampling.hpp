#pragma once

// Training-target sampling: detection positives on the proposal grid, the
// box-quality filtered proposal set used for cluster centers, and the pixel
// supervision set of each instance on the embedding map.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "embedmask/geometry.hpp"
#include "embedmask/scenes.hpp"
#include "embedmask/tensor.hpp"

namespace embedmask {

/// Geometry of a stride-s grid laid over an image: cell (gx, gy) covers image
/// pixels [gx*s, (gx+1)*s) x [gy*s, (gy+1)*s) and sits at its block center.
struct GridSpec {
  std::size_t height = 0, width = 0, stride = 1;

  std::size_t size() const { return height * width; }
  double x(std::size_t g) const { return (static_cast<double>(g % width) + 0.5) * static_cast<double>(stride); }
  double y(std::size_t g) const { return (static_cast<double>(g / width) + 0.5) * static_cast<double>(stride); }
};

/// Rasterizes an image-resolution mask onto a grid: a cell is set when at
/// least half of its s x s block is set.
inline BitMask downsample_majority(const BitMask& mask, std::size_t stride) {
  if (stride == 0 || mask.height() % stride != 0 || mask.width() % stride != 0) {
    throw std::invalid_argument("downsample_majority: extents not divisible by stride");
  }
  const std::size_t gh = mask.height() / stride, gw = mask.width() / stride;
  BitMask out(gh, gw);
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      std::size_t n = 0;
      for (std::size_t y = gy * stride; y < (gy + 1) * stride; ++y)
        for (std::size_t x = gx * stride; x < (gx + 1) * stride; ++x) n += mask.at(y, x) ? 1 : 0;
      out.set(gy, gx, 2 * n >= stride * stride);
    }
  }
  return out;
}

inline constexpr double kDefaultRadiusFactor = 1.5;

struct DetectionTargets {
  static constexpr int kNone = -1;

  GridSpec grid;
  std::vector<int> assigned;                       // per location: instance index or kNone
  std::vector<std::size_t> positives;              // locations with an instance, ascending
  std::vector<Ltrb> ltrb;                          // per positive
  std::vector<double> centerness;                  // per positive
  std::vector<std::vector<std::size_t>> per_instance;  // positive locations of each instance
  std::vector<std::size_t> without_positives;      // instance indices that received none
};

/// A location is positive for instance k when it is within radius_factor *
/// stride of the box center (Chebyshev distance, region clipped to the box),
/// strictly inside the box, and on the instance mask rasterized to the grid.
/// Contested locations go to the instance with the smallest box area.
inline DetectionTargets sample_detection_targets(const GridSpec& grid, const std::vector<InstanceTarget>& instances,
                                                 double radius_factor = kDefaultRadiusFactor) {
  if (!(radius_factor > 0)) throw std::invalid_argument("radius_factor must be positive");
  DetectionTargets t;
  t.grid = grid;
  t.assigned.assign(grid.size(), DetectionTargets::kNone);
  t.per_instance.resize(instances.size());
  std::vector<BitMask> grid_masks;
  grid_masks.reserve(instances.size());
  for (const auto& inst : instances) {
    if (inst.mask.height() != grid.height * grid.stride || inst.mask.width() != grid.width * grid.stride) {
      throw ShapeError("sample_detection_targets: instance mask does not match grid extents");
    }
    grid_masks.push_back(downsample_majority(inst.mask, grid.stride));
  }
  const double radius = radius_factor * static_cast<double>(grid.stride);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const double x = grid.x(g), y = grid.y(g);
    double best_area = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < instances.size(); ++k) {
      const Box& b = instances[k].box;
      if (std::abs(x - b.cx()) >= radius || std::abs(y - b.cy()) >= radius) continue;
      if (!(x > b.x1 && x < b.x2 && y > b.y1 && y < b.y2)) continue;
      if (!grid_masks[k][g]) continue;
      if (b.area() < best_area) {
        best_area = b.area();
        t.assigned[g] = static_cast<int>(k);
      }
    }
    if (t.assigned[g] != DetectionTargets::kNone) {
      const auto k = static_cast<std::size_t>(t.assigned[g]);
      t.positives.push_back(g);
      const Ltrb d = ltrb_targets(x, y, instances[k].box);
      t.ltrb.push_back(d);
      t.centerness.push_back(centerness_target(d));
      t.per_instance[k].push_back(g);
    }
  }
  for (std::size_t k = 0; k < instances.size(); ++k)
    if (t.per_instance[k].empty()) t.without_positives.push_back(k);
  return t;
}

/// Box predicted at location (x, y) from its side distances.
inline Box decode_box(double x, double y, double l, double t, double r, double b) {
  return Box{x - l, y - t, x + r, y + b};
}

inline constexpr double kEmbedIouThreshold = 0.5;

/// Positives of each instance whose predicted box overlaps the ground-truth
/// box with IoU strictly greater than 0.5. `boxes` is [G, 4] (l, t, r, b).
template <typename T>
std::vector<std::vector<std::size_t>> sample_embed_targets(const DetectionTargets& det, const Tensor<T>& boxes,
                                                           const std::vector<InstanceTarget>& instances) {
  if (boxes.rank() != 2 || boxes.extent(0) != det.grid.size() || boxes.extent(1) != 4) {
    throw ShapeError("sample_embed_targets: expected [" + std::to_string(det.grid.size()) + ", 4] boxes, got " +
                     to_string(boxes.shape()));
  }
  std::vector<std::vector<std::size_t>> m(instances.size());
  for (std::size_t k = 0; k < instances.size(); ++k) {
    for (std::size_t g : det.per_instance.at(k)) {
      const Box pred = decode_box(det.grid.x(g), det.grid.y(g), boxes[4 * g], boxes[4 * g + 1], boxes[4 * g + 2],
                                  boxes[4 * g + 3]);
      if (box_iou(pred, instances[k].box) > kEmbedIouThreshold) m[k].push_back(g);
    }
  }
  return m;
}

struct PixelSet {
  std::vector<std::size_t> index;   // embedding-map pixels, row-major
  std::vector<std::uint8_t> fg;     // 1 where the pixel is on the instance mask
};

/// Embedding-map pixels whose centers fall inside the instance box expanded by
/// `expand_factor`, labeled by the instance mask rasterized to the map.
inline PixelSet pixel_supervision_set(const InstanceTarget& instance, double expand_factor, const GridSpec& map) {
  if (expand_factor < 1.0) throw std::invalid_argument("expand_factor must be >= 1");
  const Box region = expand_box(instance.box, expand_factor, map.height * map.stride, map.width * map.stride);
  const BitMask fg = downsample_majority(instance.mask, map.stride);
  PixelSet s;
  for (std::size_t e = 0; e < map.size(); ++e) {
    if (!region.contains(map.x(e), map.y(e))) continue;
    s.index.push_back(e);
    s.fg.push_back(fg[e] ? 1 : 0);
  }
  return s;
}

}  // namespace embedmask

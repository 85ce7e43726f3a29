#pragma once

// Deterministic synthetic multi-instance scenes with pixel-exact masks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "embedmask/geometry.hpp"
#include "embedmask/rng.hpp"
#include "embedmask/tensor.hpp"

namespace embedmask {

enum class Category : std::uint8_t { circle = 0, rectangle = 1, triangle = 2 };

inline constexpr std::size_t kNumCategories = 3;

inline std::string_view category_name(Category c) {
  switch (c) {
    case Category::circle: return "circle";
    case Category::rectangle: return "rectangle";
    case Category::triangle: return "triangle";
  }
  return "unknown";
}

inline Category category_from_name(std::string_view name) {
  if (name == "circle") return Category::circle;
  if (name == "rectangle") return Category::rectangle;
  if (name == "triangle") return Category::triangle;
  throw std::invalid_argument("unknown category '" + std::string(name) + "'");
}

struct InstanceTarget {
  BitMask mask;
  Box box;
  Category category = Category::circle;

  friend bool operator==(const InstanceTarget&, const InstanceTarget&) = default;
};

struct Scene {
  std::string id;
  Tensor<float> image;  // H x W x 3, values in [0, 1]
  std::vector<InstanceTarget> instances;
  std::uint64_t seed = 0;
  bool underfilled = false;  // fewer instances than requested could be placed

  std::size_t height() const { return image.extent(0); }
  std::size_t width() const { return image.extent(1); }
};

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t min_count = 1;
  std::size_t max_count = 4;
  double min_size = 10.0;  // shape diameter in pixels
  double max_size = 40.0;
  bool occlusion = true;
  double max_occluded_fraction = 0.3;  // "light" occlusion per earlier instance
  double color_jitter = 0.04;
  std::size_t min_visible_area = 16;

  void validate() const {
    if (height < 32 || width < 32) throw std::invalid_argument("scene spec: extents must be >= 32");
    if (min_count < 1 || max_count > 8 || min_count > max_count) {
      throw std::invalid_argument("scene spec: instance count range must lie within [1, 8]");
    }
    if (!(min_size > 0 && min_size <= max_size)) throw std::invalid_argument("scene spec: invalid size range");
  }
};

namespace detail {

inline BitMask rasterize_shape(Category cat, double cx, double cy, double size, double aspect, double angle,
                               std::size_t h, std::size_t w) {
  BitMask m(h, w);
  const double r = 0.5 * size;
  std::array<double, 6> tri{};
  if (cat == Category::triangle) {
    for (int k = 0; k < 3; ++k) {
      const double a = angle + k * 2.0943951023931953;  // 2*pi/3
      tri[2 * k] = cx + r * std::cos(a);
      tri[2 * k + 1] = cy + r * std::sin(a);
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      bool inside = false;
      switch (cat) {
        case Category::circle:
          inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
          break;
        case Category::rectangle: {
          // aspect < 1 shortens one side; the angle's half-turn picks which.
          const bool wide = angle < 3.141592653589793;
          const double hx = wide ? r : r * aspect;
          const double hy = wide ? r * aspect : r;
          inside = std::abs(px - cx) <= hx && std::abs(py - cy) <= hy;
          break;
        }
        case Category::triangle: {
          auto edge = [&](int i, int j) {
            return (tri[2 * j] - tri[2 * i]) * (py - tri[2 * i + 1]) - (tri[2 * j + 1] - tri[2 * i + 1]) * (px - tri[2 * i]);
          };
          const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
          inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
          break;
        }
      }
      if (inside) m.set(y, x);
    }
  }
  return m;
}

inline std::size_t overlap(const BitMask& a, const BitMask& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += (a[i] && b[i]) ? 1 : 0;
  return n;
}

}  // namespace detail

/// Generates one scene. Shapes are drawn back to front; earlier instances lose
/// the pixels covered by later ones, and instances left with fewer than
/// spec.min_visible_area pixels are dropped.
inline Scene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  Pcg32 rng(seed);
  const std::size_t h = spec.height, w = spec.width;
  const auto want = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(spec.min_count), static_cast<std::int64_t>(spec.max_count)));

  std::array<double, 3> background{};
  for (auto& c : background) c = rng.uniform(0.0, 1.0);

  struct Placed {
    BitMask visible;
    Category category;
    std::array<double, 3> color;
  };
  std::vector<Placed> placed;
  bool underfilled = false;

  for (std::size_t i = 0; i < want; ++i) {
    // Category is drawn once per slot so placement retries do not skew the mix.
    const auto cat = static_cast<Category>(rng.uniform_int(0, 2));
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      const double size = rng.uniform(spec.min_size, std::min(spec.max_size, static_cast<double>(std::min(h, w))));
      const double aspect = rng.uniform(0.5, 1.0);
      const double angle = rng.uniform(0.0, 6.283185307179586);
      const double cx = rng.uniform(0.5 * size, static_cast<double>(w) - 0.5 * size);
      const double cy = rng.uniform(0.5 * size, static_cast<double>(h) - 0.5 * size);
      BitMask mask = detail::rasterize_shape(cat, cx, cy, size, aspect, angle, h, w);
      if (mask.popcount() < spec.min_visible_area) continue;

      bool acceptable = true;
      for (const auto& p : placed) {
        const std::size_t ov = detail::overlap(mask, p.visible);
        if (!spec.occlusion && ov > 0) acceptable = false;
        if (spec.occlusion && static_cast<double>(ov) > spec.max_occluded_fraction * static_cast<double>(p.visible.popcount())) {
          acceptable = false;
        }
        if (!acceptable) break;
      }
      if (!acceptable) continue;

      std::array<double, 3> color{};
      for (int tries = 0; tries < 32; ++tries) {
        for (auto& c : color) c = rng.uniform(0.0, 1.0);
        const double contrast = (std::abs(color[0] - background[0]) + std::abs(color[1] - background[1]) +
                                 std::abs(color[2] - background[2])) / 3.0;
        if (contrast >= 0.25) break;
      }
      for (auto& p : placed) {
        for (std::size_t k = 0; k < mask.size(); ++k) {
          if (mask[k]) p.visible.set(k / w, k % w, false);
        }
      }
      placed.push_back({mask, cat, color});
      ok = true;
    }
    if (!ok) underfilled = true;
  }

  Scene scene;
  scene.seed = seed;
  scene.image = Tensor<float>(Shape{h, w, 3});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::array<double, 3> c = background;
      for (const auto& p : placed) {
        if (p.visible.at(y, x)) c = p.color;
      }
      for (std::size_t k = 0; k < 3; ++k) {
        const double v = c[k] + rng.uniform(-spec.color_jitter, spec.color_jitter);
        scene.image[(y * w + x) * 3 + k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  for (auto& p : placed) {
    if (p.visible.popcount() < spec.min_visible_area) continue;
    InstanceTarget inst;
    inst.box = *p.visible.tight_box();
    inst.category = p.category;
    inst.mask = std::move(p.visible);
    scene.instances.push_back(std::move(inst));
  }
  scene.underfilled = underfilled || scene.instances.size() < want;
  return scene;
}

/// Scene `index` of a dataset generated from `seed`.
inline Scene generate_indexed_scene(std::uint64_t seed, std::size_t index, const SceneSpec& spec) {
  Scene s = generate_scene(derive_seed(seed, index), spec);
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05zu", index);
  s.id = buf;
  return s;
}

inline std::vector<Scene> generate_scenes(std::uint64_t seed, std::size_t count, const SceneSpec& spec,
                                          std::size_t first_index = 0) {
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_indexed_scene(seed, first_index + i, spec));
  return out;
}

}  // namespace embedmask

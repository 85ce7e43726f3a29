#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace embedmask {

/// Axis-aligned box in continuous image coordinates; pixel (x, y) covers
/// [x, x+1) x [y, y+1) and has its center at (x + 0.5, y + 0.5).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 <= x2 && y1 <= y2; }
  bool contains(double x, double y) const { return x >= x1 && x <= x2 && y >= y1 && y <= y2; }

  friend bool operator==(const Box&, const Box&) = default;
};

inline double box_iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Scales `b` about its center by `factor` per dimension, then clips to the
/// image rectangle [0, width] x [0, height].
inline Box expand_box(const Box& b, double factor, std::size_t image_h, std::size_t image_w) {
  if (!(factor >= 1.0)) throw std::invalid_argument("expand_box: factor must be >= 1, got " + std::to_string(factor));
  const double hw = 0.5 * b.width() * factor, hh = 0.5 * b.height() * factor;
  const double cx = b.cx(), cy = b.cy();
  return Box{std::max(0.0, cx - hw), std::max(0.0, cy - hh), std::min(static_cast<double>(image_w), cx + hw),
             std::min(static_cast<double>(image_h), cy + hh)};
}

class BitMask {
 public:
  BitMask() = default;
  BitMask(std::size_t height, std::size_t width) : h_(height), w_(width), bits_(height * width, 0) {}

  std::size_t height() const noexcept { return h_; }
  std::size_t width() const noexcept { return w_; }
  std::size_t size() const noexcept { return bits_.size(); }

  bool at(std::size_t y, std::size_t x) const { return bits_[y * w_ + x] != 0; }
  void set(std::size_t y, std::size_t x, bool v = true) { bits_[y * w_ + x] = v ? 1 : 0; }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }

  std::size_t popcount() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }
  bool empty() const { return popcount() == 0; }

  /// Tight box of the set pixels, or nullopt when the mask is empty.
  std::optional<Box> tight_box() const {
    std::size_t x0 = w_, y0 = h_, x1 = 0, y1 = 0;
    bool any = false;
    for (std::size_t y = 0; y < h_; ++y) {
      for (std::size_t x = 0; x < w_; ++x) {
        if (!at(y, x)) continue;
        any = true;
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
    }
    if (!any) return std::nullopt;
    return Box{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 + 1),
               static_cast<double>(y1 + 1)};
  }

  friend bool operator==(const BitMask&, const BitMask&) = default;

 private:
  std::size_t h_ = 0, w_ = 0;
  std::vector<std::uint8_t> bits_;
};

inline double mask_iou(const BitMask& a, const BitMask& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw std::invalid_argument("mask_iou: extent mismatch " + std::to_string(a.height()) + "x" +
                                std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                                std::to_string(b.width()));
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Pixels whose centers fall inside `box` (boundary inclusive).
inline bool pixel_center_inside(const Box& box, std::size_t y, std::size_t x, double scale = 1.0) {
  return box.contains((static_cast<double>(x) + 0.5) * scale, (static_cast<double>(y) + 0.5) * scale);
}

// ---- run-length encoding -------------------------------------------------------

/// Column-major alternating run lengths, starting with a (possibly zero) run of
/// zeros.
inline std::vector<std::uint32_t> rle_encode(const BitMask& m) {
  std::vector<std::uint32_t> runs;
  bool current = false;
  std::uint32_t count = 0;
  for (std::size_t x = 0; x < m.width(); ++x) {
    for (std::size_t y = 0; y < m.height(); ++y) {
      if (m.at(y, x) != current) {
        runs.push_back(count);
        count = 0;
        current = !current;
      }
      ++count;
    }
  }
  runs.push_back(count);
  return runs;
}

inline BitMask rle_decode(const std::vector<std::uint32_t>& runs, std::size_t height, std::size_t width) {
  std::uint64_t total = 0;
  for (auto r : runs) total += r;
  if (total != static_cast<std::uint64_t>(height) * width) {
    throw std::invalid_argument("rle_decode: runs sum to " + std::to_string(total) + ", expected " +
                                std::to_string(height * width));
  }
  BitMask m(height, width);
  std::size_t pos = 0;
  bool value = false;
  for (auto r : runs) {
    for (std::uint32_t k = 0; k < r; ++k, ++pos) {
      if (value) m.set(pos % height, pos / height);
    }
    value = !value;
  }
  return m;
}

// ---- regression targets --------------------------------------------------------

struct Ltrb {
  double l = 0, t = 0, r = 0, b = 0;
};

class OutsideBoxError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Distances from (x, y) to the four sides of `b`.
inline Ltrb ltrb_targets(double x, double y, const Box& b) {
  if (!b.contains(x, y)) throw OutsideBoxError("ltrb_targets: location outside box");
  return Ltrb{x - b.x1, y - b.y1, b.x2 - x, b.y2 - y};
}

inline double centerness_target(const Ltrb& d) {
  const double mx = std::max(d.l, d.r), my = std::max(d.t, d.b);
  if (mx <= 0 || my <= 0) return 0.0;
  return std::sqrt((std::min(d.l, d.r) / mx) * (std::min(d.t, d.b) / my));
}

}  // namespace embedmask

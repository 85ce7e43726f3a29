#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "embedmask/ops.hpp"

namespace embedmask {

namespace detail {

struct LerpTap {
  std::size_t lo, hi;
  double frac;  // weight of hi
};

// Corner-aligned sample positions: output 0 maps to input 0 and output n-1 to
// input m-1.
inline std::vector<LerpTap> corner_aligned_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double pos = out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
    auto lo = static_cast<std::size_t>(std::floor(pos));
    if (lo >= in) lo = in - 1;
    const std::size_t hi = lo + 1 < in ? lo + 1 : lo;
    taps[o] = {lo, hi, pos - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of an H x W x C map to out_h x out_w x C with corner-aligned
/// sampling. Differentiable in the input map.
template <typename T>
Var<T> bilinear_resize(const Var<T>& map, std::size_t out_h, std::size_t out_w) {
  if (map.shape().size() != 3) throw ShapeError("bilinear_resize: expected H x W x C, got " + to_string(map.shape()));
  const std::size_t h = map.shape()[0], w = map.shape()[1], c = map.shape()[2];
  if (h == 0 || w == 0) throw ShapeError("bilinear_resize: empty input " + to_string(map.shape()));
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("bilinear_resize: zero target extent");
  if (out_h == h && out_w == w) return map;

  auto ty = detail::corner_aligned_taps(h, out_h);
  auto tx = detail::corner_aligned_taps(w, out_w);
  Tensor<T> out(Shape{out_h, out_w, c});
  const auto& in = map.value();
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const auto& [y0, y1, fy] = ty[oy];
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const auto& [x0, x1, fx] = tx[ox];
      const T w00 = static_cast<T>((1 - fy) * (1 - fx)), w01 = static_cast<T>((1 - fy) * fx);
      const T w10 = static_cast<T>(fy * (1 - fx)), w11 = static_cast<T>(fy * fx);
      for (std::size_t k = 0; k < c; ++k) {
        out[(oy * out_w + ox) * c + k] = w00 * in[(y0 * w + x0) * c + k] + w01 * in[(y0 * w + x1) * c + k] +
                                         w10 * in[(y1 * w + x0) * c + k] + w11 * in[(y1 * w + x1) * c + k];
      }
    }
  }
  return detail::make_result<T>(
      "bilinear_resize", std::move(out), {&map},
      [ty = std::move(ty), tx = std::move(tx), w, c, out_w](detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t oy = 0; oy < ty.size(); ++oy) {
          const auto& [y0, y1, fy] = ty[oy];
          for (std::size_t ox = 0; ox < tx.size(); ++ox) {
            const auto& [x0, x1, fx] = tx[ox];
            const T w00 = static_cast<T>((1 - fy) * (1 - fx)), w01 = static_cast<T>((1 - fy) * fx);
            const T w10 = static_cast<T>(fy * (1 - fx)), w11 = static_cast<T>(fy * fx);
            for (std::size_t k = 0; k < c; ++k) {
              const T go = self.grad[(oy * out_w + ox) * c + k];
              g[(y0 * w + x0) * c + k] += w00 * go;
              g[(y0 * w + x1) * c + k] += w01 * go;
              g[(y1 * w + x0) * c + k] += w10 * go;
              g[(y1 * w + x1) * c + k] += w11 * go;
            }
          }
        }
      });
}

/// Value-only overload for plain tensors.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& map, std::size_t out_h, std::size_t out_w) {
  return bilinear_resize(Var<T>::constant(map), out_h, out_w).value();
}

}  // namespace embedmask

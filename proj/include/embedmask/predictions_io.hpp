#pragma once

// Per-image prediction files (boxes, scores, RLE masks) and contour overlays.

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "embedmask/dataset_io.hpp"
#include "embedmask/infer.hpp"
#include "json.hpp"

namespace embedmask {

inline nlohmann::json predictions_to_json(const std::string& image_id, std::size_t height, std::size_t width,
                                          const std::vector<PredictedInstance>& preds) {
  nlohmann::json inst = nlohmann::json::array();
  for (const auto& p : preds) {
    inst.push_back({{"category", std::string(category_name(p.category))},
                    {"score", p.score},
                    {"box", {p.box.x1, p.box.y1, p.box.x2, p.box.y2}},
                    {"location", p.location},
                    {"sigma", p.sigma},
                    {"rle", rle_encode(p.mask)}});
  }
  return {{"id", image_id}, {"height", height}, {"width", width}, {"instances", inst}};
}

inline std::vector<PredictedInstance> predictions_from_json(const nlohmann::json& j, const std::string& where) {
  std::vector<PredictedInstance> out;
  try {
    const auto h = j.at("height").get<std::size_t>(), w = j.at("width").get<std::size_t>();
    for (const auto& ji : j.at("instances")) {
      PredictedInstance p;
      p.category = category_from_name(ji.at("category").get<std::string>());
      p.score = ji.at("score").get<double>();
      const auto& b = ji.at("box");
      if (!b.is_array() || b.size() != 4) throw DatasetError("box must be [x1, y1, x2, y2]");
      p.box = Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      p.location = ji.value("location", std::size_t{0});
      p.sigma = ji.value("sigma", 0.0);
      p.mask = rle_decode(ji.at("rle").get<std::vector<std::uint32_t>>(), h, w);
      out.push_back(std::move(p));
    }
  } catch (const DatasetError&) {
    throw;
  } catch (const std::exception& e) {
    throw DatasetError(where + ": " + e.what());
  }
  return out;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw DatasetError("cannot open " + path.string() + " for writing");
  os << j.dump(1) << '\n';
  if (!os) throw DatasetError("write failed: " + path.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DatasetError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw DatasetError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

/// Instance outlines drawn over a copy of `image`: a mask pixel is on the
/// contour when a 4-neighbour is outside the mask or the image.
inline Tensor<float> render_overlay(const Tensor<float>& image, const std::vector<PredictedInstance>& preds) {
  static constexpr std::array<std::array<float, 3>, 6> palette = {{{1.f, 0.1f, 0.1f},
                                                                  {0.1f, 1.f, 0.1f},
                                                                  {0.2f, 0.4f, 1.f},
                                                                  {1.f, 1.f, 0.1f},
                                                                  {1.f, 0.2f, 1.f},
                                                                  {0.1f, 1.f, 1.f}}};
  Tensor<float> out = image;
  const std::size_t h = image.extent(0), w = image.extent(1);
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const BitMask& m = preds[k].mask;
    if (m.height() != h || m.width() != w) throw std::invalid_argument("render_overlay: mask extents differ from image");
    const auto& c = palette[k % palette.size()];
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        if (!m.at(y, x)) continue;
        const bool edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w || !m.at(y - 1, x) || !m.at(y + 1, x) ||
                          !m.at(y, x - 1) || !m.at(y, x + 1);
        if (!edge) continue;
        for (std::size_t ch = 0; ch < 3; ++ch) out[(y * w + x) * 3 + ch] = c[ch];
      }
    }
  }
  return out;
}

}  // namespace embedmask

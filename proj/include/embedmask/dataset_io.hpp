#pragma once

// On-disk datasets:
//
//   <root>/manifest.json                 {"splits": {"train": ..., "val": ...}, ...}
//   <root>/<split>/annotations.json      {"split", "scenes": [{id, image, height,
//                                          width, seed, instances: [{category,
//                                          box, rle}]}]}
//   <root>/<split>/images/<id>.ppm       binary P6, 8-bit

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "embedmask/geometry.hpp"
#include "embedmask/scenes.hpp"

namespace embedmask {

using json = nlohmann::json;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- PPM ---------------------------------------------------------------------

inline std::uint8_t quantize_u8(float v) {
  const float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline void write_ppm(const std::string& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.extent(2) != 3) throw std::invalid_argument("write_ppm: expected H x W x 3 image");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DatasetError("cannot open " + path + " for writing");
  os << "P6\n" << image.extent(1) << ' ' << image.extent(0) << "\n255\n";
  std::vector<char> bytes(image.numel());
  for (std::size_t i = 0; i < image.numel(); ++i) bytes[i] = static_cast<char>(quantize_u8(image[i]));
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DatasetError("write failed: " + path);
}

inline Tensor<float> read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("cannot open " + path);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0) throw DatasetError("unsupported PPM header in " + path);
  is.get();  // single whitespace before the raster
  std::vector<char> bytes(w * h * 3);
  if (!is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) throw DatasetError("truncated PPM " + path);
  Tensor<float> image(Shape{h, w, 3});
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    image[i] = static_cast<float>(static_cast<unsigned char>(bytes[i])) / 255.0f;
  }
  return image;
}

/// The image as it reads back after an 8-bit round trip.
inline Tensor<float> quantized(const Tensor<float>& image) {
  Tensor<float> out = image;
  for (auto& v : out.values()) v = static_cast<float>(quantize_u8(v)) / 255.0f;
  return out;
}

// ---- annotations -------------------------------------------------------------

inline json instance_to_json(const InstanceTarget& inst) {
  return json{{"category", std::string(category_name(inst.category))},
              {"box", {inst.box.x1, inst.box.y1, inst.box.x2, inst.box.y2}},
              {"rle", rle_encode(inst.mask)}};
}

inline InstanceTarget instance_from_json(const json& j, std::size_t height, std::size_t width,
                                         const std::string& where) {
  try {
    InstanceTarget inst;
    inst.category = category_from_name(j.at("category").get<std::string>());
    const auto& b = j.at("box");
    if (!b.is_array() || b.size() != 4) throw DatasetError("box must be [x1, y1, x2, y2]");
    inst.box = Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
    inst.mask = rle_decode(j.at("rle").get<std::vector<std::uint32_t>>(), height, width);
    return inst;
  } catch (const std::exception& e) {
    throw DatasetError(where + ": " + e.what());
  }
}

/// Writes `scenes` as split `split` under `root`. Returns the annotation path
/// relative to root.
inline std::string write_split(const std::filesystem::path& root, const std::string& split,
                               const std::vector<Scene>& scenes) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root / split / "images", ec);
  if (ec) throw DatasetError("cannot create " + (root / split / "images").string() + ": " + ec.message());
  json doc;
  doc["split"] = split;
  doc["scenes"] = json::array();
  for (const auto& s : scenes) {
    const std::string rel = "images/" + s.id + ".ppm";
    write_ppm((root / split / rel).string(), s.image);
    json js{{"id", s.id}, {"image", rel}, {"height", s.height()}, {"width", s.width()}, {"seed", s.seed}};
    js["instances"] = json::array();
    for (const auto& inst : s.instances) js["instances"].push_back(instance_to_json(inst));
    doc["scenes"].push_back(std::move(js));
  }
  const fs::path ann = root / split / "annotations.json";
  std::ofstream os(ann);
  if (!os) throw DatasetError("cannot open " + ann.string() + " for writing");
  os << doc.dump(1) << '\n';
  if (!os) throw DatasetError("write failed: " + ann.string());
  return split + "/annotations.json";
}

inline std::vector<Scene> read_split(const std::filesystem::path& annotations) {
  std::ifstream is(annotations);
  if (!is) throw DatasetError("cannot open " + annotations.string());
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& e) {
    throw DatasetError("malformed JSON in " + annotations.string() + ": " + e.what());
  }
  const auto dir = annotations.parent_path();
  std::vector<Scene> scenes;
  if (!doc.contains("scenes") || !doc["scenes"].is_array()) {
    throw DatasetError(annotations.string() + ": missing 'scenes' array");
  }
  for (const auto& js : doc["scenes"]) {
    Scene s;
    try {
      s.id = js.at("id").get<std::string>();
      s.seed = js.at("seed").get<std::uint64_t>();
    } catch (const std::exception& e) {
      throw DatasetError(annotations.string() + ": malformed scene entry: " + e.what());
    }
    const auto h = js.at("height").get<std::size_t>(), w = js.at("width").get<std::size_t>();
    s.image = read_ppm((dir / js.at("image").get<std::string>()).string());
    if (s.height() != h || s.width() != w) throw DatasetError("scene " + s.id + ": image extents disagree with annotation");
    std::size_t k = 0;
    for (const auto& ji : js.at("instances")) {
      s.instances.push_back(instance_from_json(ji, h, w, "scene " + s.id + " instance " + std::to_string(k)));
      ++k;
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

struct Dataset {
  std::vector<Scene> train;
  std::vector<Scene> val;
};

inline json scene_spec_to_json(const SceneSpec& s) {
  return json{{"height", s.height},         {"width", s.width},
              {"min_count", s.min_count},   {"max_count", s.max_count},
              {"min_size", s.min_size},     {"max_size", s.max_size},
              {"occlusion", s.occlusion},   {"max_occluded_fraction", s.max_occluded_fraction},
              {"color_jitter", s.color_jitter}, {"min_visible_area", s.min_visible_area}};
}

/// Generates `count` scenes; the first floor(count * train_fraction) go to train.
inline Dataset generate_dataset(std::uint64_t seed, std::size_t count, const SceneSpec& spec,
                                double train_fraction = 0.8) {
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) {
    throw std::invalid_argument("generate_dataset: train fraction must lie in [0, 1]");
  }
  // The epsilon keeps products like 10 * 0.7 from flooring one scene short.
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(count) * train_fraction + 1e-9));
  Dataset d;
  d.train = generate_scenes(seed, n_train, spec, 0);
  d.val = generate_scenes(seed, count - n_train, spec, n_train);
  return d;
}

inline void write_dataset(const std::filesystem::path& root, const Dataset& d, const SceneSpec& spec,
                          std::uint64_t seed) {
  json manifest;
  manifest["splits"]["train"] = write_split(root, "train", d.train);
  manifest["splits"]["val"] = write_split(root, "val", d.val);
  manifest["counts"] = {{"train", d.train.size()}, {"val", d.val.size()}};
  manifest["seed"] = seed;
  manifest["spec"] = scene_spec_to_json(spec);
  std::ofstream os(root / "manifest.json");
  if (!os) throw DatasetError("cannot write manifest under " + root.string());
  os << manifest.dump(1) << '\n';
}

inline Dataset read_dataset(const std::filesystem::path& root) {
  std::ifstream is(root / "manifest.json");
  if (!is) throw DatasetError("no manifest.json under " + root.string());
  json manifest;
  try {
    manifest = json::parse(is);
  } catch (const json::parse_error& e) {
    throw DatasetError("malformed manifest: " + std::string(e.what()));
  }
  Dataset d;
  const auto& splits = manifest.at("splits");
  if (splits.contains("train")) d.train = read_split(root / splits["train"].get<std::string>());
  if (splits.contains("val")) d.val = read_split(root / splits["val"].get<std::string>());
  return d;
}

}  // namespace embedmask

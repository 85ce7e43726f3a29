#pragma once

// Single-level detection network with a proposal head (category, center-ness,
// box, proposal embedding q, margin) and a pixel-embedding head, plus
// checkpoint I/O.
//
// Layout is HWC throughout; outputs are flattened to [G, channels] with
// G = grid_h * grid_w locations in row-major order.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "embedmask/ops.hpp"
#include "embedmask/resize.hpp"
#include "embedmask/rng.hpp"
#include "embedmask/scenes.hpp"
#include "embedmask/tensor_io.hpp"
#include "json.hpp"

namespace embedmask {

struct ModelConfig {
  std::size_t width = 32;
  std::size_t embed_dim = 32;
  std::size_t num_classes = kNumCategories;
  /// Output stride of the pixel-embedding map relative to the input (2 or 4).
  std::size_t embed_stride = 2;

  static constexpr std::size_t kFeatureStride = 2;

  void validate() const {
    if (width == 0) throw std::invalid_argument("model.width must be positive");
    if (embed_dim == 0) throw std::invalid_argument("model.embed_dim must be positive");
    if (num_classes == 0) throw std::invalid_argument("model.num_classes must be positive");
    if (embed_stride != 2 && embed_stride != 4) throw std::invalid_argument("model.embed_stride must be 2 or 4");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"width", c.width}, {"embed_dim", c.embed_dim}, {"num_classes", c.num_classes}, {"embed_stride", c.embed_stride}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.width = j.value("width", c.width);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.embed_stride = j.value("embed_stride", c.embed_stride);
}

/// Clamp on the raw margin and box channels; keeps a = exp(r) and the decoded
/// box sides finite and positive for any weights.
inline constexpr double kRawClamp = 15.0;

struct ConvSpec {
  std::string name;
  std::size_t kernel, in, out, stride;
};

/// Layer table in parameter order. Each layer owns "<name>.weight" [K,K,I,O]
/// and "<name>.bias" [O].
inline std::vector<ConvSpec> layer_specs(const ModelConfig& c) {
  const std::size_t w = c.width;
  return {
      {"backbone.0", 3, 3, w, 1},  {"backbone.1", 3, w, w, 2}, {"backbone.2", 3, w, w, 1},
      {"backbone.3", 3, w, w, 1},  {"tower.0", 3, w, w, 1},    {"tower.1", 3, w, w, 1},
      {"cls", 3, w, c.num_classes, 1}, {"centerness", 3, w, 1, 1}, {"box", 3, w, 4, 1},
      {"q", 3, w, c.embed_dim, 1}, {"margin", 1, w, 1, 1},     {"pixel.0", 3, w, w, 1},
      {"pixel.1", 3, w, w, 1},     {"pixel.2", 3, w, c.embed_dim, 1},
  };
}

template <typename T>
struct ModelParams {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  std::size_t size() const { return tensors.size(); }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
  }
  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw std::out_of_range("no parameter named " + name);
  }
  Tensor<T>& operator[](const std::string& name) { return tensors[index_of(name)]; }
  const Tensor<T>& operator[](const std::string& name) const { return tensors[index_of(name)]; }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out{config, seed, names, {}};
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.all_finite()) return false;
    return true;
  }
};

/// Initial foreground probability of every category output.
inline constexpr double kPriorProbability = 0.01;
/// Initial box side length in pixels.
inline constexpr double kInitialBoxSide = 8.0;

template <typename T = float>
ModelParams<T> init_params(std::uint64_t seed, const ModelConfig& config = {}) {
  config.validate();
  ModelParams<T> p;
  p.config = config;
  p.seed = seed;
  Pcg32 rng(derive_seed(seed, 0x1417));
  for (const auto& l : layer_specs(config)) {
    const bool output = l.name == "cls" || l.name == "centerness" || l.name == "box" || l.name == "q" ||
                        l.name == "margin";
    const double fan_in = static_cast<double>(l.kernel * l.kernel * l.in);
    // The pixel head's last layer is spread so squared embedding distances start
    // near 1 whatever the dimension; larger starts leave exp(-a d^2) underflowed.
    const double std = output ? 0.01
                              : (l.name == "pixel.2" ? std::sqrt(1.0 / (fan_in * static_cast<double>(config.embed_dim)))
                                                     : std::sqrt(2.0 / fan_in));
    Tensor<T> w(Shape{l.kernel, l.kernel, l.in, l.out});
    for (auto& v : w.values()) v = static_cast<T>(std * rng.normal());
    Tensor<T> b(Shape{l.out});
    if (l.name == "cls") {
      for (auto& v : b.values()) v = static_cast<T>(-std::log((1 - kPriorProbability) / kPriorProbability));
    } else if (l.name == "box") {
      for (auto& v : b.values()) v = static_cast<T>(std::log(kInitialBoxSide));
    }
    p.names.push_back(l.name + ".weight");
    p.tensors.push_back(std::move(w));
    p.names.push_back(l.name + ".bias");
    p.tensors.push_back(std::move(b));
  }
  return p;
}

/// Parameters bound for one forward pass: leaves on a tape, or constants.
template <typename T>
std::vector<Var<T>> bind(Tape<T>& tape, const ModelParams<T>& params) {
  std::vector<Var<T>> vars;
  vars.reserve(params.size());
  for (const auto& t : params.tensors) vars.push_back(tape.leaf(t));
  return vars;
}

template <typename T>
std::vector<Var<T>> bind_constant(const ModelParams<T>& params) {
  std::vector<Var<T>> vars;
  vars.reserve(params.size());
  for (const auto& t : params.tensors) vars.push_back(Var<T>::constant(t));
  return vars;
}

template <typename T>
struct HeadOutputs {
  std::size_t grid_h = 0, grid_w = 0;    // proposal grid
  std::size_t embed_h = 0, embed_w = 0;  // pixel-embedding map
  std::size_t stride = ModelConfig::kFeatureStride;
  std::size_t embed_stride = 2;
  Var<T> cls;         // [G, C] logits
  Var<T> centerness;  // [G, 1] logits
  Var<T> box;         // [G, 4] l, t, r, b in pixels, > 0
  Var<T> q;           // [G, D]
  Var<T> precision;   // [G, 1] a = 1 / (2 Sigma^2), > 0
  Var<T> pixel;       // [E, D] with E = embed_h * embed_w

  std::size_t locations() const { return grid_h * grid_w; }

  /// Image coordinates of the center of proposal location g.
  std::pair<double, double> location_xy(std::size_t g) const {
    const double s = static_cast<double>(stride);
    return {(static_cast<double>(g % grid_w) + 0.5) * s, (static_cast<double>(g / grid_w) + 0.5) * s};
  }
};

namespace detail {

template <typename T>
Var<T> clamp_raw(const Var<T>& raw) {
  const Tensor<T> hi(raw.shape(), static_cast<T>(kRawClamp));
  return max_const(min_const(raw, hi), static_cast<T>(-kRawClamp));
}

template <typename T>
Var<T> conv_layer(const std::vector<Var<T>>& vars, std::size_t layer, const Var<T>& x, std::size_t stride, bool act) {
  Var<T> y = conv2d(x, vars[2 * layer], vars[2 * layer + 1], stride);
  return act ? relu(y) : y;
}

}  // namespace detail

/// Runs the network on an H x W x 3 image in [0, 1].
template <typename T>
HeadOutputs<T> forward(const Tensor<T>& image, const std::vector<Var<T>>& vars, const ModelConfig& config) {
  if (image.rank() != 3 || image.extent(2) != 3) {
    throw ShapeError("forward: expected H x W x 3 image, got " + to_string(image.shape()));
  }
  const std::size_t h = image.extent(0), w = image.extent(1);
  const std::size_t s = ModelConfig::kFeatureStride;
  if (h % config.embed_stride != 0 || w % config.embed_stride != 0 || h % s != 0 || w % s != 0) {
    throw std::invalid_argument("forward: image extents " + to_string(image.shape()) + " not divisible by stride " +
                                std::to_string(std::max(s, config.embed_stride)));
  }
  if (vars.size() != 2 * layer_specs(config).size()) throw std::invalid_argument("forward: parameter count mismatch");

  Tensor<T> normalized = image;
  for (auto& v : normalized.values()) v = (v - T(0.5)) * T(4);
  Var<T> x = Var<T>::constant(std::move(normalized));

  enum : std::size_t { b0, b1, b2, b3, t0, t1, cls, ctr, box, q, margin, p0, p1, p2 };
  x = detail::conv_layer(vars, b0, x, 1, true);
  x = detail::conv_layer(vars, b1, x, 2, true);
  x = detail::conv_layer(vars, b2, x, 1, true);
  const Var<T> feat = detail::conv_layer(vars, b3, x, 1, true);
  Var<T> tower = detail::conv_layer(vars, t0, feat, 1, true);
  tower = detail::conv_layer(vars, t1, tower, 1, true);

  HeadOutputs<T> out;
  out.grid_h = h / s;
  out.grid_w = w / s;
  out.stride = s;
  out.embed_stride = config.embed_stride;
  out.embed_h = h / config.embed_stride;
  out.embed_w = w / config.embed_stride;
  const std::size_t g = out.grid_h * out.grid_w;
  auto flat = [g](const Var<T>& v) { return reshape(v, Shape{g, v.shape().back()}); };
  out.cls = flat(detail::conv_layer(vars, cls, tower, 1, false));
  out.centerness = flat(detail::conv_layer(vars, ctr, tower, 1, false));
  out.box = exp(detail::clamp_raw(flat(detail::conv_layer(vars, box, tower, 1, false))));
  out.q = flat(detail::conv_layer(vars, q, tower, 1, false));
  out.precision = exp(detail::clamp_raw(flat(detail::conv_layer(vars, margin, tower, 1, false))));

  Var<T> pix = detail::conv_layer(vars, p0, feat, 1, true);
  pix = detail::conv_layer(vars, p1, pix, 1, true);
  pix = detail::conv_layer(vars, p2, pix, 1, false);
  pix = bilinear_resize(pix, out.embed_h, out.embed_w);
  out.pixel = reshape(pix, Shape{out.embed_h * out.embed_w, config.embed_dim});
  return out;
}

template <typename T>
HeadOutputs<T> forward(const Tensor<T>& image, const ModelParams<T>& params) {
  return forward(image, bind_constant(params), params.config);
}

// ---- checkpoints ----------------------------------------------------------------

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointInfo {
  std::string config_hash;
  nlohmann::json extra;
};

/// Writes manifest.json plus one tensor file per parameter into `dir`.
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ModelParams<T>& params, const std::string& config_hash,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string file = params.names[i] + ".emtn";
    save_tensor((dir / file).string(), params.tensors[i]);
    layers.push_back({{"name", params.names[i]}, {"shape", params.tensors[i].shape()}, {"file", file}});
  }
  const nlohmann::json manifest = {{"format", 1},           {"seed", params.seed},
                                   {"config_hash", config_hash}, {"model", params.config},
                                   {"layers", layers},      {"extra", extra}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw CheckpointError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

template <typename T = float>
ModelParams<T> load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info = nullptr) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw CheckpointError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  ModelParams<T> p;
  p.config = m.at("model").get<ModelConfig>();
  p.seed = m.at("seed").get<std::uint64_t>();
  const auto expected = layer_specs(p.config);
  const auto& layers = m.at("layers");
  if (layers.size() != 2 * expected.size()) throw CheckpointError("checkpoint layer count does not match model config");
  for (const auto& l : layers) {
    const std::string name = l.at("name").get<std::string>();
    Tensor<T> t = load_tensor<T>((dir / l.at("file").get<std::string>()).string());
    if (t.shape() != l.at("shape").get<Shape>()) throw CheckpointError("shape mismatch for " + name);
    p.names.push_back(name);
    p.tensors.push_back(std::move(t));
  }
  const ModelParams<T> fresh = init_params<T>(0, p.config);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.names[i] != fresh.names[i] || p.tensors[i].shape() != fresh.tensors[i].shape()) {
      throw CheckpointError("checkpoint layer " + p.names[i] + " does not match model layout");
    }
  }
  if (info) {
    info->config_hash = m.value("config_hash", "");
    info->extra = m.value("extra", nlohmann::json::object());
  }
  return p;
}

}  // namespace embedmask

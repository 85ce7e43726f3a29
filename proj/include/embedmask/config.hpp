#pragma once

// Run configuration: JSON schema with field-named validation errors, command
// line overrides and a stable content hash.

#include <cstdint>
#include <cstdio>
#include <set>
#include <stdexcept>
#include <string>

#include "embedmask/coupling.hpp"
#include "embedmask/model.hpp"
#include "embedmask/scenes.hpp"
#include "json.hpp"

namespace embedmask {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& msg)
      : std::invalid_argument("config field '" + field + "': " + msg), field_(std::move(field)), message_(msg) {}
  const std::string& field() const noexcept { return field_; }
  const std::string& message() const noexcept { return message_; }

 private:
  std::string field_;
  std::string message_;
};

enum class MarginMode { learnable, constant, fixed_hinge };
enum class CenterMode { proposal, pixel };

inline const char* to_string(MarginMode m) {
  switch (m) {
    case MarginMode::learnable: return "learnable";
    case MarginMode::constant: return "constant";
    case MarginMode::fixed_hinge: return "fixed_hinge";
  }
  return "?";
}

inline const char* to_string(CenterMode m) { return m == CenterMode::proposal ? "proposal" : "pixel"; }

struct TrainConfig {
  double lambda1 = 0.5;
  double lambda2 = 0.1;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  /// Global gradient-norm cap; 0 disables clipping.
  double grad_clip = 10.0;
  std::size_t warmup_iters = 100;
  std::size_t total_iters = 3000;
  std::size_t batch = 8;
  double expand_factor = 1.2;
  double radius_factor = 1.5;
  MarginMode margin_mode = MarginMode::learnable;
  double sigma0 = 1.0;  // margin used when margin_mode is constant
  MarginConfig margins;
  CenterMode center_mode = CenterMode::proposal;
  std::size_t log_every = 1;
};

struct InferConfig {
  double score_thresh = 0.05;
  double nms_iou = 0.6;
  std::size_t top_k = 20;
};

struct DataConfig {
  std::uint64_t seed = 7;
  std::size_t count = 250;
  SceneSpec spec;
};

struct RunConfig {
  std::uint64_t seed = 1;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  InferConfig infer;

  void validate() const;
};

// ---- reading ----------------------------------------------------------------------

namespace detail {

class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(prefix_.empty() ? "<root>" : prefix_.substr(0, prefix_.size() - 1), "expected an object");
  }

  template <typename V>
  void get(const char* key, V& dst) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) throw ConfigError(name(key), "expected a boolean");
    } else if constexpr (std::is_integral_v<V>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<V> && v.get<std::int64_t>() < 0)) {
        throw ConfigError(name(key), "expected a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!v.is_number()) throw ConfigError(name(key), "expected a number");
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!v.is_string()) throw ConfigError(name(key), "expected a string");
    }
    dst = v.get<V>();
  }

  const nlohmann::json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  std::string name(const std::string& key) const { return prefix_ + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(prefix_ + k, "unknown field");
  }

 private:
  const nlohmann::json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline MarginMode margin_mode_from_string(const std::string& s, const std::string& field = "train.margin_mode") {
  if (s == "learnable") return MarginMode::learnable;
  if (s == "constant") return MarginMode::constant;
  if (s == "fixed_hinge") return MarginMode::fixed_hinge;
  throw ConfigError(field, "expected learnable, constant or fixed_hinge, got '" + s + "'");
}

inline CenterMode center_mode_from_string(const std::string& s, const std::string& field = "train.center_mode") {
  if (s == "proposal") return CenterMode::proposal;
  if (s == "pixel") return CenterMode::pixel;
  throw ConfigError(field, "expected proposal or pixel, got '" + s + "'");
}

inline void read_scene_spec(const nlohmann::json& j, SceneSpec& s, const std::string& prefix) {
  detail::FieldReader r(j, prefix);
  r.get("height", s.height);
  r.get("width", s.width);
  r.get("min_count", s.min_count);
  r.get("max_count", s.max_count);
  r.get("min_size", s.min_size);
  r.get("max_size", s.max_size);
  r.get("occlusion", s.occlusion);
  r.get("max_occluded_fraction", s.max_occluded_fraction);
  r.get("color_jitter", s.color_jitter);
  r.get("min_visible_area", s.min_visible_area);
  r.finish();
}

/// Applies the fields present in `j` on top of `cfg`.
inline void merge_config(RunConfig& cfg, const nlohmann::json& j) {
  detail::FieldReader root(j, "");
  root.get("seed", cfg.seed);
  if (const auto* d = root.child("data")) {
    detail::FieldReader r(*d, "data.");
    r.get("seed", cfg.data.seed);
    r.get("count", cfg.data.count);
    if (const auto* s = r.child("spec")) read_scene_spec(*s, cfg.data.spec, "data.spec.");
    r.finish();
  }
  if (const auto* m = root.child("model")) {
    detail::FieldReader r(*m, "model.");
    r.get("width", cfg.model.width);
    r.get("embed_dim", cfg.model.embed_dim);
    r.get("num_classes", cfg.model.num_classes);
    r.get("embed_stride", cfg.model.embed_stride);
    r.finish();
  }
  if (const auto* t = root.child("train")) {
    detail::FieldReader r(*t, "train.");
    auto& c = cfg.train;
    r.get("lambda1", c.lambda1);
    r.get("lambda2", c.lambda2);
    r.get("lr", c.lr);
    r.get("momentum", c.momentum);
    r.get("weight_decay", c.weight_decay);
    r.get("grad_clip", c.grad_clip);
    r.get("warmup_iters", c.warmup_iters);
    r.get("total_iters", c.total_iters);
    r.get("batch", c.batch);
    r.get("expand_factor", c.expand_factor);
    r.get("radius_factor", c.radius_factor);
    std::string mode;
    r.get("margin_mode", mode);
    if (!mode.empty()) c.margin_mode = margin_mode_from_string(mode);
    r.get("sigma0", c.sigma0);
    if (const auto* mg = r.child("margins")) {
      detail::FieldReader rm(*mg, "train.margins.");
      rm.get("delta_a", c.margins.delta_a);
      rm.get("delta_b", c.margins.delta_b);
      rm.get("delta", c.margins.delta);
      rm.finish();
    }
    std::string center;
    r.get("center_mode", center);
    if (!center.empty()) c.center_mode = center_mode_from_string(center);
    r.get("log_every", c.log_every);
    r.finish();
  }
  if (const auto* i = root.child("infer")) {
    detail::FieldReader r(*i, "infer.");
    r.get("score_thresh", cfg.infer.score_thresh);
    r.get("nms_iou", cfg.infer.nms_iou);
    r.get("top_k", cfg.infer.top_k);
    r.finish();
  }
  root.finish();
}

inline void RunConfig::validate() const {
  auto require = [](bool ok, const char* field, const char* msg) {
    if (!ok) throw ConfigError(field, msg);
  };
  try {
    data.spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("data.spec", e.what());
  }
  require(model.width > 0, "model.width", "must be positive");
  require(model.embed_dim > 0, "model.embed_dim", "must be positive");
  require(model.num_classes == kNumCategories, "model.num_classes", "must equal the number of scene categories");
  require(model.embed_stride == 2 || model.embed_stride == 4, "model.embed_stride", "must be 2 or 4");
  require(data.spec.height % model.embed_stride == 0 && data.spec.width % model.embed_stride == 0, "model.embed_stride",
          "must divide the image extents");
  require(train.lr > 0, "train.lr", "must be positive");
  require(train.momentum >= 0 && train.momentum < 1, "train.momentum", "must lie in [0, 1)");
  require(train.weight_decay >= 0, "train.weight_decay", "must be non-negative");
  require(train.grad_clip >= 0, "train.grad_clip", "must be non-negative");
  require(train.total_iters > 0, "train.total_iters", "must be positive");
  require(train.warmup_iters <= train.total_iters, "train.warmup_iters", "must not exceed train.total_iters");
  require(train.batch > 0, "train.batch", "must be positive");
  require(train.lambda1 >= 0, "train.lambda1", "must be non-negative");
  require(train.lambda2 >= 0, "train.lambda2", "must be non-negative");
  require(train.expand_factor >= 1, "train.expand_factor", "must be >= 1");
  require(train.radius_factor > 0, "train.radius_factor", "must be positive");
  require(train.sigma0 > 0, "train.sigma0", "must be positive");
  require(train.log_every > 0, "train.log_every", "must be positive");
  try {
    train.margins.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("train.margins", e.what());
  }
  require(infer.score_thresh >= 0 && infer.score_thresh <= 1, "infer.score_thresh", "must lie in [0, 1]");
  require(infer.nms_iou > 0 && infer.nms_iou <= 1, "infer.nms_iou", "must lie in (0, 1]");
  require(infer.top_k > 0, "infer.top_k", "must be positive");
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  merge_config(c, j);
  c.validate();
  return c;
}

// ---- writing ----------------------------------------------------------------------

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& t = c.train;
  const auto& s = c.data.spec;
  return {
      {"seed", c.seed},
      {"data",
       {{"seed", c.data.seed},
        {"count", c.data.count},
        {"spec",
         {{"height", s.height},
          {"width", s.width},
          {"min_count", s.min_count},
          {"max_count", s.max_count},
          {"min_size", s.min_size},
          {"max_size", s.max_size},
          {"occlusion", s.occlusion},
          {"max_occluded_fraction", s.max_occluded_fraction},
          {"color_jitter", s.color_jitter},
          {"min_visible_area", s.min_visible_area}}}}},
      {"model", c.model},
      {"train",
       {{"lambda1", t.lambda1},
        {"lambda2", t.lambda2},
        {"lr", t.lr},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"grad_clip", t.grad_clip},
        {"warmup_iters", t.warmup_iters},
        {"total_iters", t.total_iters},
        {"batch", t.batch},
        {"expand_factor", t.expand_factor},
        {"radius_factor", t.radius_factor},
        {"margin_mode", to_string(t.margin_mode)},
        {"sigma0", t.sigma0},
        {"margins", {{"delta_a", t.margins.delta_a}, {"delta_b", t.margins.delta_b}, {"delta", t.margins.delta}}},
        {"center_mode", to_string(t.center_mode)},
        {"log_every", t.log_every}}},
      {"infer", {{"score_thresh", c.infer.score_thresh}, {"nms_iou", c.infer.nms_iou}, {"top_k", c.infer.top_k}}},
  };
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Hash of everything that determines the trained weights (seed, data, model,
/// train). Inference settings are excluded so they can be tuned per run.
inline std::string config_hash(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("infer");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

}  // namespace embedmask

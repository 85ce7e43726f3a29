#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "embedmask/coupling.hpp"
#include "embedmask/model.hpp"
#include "embedmask/scenes.hpp"

using namespace embedmask;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.width = 8;
  c.embed_dim = 6;
  return c;
}

Tensor<float> test_image(std::size_t h = 32, std::size_t w = 32) {
  SceneSpec spec;
  spec.height = h;
  spec.width = w;
  spec.min_size = 8;
  spec.max_size = 16;
  return generate_scene(11, spec).image;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("embedmask_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Model, OutputShapes) {
  const auto cfg = small_model();
  const auto p = init_params<float>(1, cfg);
  const auto out = forward(test_image(32, 48), p);
  EXPECT_EQ(out.grid_h, 16u);
  EXPECT_EQ(out.grid_w, 24u);
  EXPECT_EQ(out.cls.shape(), (Shape{384, 3}));
  EXPECT_EQ(out.centerness.shape(), (Shape{384, 1}));
  EXPECT_EQ(out.box.shape(), (Shape{384, 4}));
  EXPECT_EQ(out.q.shape(), (Shape{384, 6}));
  EXPECT_EQ(out.precision.shape(), (Shape{384, 1}));
  EXPECT_EQ(out.pixel.shape(), (Shape{384, 6}));
  auto [x, y] = out.location_xy(25);
  EXPECT_DOUBLE_EQ(x, 3.0);
  EXPECT_DOUBLE_EQ(y, 3.0);
}

TEST(Model, EmbedStrideFourHalvesTheMap) {
  auto cfg = small_model();
  cfg.embed_stride = 4;
  const auto out = forward(test_image(), init_params<float>(1, cfg));
  EXPECT_EQ(out.embed_h, 8u);
  EXPECT_EQ(out.pixel.shape(), (Shape{64, 6}));
}

TEST(Model, RejectsBadImages) {
  const auto p = init_params<float>(1, small_model());
  EXPECT_THROW(forward(Tensor<float>(Shape{32, 32, 1}), p), ShapeError);
  EXPECT_THROW(forward(Tensor<float>(Shape{33, 32, 3}), p), std::invalid_argument);
}

TEST(Model, InitIsDeterministicPerSeed) {
  const auto a = init_params<float>(5, small_model());
  const auto b = init_params<float>(5, small_model());
  const auto c = init_params<float>(6, small_model());
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.tensors[i], b.tensors[i]) << a.names[i];
  EXPECT_NE(a["backbone.0.weight"], c["backbone.0.weight"]);
}

TEST(Model, ForwardIsDeterministic) {
  const auto p = init_params<float>(3, small_model());
  const auto img = test_image();
  const auto o1 = forward(img, p), o2 = forward(img, p);
  EXPECT_EQ(o1.cls.value(), o2.cls.value());
  EXPECT_EQ(o1.pixel.value(), o2.pixel.value());
  EXPECT_EQ(o1.box.value(), o2.box.value());
}

TEST(Model, InitialPriorsAndMarginBand) {
  const auto cfg = small_model();
  const auto out = forward(test_image(), init_params<float>(2, cfg));
  for (float v : out.cls.value().values()) EXPECT_NEAR(1.0 / (1.0 + std::exp(-v)), 0.01, 0.005);
  // Small output weights keep every box within a factor of two of the 8 px prior.
  for (float v : out.box.value().values()) EXPECT_NEAR(std::log(v / 8.0), 0.0, std::log(2.0));
  for (float a : out.precision.value().values()) {
    const double sigma = sigma_from_precision(a);
    EXPECT_GE(sigma, 0.1);
    EXPECT_LE(sigma, 10.0);
  }
}

TEST(Model, MarginStaysPositiveUnderExtremeWeights) {
  auto p = init_params<double>(4, small_model());
  for (double scale : {-1e3, 1e3}) {
    auto q = p;
    for (auto& v : q["margin.weight"].values()) v = scale;
    q["margin.bias"][0] = scale;
    for (auto& v : q["box.weight"].values()) v = scale;
    const auto out = forward(test_image().cast<double>(), q);
    for (double a : out.precision.value().values()) {
      EXPECT_GT(a, 0.0);
      EXPECT_TRUE(std::isfinite(a));
    }
    for (double b : out.box.value().values()) {
      EXPECT_GT(b, 0.0);
      EXPECT_TRUE(std::isfinite(b));
    }
  }
}

TEST(Model, FloatAndDoubleAgree) {
  const auto p = init_params<double>(9, small_model());
  const auto img = test_image();
  const auto od = forward(img.cast<double>(), p);
  const auto of = forward(img, p.cast<float>());
  for (std::size_t i = 0; i < od.pixel.value().numel(); ++i) EXPECT_NEAR(od.pixel.value()[i], of.pixel.value()[i], 1e-4);
  for (std::size_t i = 0; i < od.cls.value().numel(); ++i) EXPECT_NEAR(od.cls.value()[i], of.cls.value()[i], 1e-4);
}

TEST(Model, GradientsReachEveryParameter) {
  const auto p = init_params<double>(1, small_model());
  Tape<double> tape;
  const auto vars = bind(tape, p);
  const auto out = forward(test_image().cast<double>(), vars, p.config);
  const auto root = add(add(add(sum(out.cls), sum(out.centerness)), add(sum(out.box), sum(out.q))),
                        add(sum(out.precision), sum(out.pixel)));
  tape.backward(root);
  for (std::size_t i = 0; i < vars.size(); ++i) {
    double n = 0;
    const auto g = vars[i].grad();
    for (double v : g.values()) n += std::abs(v);
    EXPECT_GT(n, 0.0) << p.names[i];
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto dir = temp_dir("ckpt");
  auto p = init_params<float>(12, small_model());
  p["q.bias"][0] = 0.123456789f;
  save_checkpoint(dir, p, "abc123", {{"note", "x"}});
  CheckpointInfo info;
  const auto q = load_checkpoint<float>(dir, &info);
  EXPECT_EQ(info.config_hash, "abc123");
  EXPECT_EQ(info.extra["note"], "x");
  EXPECT_EQ(q.seed, 12u);
  EXPECT_EQ(q.config, p.config);
  ASSERT_EQ(q.names, p.names);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(q.tensors[i], p.tensors[i]);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsMissingAndCorrupt) {
  EXPECT_THROW(load_checkpoint<float>("/nonexistent/embedmask/ckpt"), CheckpointError);
  const auto dir = temp_dir("ckpt_bad");
  save_checkpoint(dir, init_params<float>(1, small_model()), "h");
  {
    std::ofstream os(dir / "manifest.json");
    os << "{not json";
  }
  EXPECT_THROW(load_checkpoint<float>(dir), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsLayoutMismatch) {
  const auto dir = temp_dir("ckpt_layout");
  save_checkpoint(dir, init_params<float>(1, small_model()), "h");
  // Swap in a tensor of the wrong shape.
  auto other = small_model();
  other.width = 4;
  const auto q = init_params<float>(1, other);
  save_tensor((dir / "backbone.0.weight.emtn").string(), q["backbone.0.weight"]);
  EXPECT_THROW(load_checkpoint<float>(dir), CheckpointError);
  std::filesystem::remove_all(dir);
}

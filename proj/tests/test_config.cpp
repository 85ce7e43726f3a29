#include <gtest/gtest.h>

#include <fstream>

#include "embedmask/ablation.hpp"

using namespace embedmask;

namespace {

std::string field_of(const nlohmann::json& j) {
  try {
    config_from_json(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<accepted>";
}

nlohmann::json tiny_grid() {
  return nlohmann::json::parse(R"({
    "base": {"data": {"spec": {"height": 32, "width": 32, "min_size": 10, "max_size": 16, "max_count": 2}},
             "model": {"width": 8, "embed_dim": 4},
             "train": {"total_iters": 6, "warmup_iters": 2, "batch": 2}},
    "seeds": [1, 2],
    "variants": [{"name": "a"}, {"name": "b", "overrides": {"train": {"margin_mode": "fixed_hinge"}}}],
    "comparisons": [{"name": "a_over_b", "a": "a", "b": "b"},
                    {"name": "close", "kind": "within", "a": "a", "b": "b", "tolerance": 2, "advisory": true}]
  })");
}

RunOutcome outcome(const std::string& v, std::uint64_t seed, double ap, bool diverged = false) {
  RunOutcome r;
  r.variant = v;
  r.seed = seed;
  r.report.AP = ap;
  r.diverged = diverged;
  return r;
}

}  // namespace

TEST(Config, DefaultsValidate) {
  const RunConfig c = config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.train.total_iters, 3000u);
  EXPECT_EQ(c.train.batch, 8u);
  EXPECT_DOUBLE_EQ(c.train.lambda1, 0.5);
  EXPECT_DOUBLE_EQ(c.train.lambda2, 0.1);
  EXPECT_DOUBLE_EQ(c.train.expand_factor, 1.2);
  EXPECT_DOUBLE_EQ(c.train.margins.delta, 0.8);
}

TEST(Config, ShippedDefaultMatchesBuiltIn) {
  std::ifstream is(EMBEDMASK_SOURCE_DIR "/configs/default.json");
  ASSERT_TRUE(is);
  const RunConfig c = config_from_json(nlohmann::json::parse(is));
  EXPECT_EQ(config_hash(c), config_hash(RunConfig{}));
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_EQ(field_of({{"train", {{"bogus", 1}}}}), "train.bogus");
  EXPECT_EQ(field_of({{"train", {{"lr", "fast"}}}}), "train.lr");
  EXPECT_EQ(field_of({{"train", {{"lr", -1.0}}}}), "train.lr");
  EXPECT_EQ(field_of({{"train", {{"batch", -2}}}}), "train.batch");
  EXPECT_EQ(field_of({{"train", {{"margin_mode", "wide"}}}}), "train.margin_mode");
  EXPECT_EQ(field_of({{"train", {{"margins", {{"delta_a", 2.0}}}}}}), "train.margins");
  EXPECT_EQ(field_of({{"model", {{"embed_stride", 3}}}}), "model.embed_stride");
  EXPECT_EQ(field_of({{"data", {{"spec", {{"height", 16}}}}}}), "data.spec");
  EXPECT_EQ(field_of({{"infer", {{"nms_iou", 0.0}}}}), "infer.nms_iou");
  EXPECT_EQ(field_of({{"surprise", true}}), "surprise");
  EXPECT_EQ(field_of(nlohmann::json::array()), "<root>");
}

TEST(Config, JsonRoundTripIsLossless) {
  RunConfig c;
  c.seed = 42;
  c.model.embed_dim = 16;
  c.train.margin_mode = MarginMode::constant;
  c.train.center_mode = CenterMode::pixel;
  c.train.lr = 0.0125;
  c.infer.top_k = 5;
  const RunConfig back = config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, HashCoversTrainingButNotInference) {
  RunConfig a;
  const std::string h = config_hash(a);
  EXPECT_EQ(h.size(), 16u);
  EXPECT_EQ(config_hash(RunConfig{}), h);
  RunConfig b = a;
  b.infer.score_thresh = 0.3;
  EXPECT_EQ(config_hash(b), h);
  b = a;
  b.seed = 2;
  EXPECT_NE(config_hash(b), h);
  b = a;
  b.train.lambda2 = 0.2;
  EXPECT_NE(config_hash(b), h);
  b = a;
  b.data.spec.occlusion = false;
  EXPECT_NE(config_hash(b), h);
  // FNV-1a reference values.
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
}

TEST(Config, MergeOverridesOnlyWhatIsPresent) {
  RunConfig c;
  c.train.lr = 0.02;
  merge_config(c, {{"train", {{"batch", 4}}}});
  EXPECT_EQ(c.train.batch, 4u);
  EXPECT_DOUBLE_EQ(c.train.lr, 0.02);
}

TEST(AblationGridParse, AcceptsTheShippedGrid) {
  std::ifstream is(EMBEDMASK_SOURCE_DIR "/configs/ablation_grid.json");
  ASSERT_TRUE(is);
  const auto g = grid_from_json(nlohmann::json::parse(is));
  EXPECT_EQ(g.seeds.size(), 3u);
  EXPECT_EQ(g.variants.size(), 4u);
  ASSERT_EQ(g.comparisons.size(), 3u);
  EXPECT_FALSE(g.comparisons[0].advisory);
  EXPECT_FALSE(g.comparisons[1].advisory);
  EXPECT_TRUE(g.comparisons[2].advisory);
  EXPECT_EQ(g.config_for(g.variants[1], 2).train.margin_mode, MarginMode::fixed_hinge);
  EXPECT_EQ(g.config_for(g.variants[3], 2).model.embed_dim, 8u);
}

TEST(AblationGridParse, RejectsMalformedGrids) {
  auto field = [](const nlohmann::json& j) {
    try {
      grid_from_json(j);
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string("<accepted>");
  };
  auto g = tiny_grid();
  EXPECT_EQ(field(g), "<accepted>");
  g["variants"].push_back({{"name", "a"}});
  EXPECT_EQ(field(g), "variants[].name");
  g = tiny_grid();
  g["comparisons"][0]["b"] = "nope";
  EXPECT_EQ(field(g), "comparisons[].b");
  g = tiny_grid();
  g["comparisons"][0]["kind"] = "less";
  EXPECT_EQ(field(g), "comparisons[].kind");
  g = tiny_grid();
  g["variants"][1]["overrides"]["train"]["lr"] = -1;
  EXPECT_EQ(field(g), "variants.b.train.lr");
  g = tiny_grid();
  g["seeds"] = nlohmann::json::array();
  EXPECT_EQ(field(g), "seeds");
  g = tiny_grid();
  g.erase("variants");
  EXPECT_EQ(field(g), "variants");
}

TEST(Summarize, MeansVerdictsAndDivergence) {
  const auto grid = grid_from_json(tiny_grid());
  const auto r = summarize(grid, {outcome("a", 1, 0.4), outcome("a", 2, 0.6), outcome("b", 1, 0.3),
                                  outcome("b", 2, 0.9, true)});
  EXPECT_DOUBLE_EQ(r.summary("a").mean.at("AP"), 0.5);
  EXPECT_DOUBLE_EQ(r.summary("b").mean.at("AP"), 0.3);
  EXPECT_EQ(r.summary("b").seeds_used, 1u);
  EXPECT_EQ(r.summary("b").diverged_seeds, std::vector<std::uint64_t>{2});
  ASSERT_EQ(r.verdicts.size(), 2u);
  EXPECT_TRUE(r.verdicts[0].pass);
  EXPECT_NEAR(r.verdicts[0].delta, 0.2, 1e-12);
  EXPECT_TRUE(r.binding_pass());

  const auto worse = summarize(grid, {outcome("a", 1, 0.2), outcome("b", 1, 0.2)});
  EXPECT_FALSE(worse.verdicts[0].pass);  // ties do not count as beating
  EXPECT_FALSE(worse.binding_pass());

  const auto lost = summarize(grid, {outcome("a", 1, 0.2, true), outcome("b", 1, 0.1)});
  EXPECT_FALSE(lost.verdicts[0].pass);
  const std::string csv = ablation_csv(r);
  EXPECT_NE(csv.find("variant,seeds,diverged,AP,AP50"), std::string::npos);
  EXPECT_NE(csv.find("a_over_b,greater,a,b,AP,"), std::string::npos);
  EXPECT_NE(ablation_table(r).find("[advisory]"), std::string::npos);
}

TEST(RunAblation, TinyGridIsDeterministic) {
  const auto grid = grid_from_json(tiny_grid());
  const RunConfig base = grid.config_for(grid.variants[0], 1);
  const Dataset data = generate_dataset(7, 6, base.data.spec, 0.5);
  const auto r1 = run_ablation(grid, data);
  AblationOptions two;
  two.threads = 2;
  std::size_t seen = 0;
  two.on_run = [&](const RunOutcome&) { ++seen; };
  const auto r2 = run_ablation(grid, data, two);
  EXPECT_EQ(seen, 4u);
  ASSERT_EQ(r1.runs.size(), 4u);
  for (std::size_t i = 0; i < r1.runs.size(); ++i) {
    EXPECT_EQ(r1.runs[i].variant, r2.runs[i].variant);
    EXPECT_EQ(r1.runs[i].seed, r2.runs[i].seed);
    EXPECT_EQ(r1.runs[i].report, r2.runs[i].report);
  }
  EXPECT_EQ(to_json(r1).dump(), to_json(r2).dump());
}

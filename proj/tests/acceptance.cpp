// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Pass criterion numbers as arguments to run a subset.
//
// Criteria 4-8 share one ablation over configs/ablation_grid.json (4 variants x
// 3 seeds on the default 250-scene dataset) plus a repeat of one run, so a full
// pass costs 13 default-length trainings.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>

#include "embedmask/embedmask.hpp"
#include "oracles.hpp"

using namespace embedmask;

namespace {

// Pinned tolerances.
constexpr double kPrimitiveGradTol = 1e-4;
constexpr double kCompositeGradTol = 1e-3;
constexpr double kGradSuiteSeconds = 300;
constexpr double kLovaszTol = 1e-9;
constexpr double kDualityBoundary = 1e-9;
constexpr double kMinAp50 = 0.5;
constexpr double kDimTolerance = 0.03;

struct Line {
  int id;
  std::string name;
  bool pass;
  std::string detail;
  bool advisory = false;
};

std::vector<Line> lines;
// ctest hides stdout of passing tests, so keep a copy next to the ablation json.
std::ofstream transcript("acceptance_report.txt");

void report(int id, std::string name, bool pass, std::string detail, bool advisory = false) {
  std::printf("%s [%d] %s: %s%s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str(),
              advisory && !pass ? " (advisory, non-fatal)" : "");
  std::fflush(stdout);
  transcript << (pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << detail
             << (advisory && !pass ? " (advisory, non-fatal)" : "") << std::endl;
  lines.push_back({id, std::move(name), pass, std::move(detail), advisory});
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  bool pass = true;
  std::string detail;
  for (const auto& name : gradcheck_names()) {
    const auto r = run_gradcheck(name, 20, 1);
    const double tol = name == "total" ? kCompositeGradTol : kPrimitiveGradTol;
    pass &= r.max_rel_error < tol;
    detail += name + " " + fmt("%.1e", r.max_rel_error) + ", ";
    std::cerr << "gradcheck " << name << " " << r.max_rel_error << "\n";
  }
  const double secs = seconds_since(t0);
  pass &= secs < kGradSuiteSeconds;
  report(1, "gradient suite", pass, detail + fmt("%.0f s", secs));
}

void lovasz_oracle() {
  double worst = 0;
  std::size_t cases = 0;
  for (std::size_t n = 1; n <= 6; ++n) {
    for (unsigned gmask = 1; gmask < (1u << n); ++gmask) {
      std::vector<std::uint8_t> gt(n);
      for (std::size_t i = 0; i < n; ++i) gt[i] = (gmask >> i) & 1u;
      for (unsigned m = 0; m < (1u << n); ++m) {
        // Unit error on the flipped set, none elsewhere.
        Tensor<double> phi(Shape{n});
        std::vector<std::uint8_t> pred(n);
        for (std::size_t i = 0; i < n; ++i) {
          const bool wrong = (m >> i) & 1u;
          phi[i] = wrong ? 0.5 : (gt[i] ? 1.0 : 0.0);
          pred[i] = wrong ? !gt[i] : gt[i];
        }
        const double got = lovasz_hinge(Var<double>::constant(phi), gt).item();
        worst = std::max(worst, std::abs(got - oracle::jaccard_loss(gt, pred)));
        ++cases;
      }
    }
  }
  report(2, "lovasz vertex oracle", worst <= kLovaszTol,
         fmt("max abs err %.1e over %.0f (gt, error-set) pairs", worst, static_cast<double>(cases)));
}

void coupling_duality() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-2.0, 2.0), s(0.05, 3.0);
  std::uniform_int_distribution<int> dim(1, 32);
  std::size_t mismatches = 0, skipped = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto d = static_cast<std::size_t>(dim(rng));
    std::vector<double> p(d), q(d);
    for (auto& v : p) v = u(rng);
    for (auto& v : q) v = u(rng);
    const double sigma = s(rng);
    const double delta = sigma * std::sqrt(2.0 * std::log(2.0));
    if (std::abs(std::sqrt(oracle::squared_distance(p, q)) - delta) < kDualityBoundary) {
      ++skipped;
      continue;
    }
    mismatches += hard_assign<double>(p, q, delta) != (gaussian_phi<double>(p, q, sigma) >= 0.5);
  }
  report(3, "coupling duality", mismatches == 0,
         fmt("%.0f mismatches in 1000 draws (%.0f on the boundary skipped)", static_cast<double>(mismatches),
             static_cast<double>(skipped)));
}

void evaluator_sanity() {
  const Dataset data = generate_dataset(RunConfig{}.data.seed, RunConfig{}.data.count, SceneSpec{});
  std::vector<std::vector<InstanceTarget>> gts;
  std::vector<std::vector<PredictedInstance>> preds;
  for (const auto& s : data.val) {
    gts.push_back(s.instances);
    preds.push_back(as_predictions(s.instances));
  }
  std::array<bool, kNumCategories> present{};
  const auto table = detail::ap_table(preds, gts, AreaRange{}, present);
  bool all_one = true;
  for (std::size_t c = 0; c < kNumCategories; ++c)
    for (double ap : table[c]) all_one &= !present[c] || ap == 1.0;
  // TP, FP, TP against two ground truths; hand-computed staircase 1 to recall
  // 0.5, then 2/3: (51 + 50 * 2/3) / 101.
  const double crafted = average_precision({1, 0, 1}, 2);
  const double hand = 0.834983498349835;
  report(9, "evaluator sanity", all_one && std::abs(crafted - hand) < 1e-12,
         fmt("ground truth AP %.3f at every threshold; crafted case %.6f vs %.6f", all_one ? 1.0 : 0.0, crafted, hand));
}

void learning_and_ablation(const std::set<int>& want) {
  std::ifstream is(EMBEDMASK_SOURCE_DIR "/configs/ablation_grid.json");
  if (!is) throw std::runtime_error("configs/ablation_grid.json not found");
  const AblationGrid grid = grid_from_json(nlohmann::json::parse(is));
  const RunConfig base = grid.config_for(grid.variants.front(), grid.seeds.front());
  const Dataset data = generate_dataset(base.data.seed, base.data.count, base.data.spec);
  std::cerr << "dataset: " << data.train.size() << " train, " << data.val.size() << " val\n";

  AblationOptions opt;
  if (const char* t = std::getenv("EMBEDMASK_THREADS")) opt.threads = std::max(1, std::atoi(t));
  std::map<std::pair<std::string, std::uint64_t>, std::ostringstream> logs;
  std::mutex logs_mutex;
  opt.log_for = [&](const std::string& v, std::uint64_t seed) -> std::ostream* {
    if (v != "default" || seed != grid.seeds.front()) return nullptr;
    std::lock_guard lock(logs_mutex);
    return &logs[{v, seed}];
  };
  const auto t0 = std::chrono::steady_clock::now();
  opt.on_run = [&](const RunOutcome& r) {
    std::cerr << fmt("[%6.0f s] ", seconds_since(t0)) << r.variant << " seed " << r.seed << ": AP "
              << r.report.AP << " AP50 " << r.report.AP50 << (r.diverged ? " DIVERGED" : "") << "\n";
  };
  const AblationResult res = run_ablation(grid, data, opt);
  std::cerr << ablation_table(res);
  {
    std::ofstream os("acceptance_ablation.json");
    os << to_json(res).dump(1) << '\n';
  }

  const auto& def = res.summary("default");
  if (want.count(4)) {
    std::string per;
    for (const auto& r : res.runs)
      if (r.variant == "default") per += fmt("%.3f ", r.report.AP50);
    report(4, "end-to-end learning", def.seeds_used == grid.seeds.size() && def.mean.at("AP50") >= kMinAp50,
           fmt("mean val AP50 %.3f (>= %.2f), AP %.3f; per seed ", def.mean.at("AP50"), kMinAp50, def.mean.at("AP")) + per);
  }
  auto verdict = [&](const std::string& name) -> const Verdict& {
    for (const auto& v : res.verdicts)
      if (v.comparison.name == name) return v;
    throw std::runtime_error("grid lacks comparison " + name);
  };
  if (want.count(5)) {
    const auto& v = verdict("learnable_vs_fixed_margin");
    report(5, "learnable margin beats fixed hinge", v.pass,
           fmt("AP %.4f vs %.4f, delta %+.4f", v.value_a, v.value_b, v.delta));
  }
  if (want.count(6)) {
    const auto& v = verdict("proposal_vs_pixel_center");
    report(6, "proposal center beats pixel center", v.pass,
           fmt("AP %.4f vs %.4f, delta %+.4f", v.value_a, v.value_b, v.delta));
  }
  if (want.count(7)) {
    const auto& v = verdict("embed_dim_8_vs_32");
    report(7, "embedding dim 8 close to 32",
           std::isfinite(v.delta) && std::abs(v.delta) <= kDimTolerance,
           fmt("AP %.4f vs %.4f, ", v.value_a, v.value_b) + fmt("|delta| %.4f (<= %.2f)", std::abs(v.delta), kDimTolerance),
           true);
  }
  if (want.count(8)) {
    const RunConfig cfg = grid.config_for(grid.variants.front(), grid.seeds.front());
    std::ostringstream log;
    TrainOptions to;
    to.log = &log;
    const TrainResult again = train(cfg, data.train, to);
    const EvalReport rep = evaluate_model(again.params, cfg, data.val);
    const RunOutcome* first = nullptr;
    for (const auto& r : res.runs)
      if (r.variant == "default" && r.seed == cfg.seed) first = &r;
    const std::string& log1 = logs.at({"default", cfg.seed}).str();
    const bool same_log = !log1.empty() && log1 == log.str();
    const bool same_report = first && first->report == rep;
    report(8, "determinism", same_log && same_report,
           std::string("loss log ") + (same_log ? "identical" : "differs") + " (" + std::to_string(log1.size()) +
               " bytes), eval report " + (same_report ? "identical" : "differs"));
  }
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> want;
  for (int i = 1; i < argc; ++i) want.insert(std::atoi(argv[i]));
  if (want.empty()) want = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  try {
    if (want.count(1)) gradient_suite();
    if (want.count(2)) lovasz_oracle();
    if (want.count(3)) coupling_duality();
    if (want.count(9)) evaluator_sanity();
    if (want.count(4) || want.count(5) || want.count(6) || want.count(7) || want.count(8)) learning_and_ablation(want);
  } catch (const std::exception& e) {
    std::printf("FAIL [0] harness: %s\n", e.what());
    return 1;
  }
  bool ok = true;
  for (const auto& l : lines) ok &= l.pass || l.advisory;
  const auto failed =
      static_cast<std::size_t>(std::count_if(lines.begin(), lines.end(), [](const Line& l) { return !l.pass; }));
  std::printf("%s: %zu criteria, %zu failed\n", ok ? "ACCEPTED" : "REJECTED", lines.size(), failed);
  transcript << (ok ? "ACCEPTED" : "REJECTED") << ": " << lines.size() << " criteria, " << failed << " failed\n";
  return ok ? 0 : 1;
}

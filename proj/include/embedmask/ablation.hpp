#pragma once

// Ablation harness: trains every (variant, seed) pair of a config grid under
// the same budget, evaluates each on the validation split, averages over seeds
// and checks the directional comparisons the grid declares.

#include <cmath>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "embedmask/config.hpp"
#include "embedmask/dataset_io.hpp"
#include "embedmask/eval.hpp"
#include "embedmask/train.hpp"
#include "json.hpp"

namespace embedmask {

inline std::vector<std::vector<PredictedInstance>> predict_scenes(const ModelParams<float>& params, const RunConfig& cfg,
                                                                  const std::vector<Scene>& scenes) {
  std::vector<std::vector<PredictedInstance>> preds;
  preds.reserve(scenes.size());
  for (const auto& s : scenes) preds.push_back(infer_masks(s.image, params, cfg.train, cfg.infer));
  return preds;
}

inline EvalReport evaluate_model(const ModelParams<float>& params, const RunConfig& cfg, const std::vector<Scene>& scenes) {
  std::vector<std::vector<InstanceTarget>> gts;
  for (const auto& s : scenes) gts.push_back(s.instances);
  return evaluate(predict_scenes(params, cfg, scenes), gts);
}

struct AblationVariant {
  std::string name;
  nlohmann::json overrides = nlohmann::json::object();
};

/// "greater": mean metric of `a` must exceed that of `b`.
/// "within": |mean(a) - mean(b)| must not exceed `tolerance`.
struct Comparison {
  std::string name;
  std::string kind = "greater";
  std::string a, b;
  std::string metric = "AP";
  double tolerance = 0.0;
  bool advisory = false;
};

struct AblationGrid {
  nlohmann::json base = nlohmann::json::object();
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<AblationVariant> variants;
  std::vector<Comparison> comparisons;

  RunConfig config_for(const AblationVariant& v, std::uint64_t seed) const {
    RunConfig c;
    try {
      merge_config(c, base);
      merge_config(c, v.overrides);
      c.seed = seed;
      c.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("variants." + v.name + "." + e.field(), e.message());
    }
    return c;
  }
};

inline AblationGrid grid_from_json(const nlohmann::json& j) {
  AblationGrid g;
  detail::FieldReader r(j, "");
  if (const auto* b = r.child("base")) g.base = *b;
  if (const auto* s = r.child("seeds")) {
    if (!s->is_array() || s->empty()) throw ConfigError("seeds", "expected a non-empty array");
    g.seeds.clear();
    for (const auto& v : *s) {
      if (!v.is_number_unsigned()) throw ConfigError("seeds", "expected non-negative integers");
      g.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  const auto* vs = r.child("variants");
  if (!vs || !vs->is_array() || vs->empty()) throw ConfigError("variants", "expected a non-empty array");
  for (const auto& v : *vs) {
    detail::FieldReader rv(v, "variants[].");
    AblationVariant av;
    rv.get("name", av.name);
    if (av.name.empty()) throw ConfigError("variants[].name", "required");
    if (const auto* o = rv.child("overrides")) av.overrides = *o;
    rv.finish();
    for (const auto& existing : g.variants)
      if (existing.name == av.name) throw ConfigError("variants[].name", "duplicate variant '" + av.name + "'");
    g.variants.push_back(std::move(av));
  }
  if (const auto* cs = r.child("comparisons")) {
    if (!cs->is_array()) throw ConfigError("comparisons", "expected an array");
    for (const auto& c : *cs) {
      detail::FieldReader rc(c, "comparisons[].");
      Comparison cmp;
      rc.get("name", cmp.name);
      rc.get("kind", cmp.kind);
      rc.get("a", cmp.a);
      rc.get("b", cmp.b);
      rc.get("metric", cmp.metric);
      rc.get("tolerance", cmp.tolerance);
      rc.get("advisory", cmp.advisory);
      rc.finish();
      if (cmp.kind != "greater" && cmp.kind != "within") throw ConfigError("comparisons[].kind", "expected greater or within");
      auto known = [&](const std::string& n) {
        for (const auto& v : g.variants)
          if (v.name == n) return true;
        return false;
      };
      if (!known(cmp.a)) throw ConfigError("comparisons[].a", "unknown variant '" + cmp.a + "'");
      if (!known(cmp.b)) throw ConfigError("comparisons[].b", "unknown variant '" + cmp.b + "'");
      g.comparisons.push_back(std::move(cmp));
    }
  }
  r.finish();
  for (const auto& v : g.variants) g.config_for(v, g.seeds.front());  // validate early
  return g;
}

struct RunOutcome {
  std::string variant;
  std::uint64_t seed = 0;
  EvalReport report;
  bool diverged = false;
  std::size_t skipped_steps = 0;
};

inline const std::vector<std::string>& ablation_metrics() {
  static const std::vector<std::string> m = {"AP", "AP50", "AP75", "AP_small", "AP_medium", "AP_large"};
  return m;
}

inline double metric_of(const EvalReport& r, const std::string& name) {
  if (name == "AP") return r.AP;
  if (name == "AP50") return r.AP50;
  if (name == "AP75") return r.AP75;
  if (name == "AP_small") return r.AP_small;
  if (name == "AP_medium") return r.AP_medium;
  if (name == "AP_large") return r.AP_large;
  throw ConfigError("comparisons[].metric", "unknown metric '" + name + "'");
}

struct VariantSummary {
  std::string name;
  std::map<std::string, double> mean;  // metric -> mean over non-diverged seeds
  std::size_t seeds_used = 0;
  std::vector<std::uint64_t> diverged_seeds;
};

struct Verdict {
  Comparison comparison;
  double value_a = 0, value_b = 0, delta = 0;
  bool pass = false;
};

struct AblationResult {
  std::vector<RunOutcome> runs;
  std::vector<VariantSummary> summaries;
  std::vector<Verdict> verdicts;

  const VariantSummary& summary(const std::string& name) const {
    for (const auto& s : summaries)
      if (s.name == name) return s;
    throw std::out_of_range("no variant " + name);
  }
  /// True when every non-advisory verdict passes.
  bool binding_pass() const {
    for (const auto& v : verdicts)
      if (!v.comparison.advisory && !v.pass) return false;
    return true;
  }
};

struct AblationOptions {
  std::size_t threads = 1;
  /// Called after each run finishes (serialized).
  std::function<void(const RunOutcome&)> on_run;
  /// Optional per-run log sink factory: returns a stream for (variant, seed) or nullptr.
  std::function<std::ostream*(const std::string&, std::uint64_t)> log_for;
};

inline AblationResult summarize(const AblationGrid& grid, std::vector<RunOutcome> runs) {
  AblationResult res;
  res.runs = std::move(runs);
  for (const auto& v : grid.variants) {
    VariantSummary s;
    s.name = v.name;
    for (const auto& m : ablation_metrics()) s.mean[m] = 0.0;
    for (const auto& r : res.runs) {
      if (r.variant != v.name) continue;
      if (r.diverged) {
        s.diverged_seeds.push_back(r.seed);
        continue;
      }
      ++s.seeds_used;
      for (const auto& m : ablation_metrics()) s.mean[m] += metric_of(r.report, m);
    }
    for (auto& [m, val] : s.mean) val = s.seeds_used ? val / static_cast<double>(s.seeds_used) : 0.0;
    res.summaries.push_back(std::move(s));
  }
  for (const auto& c : grid.comparisons) {
    Verdict v;
    v.comparison = c;
    const auto& a = res.summary(c.a);
    const auto& b = res.summary(c.b);
    v.value_a = a.seeds_used ? a.mean.at(c.metric) : std::nan("");
    v.value_b = b.seeds_used ? b.mean.at(c.metric) : std::nan("");
    v.delta = v.value_a - v.value_b;
    v.pass = std::isfinite(v.delta) && (c.kind == "greater" ? v.delta > 0 : std::abs(v.delta) <= c.tolerance);
    res.verdicts.push_back(v);
  }
  return res;
}

inline AblationResult run_ablation(const AblationGrid& grid, const Dataset& data, const AblationOptions& opt = {}) {
  struct Job {
    const AblationVariant* variant;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& v : grid.variants)
    for (auto s : grid.seeds) jobs.push_back({&v, s});
  std::vector<RunOutcome> runs(jobs.size());
  std::mutex report_mutex;
  parallel_for(jobs.size(), opt.threads, [&](std::size_t i) {
    const RunConfig cfg = grid.config_for(*jobs[i].variant, jobs[i].seed);
    TrainOptions to;
    to.log = opt.log_for ? opt.log_for(jobs[i].variant->name, jobs[i].seed) : nullptr;
    const TrainResult tr = train(cfg, data.train, to);
    RunOutcome r;
    r.variant = jobs[i].variant->name;
    r.seed = jobs[i].seed;
    r.diverged = tr.diverged;
    r.skipped_steps = tr.skipped_steps;
    if (!tr.diverged) r.report = evaluate_model(tr.params, cfg, data.val);
    runs[i] = r;
    if (opt.on_run) {
      std::lock_guard lock(report_mutex);
      opt.on_run(r);
    }
  });
  return summarize(grid, std::move(runs));
}

// ---- reporting ------------------------------------------------------------------

inline std::string ablation_csv(const AblationResult& r) {
  std::ostringstream os;
  os << "variant,seeds,diverged";
  for (const auto& m : ablation_metrics()) os << ',' << m;
  os << '\n' << std::setprecision(6) << std::fixed;
  for (const auto& s : r.summaries) {
    os << s.name << ',' << s.seeds_used << ',' << s.diverged_seeds.size();
    for (const auto& m : ablation_metrics()) os << ',' << s.mean.at(m);
    os << '\n';
  }
  os << "\ncomparison,kind,a,b,metric,value_a,value_b,delta,verdict,advisory\n";
  for (const auto& v : r.verdicts) {
    os << v.comparison.name << ',' << v.comparison.kind << ',' << v.comparison.a << ',' << v.comparison.b << ','
       << v.comparison.metric << ',' << v.value_a << ',' << v.value_b << ',' << v.delta << ','
       << (v.pass ? "PASS" : "FAIL") << ',' << (v.comparison.advisory ? "yes" : "no") << '\n';
  }
  return os.str();
}

inline std::string ablation_table(const AblationResult& r) {
  std::size_t wname = 7;
  for (const auto& s : r.summaries) wname = std::max(wname, s.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(wname)) << "variant" << "  seeds";
  for (const auto& m : ablation_metrics()) os << std::right << std::setw(10) << m;
  os << '\n' << std::fixed << std::setprecision(4);
  for (const auto& s : r.summaries) {
    os << std::left << std::setw(static_cast<int>(wname)) << s.name << std::right << std::setw(7) << s.seeds_used;
    for (const auto& m : ablation_metrics()) os << std::setw(10) << s.mean.at(m);
    if (!s.diverged_seeds.empty()) os << "  (" << s.diverged_seeds.size() << " diverged)";
    os << '\n';
  }
  for (const auto& v : r.verdicts) {
    os << (v.pass ? "PASS " : "FAIL ") << v.comparison.name << ": " << v.comparison.a << " - " << v.comparison.b << " "
       << v.comparison.metric << " delta " << std::showpos << v.delta << std::noshowpos
       << (v.comparison.kind == "within" ? " (|delta| <= " + std::to_string(v.comparison.tolerance) + ")" : " (> 0)")
       << (v.comparison.advisory ? " [advisory]" : "") << '\n';
  }
  return os.str();
}

inline nlohmann::json to_json(const AblationResult& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& x : r.runs) {
    runs.push_back({{"variant", x.variant}, {"seed", x.seed}, {"diverged", x.diverged}, {"skipped_steps", x.skipped_steps},
                    {"report", to_json(x.report)}});
  }
  nlohmann::json summaries = nlohmann::json::array();
  for (const auto& s : r.summaries) {
    summaries.push_back({{"variant", s.name}, {"seeds_used", s.seeds_used}, {"diverged_seeds", s.diverged_seeds}, {"mean", s.mean}});
  }
  nlohmann::json verdicts = nlohmann::json::array();
  for (const auto& v : r.verdicts) {
    verdicts.push_back({{"name", v.comparison.name},
                        {"kind", v.comparison.kind},
                        {"a", v.comparison.a},
                        {"b", v.comparison.b},
                        {"metric", v.comparison.metric},
                        {"delta", v.delta},
                        {"pass", v.pass},
                        {"advisory", v.comparison.advisory}});
  }
  return {{"runs", runs}, {"summaries", summaries}, {"verdicts", verdicts}};
}

}  // namespace embedmask

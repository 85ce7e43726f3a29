// embedmask: dataset generation, training, inference, evaluation, ablations and
// gradient checks. Diagnostics go to stderr; stdout gets one summary line.
//
// exit codes: 0 ok, 1 a requested threshold or check failed, 2 bad input/config/I-O

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "embedmask/embedmask.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace embedmask;

namespace {

// Carries the summary line of a run that completed but missed a threshold.
struct ThresholdFailure : std::runtime_error {
  json summary;
  explicit ThresholdFailure(json s) : std::runtime_error("threshold not met"), summary(std::move(s)) {}
};

std::size_t resolve_threads(std::size_t flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("EMBEDMASK_THREADS")) {
    try {
      std::size_t used = 0;
      const long v = std::stol(env, &used);
      if (used != std::string(env).size() || v <= 0) throw std::invalid_argument(env);
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("EMBEDMASK_THREADS", "expected a positive integer, got '" + std::string(env) + "'");
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// key=value with a dotted key; the value is read as JSON when it parses, else as a string.
void apply_override(json& j, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(kv, "override must look like key=value");
  const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw ConfigError(key, "empty path component");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    json& child = (*node)[part];
    if (!child.is_object()) child = json::object();
    node = &child;
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!path.empty()) merge_config(cfg, read_json_file(path));
  json extra = json::object();
  for (const auto& o : overrides) apply_override(extra, o);
  merge_config(cfg, extra);
  cfg.validate();
  return cfg;
}

Dataset load_or_generate(const std::string& data_dir, const RunConfig& cfg) {
  if (!data_dir.empty()) return read_dataset(data_dir);
  std::cerr << "no --data given; generating " << cfg.data.count << " scenes from seed " << cfg.data.seed << '\n';
  return generate_dataset(cfg.data.seed, cfg.data.count, cfg.data.spec);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DatasetError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw DatasetError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw DatasetError("write failed: " + path.string());
}

// ---- gen-data ------------------------------------------------------------------

struct GenArgs {
  std::string spec, out;
  std::uint64_t seed = 7;
  std::size_t count = 250;
  double split = 0.8;
};

json cmd_gen_data(const GenArgs& a) {
  SceneSpec spec;
  if (!a.spec.empty()) read_scene_spec(read_json_file(a.spec), spec, "spec.");
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("spec", e.what());
  }
  if (!(a.split >= 0.0 && a.split <= 1.0)) throw ConfigError("split", "must lie in [0, 1]");
  if (a.count == 0) std::cerr << "warning: --count 0 writes an empty dataset\n";
  ensure_dir(a.out);
  const Dataset d = generate_dataset(a.seed, a.count, spec, a.split);
  write_dataset(a.out, d, spec, a.seed);
  return {{"command", "gen-data"}, {"status", "ok"}, {"out", a.out}, {"train", d.train.size()}, {"val", d.val.size()}};
}

// ---- train ---------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out;
  std::vector<std::string> overrides;
  std::size_t threads = 0;
};

json cmd_train(const TrainArgs& a) {
  const RunConfig cfg = load_run_config(a.config, a.overrides);
  const Dataset data = load_or_generate(a.data, cfg);
  const fs::path out(a.out);
  ensure_dir(out);
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");

  std::ofstream log(out / "train_log.jsonl");
  if (!log) throw DatasetError("cannot open " + (out / "train_log.jsonl").string());
  TrainOptions opt;
  opt.threads = resolve_threads(a.threads);
  opt.log = &log;
  const auto t0 = std::chrono::steady_clock::now();
  opt.progress = [&](std::size_t iter, const LossBreakdown& b) {
    if ((iter + 1) % 100 != 0 && iter + 1 != cfg.train.total_iters) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "iter " << iter + 1 << "/" << cfg.train.total_iters << " loss " << b.total << " mask " << b.mask << " ("
              << static_cast<int>(secs) << "s)\n";
  };
  const TrainResult r = train(cfg, data.train, opt);
  log.close();

  const std::string hash = config_hash(cfg);
  save_checkpoint(out / "checkpoint", r.params, hash,
                  {{"config", to_json(cfg)}, {"skipped_steps", r.skipped_steps}, {"diverged", r.diverged}});
  json summary = {{"command", "train"},       {"status", r.diverged ? "diverged" : "ok"},
                  {"out", a.out},             {"config_hash", hash},
                  {"iters", cfg.train.total_iters}, {"skipped_steps", r.skipped_steps},
                  {"final", to_json(r.last)}};
  if (r.diverged) throw ThresholdFailure(summary);
  return summary;
}

// ---- shared by infer and eval ----------------------------------------------------

struct LoadedModel {
  ModelParams<float> params;
  RunConfig cfg;
};

LoadedModel load_model(const std::string& ckpt, const std::string& config_path, bool force) {
  CheckpointInfo info;
  LoadedModel m{load_checkpoint<float>(ckpt, &info), RunConfig{}};
  if (!config_path.empty()) {
    m.cfg = load_run_config(config_path, {});
    const std::string h = config_hash(m.cfg);
    if (h != info.config_hash) {
      if (!force) {
        throw ConfigError("config", "hash " + h + " does not match checkpoint hash " + info.config_hash +
                                        " (pass --force to use it anyway)");
      }
      std::cerr << "warning: config hash " << h << " differs from checkpoint " << info.config_hash << "; continuing\n";
    }
  } else if (info.extra.contains("config")) {
    merge_config(m.cfg, info.extra["config"]);
    m.cfg.validate();
  } else {
    m.cfg.model = m.params.config;
  }
  if (!(m.cfg.model == m.params.config)) throw ConfigError("model", "config model section does not match the checkpoint");
  return m;
}

// ---- infer ---------------------------------------------------------------------

struct InferArgs {
  std::string ckpt, images, out, config;
  bool overlay = false, force = false;
};

std::vector<fs::path> list_images(const fs::path& p) {
  if (fs::is_regular_file(p)) return {p};
  fs::path dir = p;
  if (fs::is_directory(p / "images")) dir = p / "images";
  if (!fs::is_directory(dir)) throw DatasetError("no such image file or directory: " + p.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

json cmd_infer(const InferArgs& a) {
  const LoadedModel m = load_model(a.ckpt, a.config, a.force);
  const auto files = list_images(a.images);
  if (files.empty()) std::cerr << "warning: no .ppm images under " << a.images << '\n';
  ensure_dir(a.out);
  std::size_t total = 0;
  for (const auto& f : files) {
    const Tensor<float> image = read_ppm(f.string());
    const auto preds = infer_masks(image, m.params, m.cfg.train, m.cfg.infer);
    total += preds.size();
    const std::string stem = f.stem().string();
    write_json_file(fs::path(a.out) / (stem + ".json"), predictions_to_json(stem, image.extent(0), image.extent(1), preds));
    if (a.overlay) write_ppm((fs::path(a.out) / (stem + "_overlay.ppm")).string(), render_overlay(image, preds));
  }
  return {{"command", "infer"}, {"status", "ok"}, {"out", a.out}, {"images", files.size()}, {"instances", total}};
}

// ---- eval ----------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, predictions, data, split = "val", out, config;
  double min_ap = -1, min_ap50 = -1;
  bool force = false;
};

json cmd_eval(const EvalArgs& a) {
  if (a.ckpt.empty() == a.predictions.empty()) throw ConfigError("eval", "give exactly one of --ckpt or --predictions");
  const Dataset data = read_dataset(a.data);
  if (a.split != "train" && a.split != "val") throw ConfigError("split", "expected train or val");
  const auto& scenes = a.split == "train" ? data.train : data.val;
  std::vector<std::vector<InstanceTarget>> gts;
  for (const auto& s : scenes) gts.push_back(s.instances);

  std::vector<std::vector<PredictedInstance>> preds;
  if (!a.ckpt.empty()) {
    const LoadedModel m = load_model(a.ckpt, a.config, a.force);
    preds = predict_scenes(m.params, m.cfg, scenes);
  } else {
    for (const auto& s : scenes) {
      const fs::path p = fs::path(a.predictions) / (s.id + ".json");
      preds.push_back(predictions_from_json(read_json_file(p), p.string()));
    }
  }
  const EvalReport report = evaluate(preds, gts);
  const json rj = to_json(report);
  if (!a.out.empty()) {
    const fs::path out(a.out);
    if (out.has_parent_path()) ensure_dir(out.parent_path());
    write_json_file(out, rj);
  }
  const bool ok = !(a.min_ap >= 0 && report.AP < a.min_ap) && !(a.min_ap50 >= 0 && report.AP50 < a.min_ap50);
  json summary = {{"command", "eval"}, {"status", ok ? "ok" : "below_threshold"}, {"AP", report.AP},
                  {"AP50", report.AP50}, {"AP75", report.AP75}, {"images", report.images}};
  if (!ok) throw ThresholdFailure(summary);
  return summary;
}

// ---- ablate --------------------------------------------------------------------

struct AblateArgs {
  std::string grid, data, out;
  std::size_t threads = 0;
};

json cmd_ablate(const AblateArgs& a) {
  const AblationGrid grid = grid_from_json(read_json_file(a.grid));
  const Dataset data = load_or_generate(a.data, grid.config_for(grid.variants.front(), grid.seeds.front()));
  const fs::path out(a.out);
  ensure_dir(out / "configs");
  ensure_dir(out / "logs");
  for (const auto& v : grid.variants)
    for (auto s : grid.seeds)
      write_text(out / "configs" / (v.name + "_seed" + std::to_string(s) + ".json"), to_json(grid.config_for(v, s)).dump(2) + "\n");

  std::vector<std::unique_ptr<std::ofstream>> logs;
  std::mutex logs_mutex;
  AblationOptions opt;
  opt.threads = resolve_threads(a.threads);
  opt.log_for = [&](const std::string& variant, std::uint64_t seed) -> std::ostream* {
    std::lock_guard lock(logs_mutex);
    logs.push_back(std::make_unique<std::ofstream>(out / "logs" / (variant + "_seed" + std::to_string(seed) + ".jsonl")));
    return logs.back().get();
  };
  opt.on_run = [](const RunOutcome& r) {
    std::cerr << "done " << r.variant << " seed " << r.seed << (r.diverged ? " (diverged)" : "") << " AP " << r.report.AP
              << " AP50 " << r.report.AP50 << '\n';
  };
  const AblationResult res = run_ablation(grid, data, opt);
  logs.clear();
  write_text(out / "ablation.csv", ablation_csv(res));
  write_text(out / "ablation.txt", ablation_table(res));
  write_json_file(out / "ablation.json", to_json(res));
  std::cerr << ablation_table(res);

  json verdicts = json::object();
  for (const auto& v : res.verdicts) verdicts[v.comparison.name] = v.pass ? "PASS" : (v.comparison.advisory ? "ADVISORY-FAIL" : "FAIL");
  json summary = {{"command", "ablate"}, {"status", res.binding_pass() ? "ok" : "comparison_failed"}, {"out", a.out},
                  {"runs", res.runs.size()}, {"verdicts", verdicts}};
  if (!res.binding_pass()) throw ThresholdFailure(summary);
  return summary;
}

// ---- gradcheck -----------------------------------------------------------------

struct GradArgs {
  std::string which = "all";
  std::size_t trials = 20;
  std::uint64_t seed = 1;
};

// Returns the last line; earlier checks print their own line first.
json cmd_gradcheck(const GradArgs& a, bool& all_pass) {
  std::vector<std::string> names;
  if (a.which == "all") {
    names = gradcheck_names();
  } else {
    if (std::find(gradcheck_names().begin(), gradcheck_names().end(), a.which) == gradcheck_names().end()) {
      throw ConfigError("which", "unknown check '" + a.which + "'");
    }
    names = {a.which};
  }
  all_pass = true;
  json checks = json::array();
  for (const auto& name : names) {
    const GradSuiteResult r = run_gradcheck(name, a.trials, a.seed);
    all_pass &= r.pass;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s %s max_rel_err %.2e tol %.0e trials %zu", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                  r.max_rel_error, r.tolerance, r.trials);
    std::cout << buf << std::endl;
    checks.push_back({{"name", r.name}, {"max_rel_err", r.max_rel_error}, {"tolerance", r.tolerance}, {"pass", r.pass}});
  }
  return {{"command", "gradcheck"}, {"status", all_pass ? "ok" : "failed"}, {"trials", a.trials}, {"checks", checks}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"embedmask: embedding-coupling instance segmentation on synthetic scenes"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  c_gen->add_option("--spec", gen.spec, "scene spec JSON (defaults otherwise)");
  c_gen->add_option("--seed", gen.seed, "dataset seed");
  c_gen->add_option("--out", gen.out, "output directory")->required();
  c_gen->add_option("--count", gen.count, "number of scenes");
  c_gen->add_option("--split", gen.split, "fraction of scenes in the train split");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train a model");
  c_train->add_option("--config", tr.config, "run config JSON");
  c_train->add_option("--data", tr.data, "dataset directory (generated from the config when absent)");
  c_train->add_option("--out", tr.out, "run directory")->required();
  c_train->add_option("--set", tr.overrides, "override, e.g. train.lr=0.02 (repeatable)");
  c_train->add_option("--threads", tr.threads, "worker threads (EMBEDMASK_THREADS otherwise)");

  InferArgs inf;
  auto* c_infer = app.add_subcommand("infer", "predict masks for images");
  c_infer->add_option("--ckpt", inf.ckpt, "checkpoint directory")->required();
  c_infer->add_option("--images", inf.images, "PPM file, directory of PPMs, or dataset split directory")->required();
  c_infer->add_option("--out", inf.out, "output directory")->required();
  c_infer->add_option("--config", inf.config, "run config to use instead of the stored one");
  c_infer->add_flag("--overlay", inf.overlay, "also write contour overlays");
  c_infer->add_flag("--force", inf.force, "accept a config whose hash differs from the checkpoint");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "mask AP on a dataset split");
  c_eval->add_option("--ckpt", ev.ckpt, "checkpoint directory");
  c_eval->add_option("--predictions", ev.predictions, "directory of per-image prediction JSON");
  c_eval->add_option("--data", ev.data, "dataset directory")->required();
  c_eval->add_option("--split", ev.split, "train or val");
  c_eval->add_option("--out", ev.out, "report JSON path");
  c_eval->add_option("--config", ev.config, "run config to use instead of the stored one");
  c_eval->add_flag("--force", ev.force, "accept a config whose hash differs from the checkpoint");
  c_eval->add_option("--min-ap", ev.min_ap, "exit 1 when AP falls below");
  c_eval->add_option("--min-ap50", ev.min_ap50, "exit 1 when AP50 falls below");

  AblateArgs ab;
  auto* c_ablate = app.add_subcommand("ablate", "train and compare a grid of variants");
  c_ablate->add_option("--grid", ab.grid, "ablation grid JSON")->required();
  c_ablate->add_option("--data", ab.data, "dataset directory (generated from the base config when absent)");
  c_ablate->add_option("--out", ab.out, "output directory")->required();
  c_ablate->add_option("--threads", ab.threads, "worker threads (EMBEDMASK_THREADS otherwise)");

  GradArgs gr;
  auto* c_grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  c_grad->add_option("--which", gr.which, "hinge, phi, mask_loss, smooth, total or all");
  c_grad->add_option("--trials", gr.trials, "random points per check");
  c_grad->add_option("--seed", gr.seed, "seed for the random points");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (c_grad->parsed()) {
      bool pass = false;
      std::cout << cmd_gradcheck(gr, pass).dump() << std::endl;
      return pass ? 0 : 1;
    }
    json summary;
    if (c_gen->parsed()) summary = cmd_gen_data(gen);
    if (c_train->parsed()) summary = cmd_train(tr);
    if (c_infer->parsed()) summary = cmd_infer(inf);
    if (c_eval->parsed()) summary = cmd_eval(ev);
    if (c_ablate->parsed()) summary = cmd_ablate(ab);
    std::cout << summary.dump() << std::endl;
    return 0;
  } catch (const ThresholdFailure& f) {
    std::cout << f.summary.dump() << std::endl;
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    std::cout << json{{"command", command}, {"status", "error"}, {"field", e.field()}, {"message", e.what()}}.dump() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    std::cout << json{{"command", command}, {"status", "error"}, {"message", e.what()}}.dump() << std::endl;
    return 2;
  }
}

#include "ma3/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "ma3/checkpoint.hpp"
#include "ma3/config.hpp"
#include "ma3/gradcheck.hpp"
#include "ma3/trainer.hpp"

namespace fs = std::filesystem;

namespace ma3 {

namespace {

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(3) << v;
  return os.str();
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

fs::path run_root() {
  const char* env = std::getenv("MA3_RUN_DIR");
  return env && *env ? fs::path(env) : fs::path("runs");
}

// Options shared by train and lambda-search: config file, generic overrides and a few named flags.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::string> mode;
  std::optional<double> lambda;
  std::optional<std::uint64_t> seed;
  std::optional<int> episodes;
  std::optional<double> dropout;
  std::optional<std::string> run;

  void attach(CLI::App& app, bool with_mode) {
    app.add_option("--config", config_path, "flat key = value config file");
    app.add_option("--set", sets, "override one config key (key=value); repeatable");
    if (with_mode) app.add_option("--mode", mode, "baseline | standard-aug | ma3 | ma3-lambda0");
    if (with_mode) app.add_option("--lambda", lambda, "identity-regularizer weight");
    app.add_option("--seed", seed, "master seed (default 0)");
    app.add_option("--episodes", episodes, "training episodes");
    app.add_option("--dropout", dropout, "STN dropout rate");
    app.add_option("--run", run, "run name (default <mode>-s<seed>)");
  }

  TrainConfig resolve() const {
    TrainConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'", kv);
      set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (mode) cfg.mode = parse_mode(*mode);
    if (lambda) cfg.lambda = *lambda;
    if (seed) cfg.seed = *seed;
    if (episodes) cfg.episodes = *episodes;
    if (dropout) cfg.dropout_rate = *dropout;
    if (run) cfg.run = *run;
    if (cfg.run.empty()) cfg.run = to_string(cfg.mode) + "-s" + std::to_string(cfg.seed);
    cfg.validate();
    return cfg;
  }
};

nlohmann::ordered_json dataset_descriptor(const TaskData& task) {
  nlohmann::ordered_json d;
  d["source"] = task.dataset.source;
  d["classes"] = task.dataset.num_classes();
  d["images"] = task.dataset.num_images();
  d["height"] = task.dataset.height;
  d["width"] = task.dataset.width;
  d["train_classes"] = task.split.train.size();
  d["val_classes"] = task.split.val.size();
  d["test_classes"] = task.split.test.size();
  return d;
}

std::string eval_line(const EvalResult& e, std::uint64_t seed) {
  return "accuracy " + fixed(e.mean, 4) + "±" + fixed(e.half_width, 4) + " episodes " + std::to_string(e.episodes) +
         " seed " + std::to_string(seed);
}

// --- train --------------------------------------------------------------------

int cmd_train(const ConfigFlags& flags, std::ostream& out, std::ostream& err) {
  const TrainConfig cfg = flags.resolve();
  const TaskData task = load_task(cfg);
  const fs::path dir = run_root() / cfg.run;
  fs::create_directories(dir);

  const std::string text = config_to_text(cfg);
  nlohmann::ordered_json manifest;
  manifest["run"] = cfg.run;
  manifest["mode"] = to_string(cfg.mode);
  nlohmann::ordered_json resolved;
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find(" = ");
    resolved[line.substr(0, eq)] = line.substr(eq + 3);
  }
  manifest["config"] = resolved;
  manifest["config_hash"] = git_blob_hash(text);
  manifest["dataset"] = dataset_descriptor(task);
  manifest["tool_version"] = kToolVersion;
  manifest["started"] = utc_timestamp();
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
  std::ofstream(dir / "config.txt") << text;

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  std::ofstream timing(dir / "timing.jsonl", std::ios::trunc);
  if (!metrics || !timing) throw IoError("train: cannot write into " + dir.string());

  RunHooks hooks;
  hooks.on_record = [&](const MetricsRecord& r) {
    metrics << metrics_json(r) << "\n";
    timing << "{\"episode\":" << r.episode << ",\"wall_ms\":" << fixed(r.wall_ms, 3) << "}\n";
  };
  hooks.on_checkpoint = [&](long episode, const std::function<void(const std::string&)>& write) {
    write((dir / (cfg.run + "-" + std::to_string(episode) + ".ckpt")).string());
  };

  RunResult res;
  try {
    res = run_training(cfg, task, hooks);
  } catch (const NonFiniteLoss& e) {
    metrics << metrics_json(e.record) << "\n";
    err << "error: " << e.what() << " (loss " << e.record.loss << ", reg " << e.record.reg << ")\n";
    return kExitNonFinite;
  }

  nlohmann::ordered_json result;
  result["val_acc"] = res.val.mean;
  result["val_half_width"] = res.val.half_width;
  result["test_acc"] = res.test.mean;
  result["test_half_width"] = res.test.half_width;
  result["test_episodes"] = res.test.episodes;
  std::ofstream(dir / "result.json") << result.dump(2) << "\n";
  out << "run " << cfg.run << " -> " << dir.string() << "\n";
  if (res.test.episodes > 0) out << "test " << eval_line(res.test, cfg.seed) << "\n";
  return kExitOk;
}

// --- eval ---------------------------------------------------------------------

template <typename Scalar>
EvalResult eval_checkpoint(const Checkpoint& ckpt, const TaskData& task, const TrainConfig& cfg,
                           const std::vector<int>& classes, int episodes, std::uint64_t seed) {
  const auto net = classifier_from_section<Scalar>(ckpt.section("classifier"));
  const auto eps = sample_episodes(task.dataset, classes, episodes, cfg.n_way, cfg.k_shot, cfg.q_query,
                                   derive_seed(seed, kStreamTestEpisodes));
  return evaluate<Scalar>(eps, net, {cfg.head, cfg.temperature});
}

int cmd_eval(const std::string& path, int episodes, std::uint64_t seed, const std::string& split,
             const std::vector<std::string>& sets, std::ostream& out) {
  if (episodes <= 0) throw ConfigError("eval: --episodes must be positive", "episodes");
  const Checkpoint ckpt = load_checkpoint(path);
  TrainConfig cfg;
  const auto it = ckpt.meta.find("config");
  if (it != ckpt.meta.end()) apply_config_text(cfg, it->second);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'", kv);
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  const TaskData task = load_task(cfg);
  const std::vector<int>* classes = nullptr;
  if (split == "test") classes = &task.split.test;
  else if (split == "val") classes = &task.split.val;
  else if (split == "train") classes = &task.split.train;
  else throw ConfigError("eval: --split must be train, val or test", "split");
  if (classes->empty()) throw ConfigError("eval: the " + split + " split is empty", "split");

  const EvalResult r = ckpt.precision_bits == 64 ? eval_checkpoint<double>(ckpt, task, cfg, *classes, episodes, seed)
                                                 : eval_checkpoint<float>(ckpt, task, cfg, *classes, episodes, seed);
  out << eval_line(r, seed) << "\n";
  return kExitOk;
}

// --- gradcheck ----------------------------------------------------------------

int cmd_gradcheck(const std::string& preset, std::uint64_t seed, std::ostream& out) {
  GradcheckOptions opt = gradcheck_preset(preset);
  opt.seed = seed;
  const GradcheckReport rep = run_gradcheck(opt);
  out << std::left << std::setw(18) << "component" << std::setw(14) << "max_rel_err" << std::setw(8) << "trials" << "kinks_skipped\n";
  for (const auto& c : rep.components)
    out << std::left << std::setw(18) << c.name << std::setw(14) << sci(c.max_rel_error) << std::setw(8) << c.trials << c.skipped << "\n";
  if (rep.passed()) {
    out << "PASS all components <= 1e-3\n";
    return kExitOk;
  }
  out << "FAIL worst " << rep.worst().name << " " << sci(rep.worst().max_rel_error) << "\n";
  return kExitGradcheck;
}

// --- approx-verify ------------------------------------------------------------

int cmd_approx_verify(const std::vector<double>& magnitudes, int points, double z0, std::uint64_t seed,
                      std::ostream& out) {
  if (magnitudes.empty()) throw ConfigError("approx-verify: no magnitudes given", "magnitudes");
  for (double m : magnitudes)
    if (!(m >= 0)) throw RegimeError("approx-verify: magnitudes must be non-negative");
  if (!(z0 > 0)) throw RegimeError("approx-verify: z0 must be positive");
  out << std::left << std::setw(12) << "magnitude" << std::setw(14) << "residual" << "ratio\n";
  bool ok = true;
  double prev_m = 0, prev_r = 0;
  for (std::size_t i = 0; i < magnitudes.size(); ++i) {
    const auto row = approx_fit_residual(magnitudes[i], points, z0, seed);
    out << std::left << std::setw(12) << magnitudes[i] << std::setw(14) << sci(row.residual);
    if (i > 0 && prev_r > 0) {
      const double ratio = row.residual / prev_r;
      const bool doubling = std::abs(magnitudes[i] - 2 * prev_m) <= 1e-12 * magnitudes[i];
      out << fixed(ratio, 3);
      if (doubling && !(ratio >= 2.5 && ratio <= 6.0)) {
        ok = false;
        out << "  outside [2.5, 6]";
      }
    } else {
      out << "-";
    }
    out << "\n";
    prev_m = magnitudes[i];
    prev_r = row.residual;
  }
  out << (ok ? "PASS" : "FAIL") << " doubling ratios within [2.5, 6]\n";
  return ok ? kExitOk : kExitFailure;
}

// --- lambda-search ------------------------------------------------------------

int cmd_lambda_search(const ConfigFlags& flags, const std::vector<double>& grid, std::ostream& out) {
  const TrainConfig cfg = flags.resolve();
  const TaskData task = load_task(cfg);
  const auto res = lambda_search(cfg, task, grid.empty() ? default_lambda_grid() : grid);
  out << std::left << std::setw(7) << "stage" << std::setw(12) << "lambda" << "val_acc\n";
  for (const auto& r : res.table)
    out << std::left << std::setw(7) << r.stage << std::setw(12) << r.lambda << fixed(r.val_acc, 4) << "±"
        << fixed(r.half_width, 4) << "\n";
  out << "best_lambda " << res.best_lambda << "\n";
  return kExitOk;
}

// --- make-synth ---------------------------------------------------------------

int cmd_make_synth(const std::string& dir, int classes, int per_class, int size, std::uint64_t seed, std::ostream& out) {
  if (classes < 2) throw ConfigError("make-synth: --classes must be at least 2", "classes");
  if (per_class < 1) throw ConfigError("make-synth: --per-class must be positive", "per-class");
  const auto ds = make_synthetic(classes, per_class, size, seed);
  export_dataset(ds, dir);
  out << "wrote " << ds.num_classes() << " classes x " << per_class << " images to " << dir << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adversarial affine augmentation for few-shot learning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  ConfigFlags train_flags;
  auto* train = app.add_subcommand("train", "train one run and write manifest, metrics and checkpoints");
  train_flags.attach(*train, true);

  std::string ckpt_path, split = "test";
  int eval_episodes = 600;
  std::uint64_t eval_seed = 0;
  std::vector<std::string> eval_sets;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint without warping");
  eval->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  eval->add_option("--episodes", eval_episodes, "evaluation episodes (default 600)");
  eval->add_option("--seed", eval_seed, "episode seed (default 0)");
  eval->add_option("--split", split, "train | val | test (default test)");
  eval->add_option("--set", eval_sets, "override a dataset key (key=value); repeatable");

  std::string preset = "default";
  std::uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  gradcheck->add_option("--preset", preset, "default | quick | forced-bug");
  gradcheck->add_option("--seed", gc_seed, "seed (default 0)");

  std::vector<double> magnitudes{0.01, 0.02, 0.04};
  int points = 200;
  double z0 = 10;
  std::uint64_t av_seed = 0;
  auto* approx = app.add_subcommand("approx-verify", "affine-fit residual of perturbed pinhole projections");
  approx->add_option("--magnitudes", magnitudes, "comma-separated perturbation magnitudes")->delimiter(',');
  approx->add_option("--points", points, "scene points (default 200)");
  approx->add_option("--z0", z0, "object depth (default 10)");
  approx->add_option("--seed", av_seed, "seed (default 0)");

  ConfigFlags search_flags;
  std::vector<double> grid;
  auto* search = app.add_subcommand("lambda-search", "coarse log grid then fine linear grid over lambda");
  search_flags.attach(*search, false);
  search->add_option("--grid", grid, "comma-separated coarse grid")->delimiter(',');

  std::string synth_dir;
  int synth_classes = 90, synth_per_class = 20, synth_size = 28;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("make-synth", "export the synthetic glyph dataset as PNG files");
  synth->add_option("--out", synth_dir, "output directory")->required();
  synth->add_option("--classes", synth_classes, "classes (default 90)");
  synth->add_option("--per-class", synth_per_class, "images per class (default 20)");
  synth->add_option("--size", synth_size, "image side in pixels (default 28)");
  synth->add_option("--seed", synth_seed, "seed (default 0)");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(train_flags, out, err);
    if (*eval) return cmd_eval(ckpt_path, eval_episodes, eval_seed, split, eval_sets, out);
    if (*gradcheck) return cmd_gradcheck(preset, gc_seed, out);
    if (*approx) return cmd_approx_verify(magnitudes, points, z0, av_seed, out);
    if (*search) return cmd_lambda_search(search_flags, grid, out);
    if (*synth) return cmd_make_synth(synth_dir, synth_classes, synth_per_class, synth_size, synth_seed, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what();
    if (!e.key().empty()) err << " [key: " << e.key() << "]";
    err << "\n";
    return kExitUsage;
  } catch (const RegimeError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CheckpointVersionError& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace ma3

#include "ma3/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <set>

#include "json.hpp"

#include "ma3/checkpoint.hpp"
#include "ma3/config.hpp"

namespace ma3 {

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Baseline: return "baseline";
    case TrainMode::StandardAug: return "standard-aug";
    case TrainMode::Ma3: return "ma3";
    case TrainMode::Ma3Lambda0: return "ma3-lambda0";
  }
  return "?";
}

TrainMode parse_mode(const std::string& s) {
  if (s == "baseline") return TrainMode::Baseline;
  if (s == "standard-aug") return TrainMode::StandardAug;
  if (s == "ma3") return TrainMode::Ma3;
  if (s == "ma3-lambda0") return TrainMode::Ma3Lambda0;
  throw ConfigError("unknown mode '" + s + "' (baseline, standard-aug, ma3, ma3-lambda0)", "mode");
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* key, const std::string& what) {
    if (!ok) throw ConfigError(std::string("config: ") + key + " " + what, key);
  };
  require(lambda >= 0, "lambda", "must be non-negative");
  require(dropout_rate >= 0 && dropout_rate <= 1, "dropout_rate", "must lie in [0, 1]");
  require(theta0 >= 0, "theta0", "must be non-negative");
  require(eps_s >= 0 && eps_s < 1, "eps_s", "must lie in [0, 1)");
  require(lr_cls > 0, "lr_cls", "must be positive");
  require(lr_adv > 0, "lr_adv", "must be positive");
  require(lr_halve_every >= 0, "lr_halve_every", "must be non-negative");
  require(episodes > 0, "episodes", "must be positive");
  require(eval_every > 0, "eval_every", "must be positive");
  require(val_episodes >= 0, "val_episodes", "must be non-negative");
  require(test_episodes >= 0, "test_episodes", "must be non-negative");
  require(n_way >= 2, "n_way", "must be at least 2");
  require(k_shot >= 1, "k_shot", "must be positive");
  require(q_query >= 1, "q_query", "must be positive");
  require(temperature > 0, "temperature", "must be positive");
  require(blocks >= 1, "blocks", "must be positive");
  require(filters >= 1, "filters", "must be positive");
  require(h_dim >= 0, "h_dim", "must be non-negative");
  require(bn_momentum > 0 && bn_momentum <= 1, "bn_momentum", "must lie in (0, 1]");
  require(adv_blocks >= 1, "adv_blocks", "must be positive");
  require(adv_filters >= 1, "adv_filters", "must be positive");
  require(image_size >= 2, "image_size", "must be at least 2");
  require((image_size >> blocks) >= 1, "blocks", "leaves no spatial extent at this image_size");
  require((image_size >> adv_blocks) >= 1, "adv_blocks", "leaves no spatial extent at this image_size");
  require(images_per_class >= 1, "images_per_class", "must be positive");
  require(train_classes >= 0 && val_classes >= 0 && test_classes >= 0, "train_classes",
          "and the other class counts must be non-negative");
  require(dataset == "synthetic" || dataset == "toy" || dataset == "omniglot" || dataset == "directory", "dataset",
          "must be synthetic, toy, omniglot or directory");
}

std::string metrics_json(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["episode"] = r.episode;
  j["loss"] = r.loss;
  j["reg"] = r.reg;
  j["objective"] = r.objective;
  j["train_acc"] = r.train_acc;
  if (r.val_acc)
    j["val_acc"] = *r.val_acc;
  else
    j["val_acc"] = nullptr;
  j["lambda"] = r.lambda;
  j["seed"] = r.seed;
  return j.dump();
}

// ---------------------------------------------------------------------------

namespace {

GrayImage rotate90(const GrayImage& img) {
  GrayImage out(img.width, img.height, img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int i = 0; i < img.height; ++i)
      for (int j = 0; j < img.width; ++j) out.at(c, img.width - 1 - j, i) = img.at(c, i, j);
  return out;
}

void add_rotated_classes(ClassDataset& ds, std::vector<int>& split) {
  std::vector<int> extra;
  for (int cls : split) {
    ImageClass cur = ds.classes[cls];
    for (int r = 1; r < 4; ++r) {
      for (auto& img : cur.images) img = rotate90(img);
      ImageClass rot{ds.classes[cls].id + "@rot" + std::to_string(90 * r), cur.images};
      extra.push_back(static_cast<int>(ds.classes.size()));
      ds.classes.push_back(std::move(rot));
    }
  }
  split.insert(split.end(), extra.begin(), extra.end());
}

int min_images(const TrainConfig& cfg) { return cfg.k_shot + cfg.q_query; }

}  // namespace

TaskData load_task(const TrainConfig& cfg) {
  cfg.validate();
  TaskData task;
  const int total = cfg.train_classes + cfg.val_classes + cfg.test_classes;
  if (cfg.dataset == "synthetic" || cfg.dataset == "toy") {
    task.dataset = cfg.dataset == "synthetic"
                       ? make_synthetic(total, cfg.images_per_class, cfg.image_size, cfg.data_seed)
                       : make_toy(total, cfg.images_per_class, cfg.image_size, cfg.data_seed);
    task.split = contiguous_split(cfg.train_classes, cfg.val_classes, cfg.test_classes);
    task.split.seed = cfg.data_seed;
  } else if (cfg.dataset == "omniglot") {
    // Background alphabets train (minus a held-out validation sample), evaluation alphabets test.
    if (cfg.data_root.empty()) throw ConfigError("config: omniglot needs data_root", "data_root");
    const std::filesystem::path root(cfg.data_root);
    LoadOptions opt{cfg.image_size, cfg.image_size, cfg.invert, min_images(cfg)};
    ClassDataset bg = load_image_directory(root / "images_background", opt);
    ClassDataset ev = load_image_directory(root / "images_evaluation", opt);
    const int nbg = static_cast<int>(bg.num_classes());
    if (cfg.val_classes >= nbg) throw ConfigError("config: val_classes exceeds the background classes", "val_classes");
    const SplitSpec bgsplit = random_split(bg.num_classes(), nbg - cfg.val_classes, cfg.val_classes, 0, cfg.data_seed);
    task.dataset = std::move(bg);
    task.dataset.source = "omniglot:" + cfg.data_root;
    task.split.train = bgsplit.train;
    task.split.val = bgsplit.val;
    for (auto& c : ev.classes) {
      task.split.test.push_back(static_cast<int>(task.dataset.classes.size()));
      task.dataset.classes.push_back(std::move(c));
    }
    task.split.seed = cfg.data_seed;
  } else {
    if (cfg.data_root.empty()) throw ConfigError("config: directory dataset needs data_root", "data_root");
    LoadOptions opt{cfg.image_size, cfg.image_size, cfg.invert, min_images(cfg)};
    task.dataset = load_image_directory(cfg.data_root, opt);
    if (static_cast<std::size_t>(total) > task.dataset.num_classes())
      throw ConfigError("config: class counts exceed the " + std::to_string(task.dataset.num_classes()) +
                            " classes found under " + cfg.data_root,
                        "train_classes");
    task.split = random_split(task.dataset.num_classes(), cfg.train_classes, cfg.val_classes, cfg.test_classes,
                              cfg.data_seed);
  }
  if (cfg.rotate_classes) add_rotated_classes(task.dataset, task.split.train);
  task.split.validate(task.dataset.num_classes());
  return task;
}

std::vector<Episode> sample_episodes(const ClassDataset& ds, std::span<const int> classes, int count, int n_way,
                                     int k_shot, int q_query, std::uint64_t seed) {
  Engine g(seed);
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) out.push_back(sample_episode(ds, classes, n_way, k_shot, q_query, g));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename Scalar>
Checkpoint make_checkpoint(const Trainer<Scalar>& t, long episode) {
  Checkpoint c;
  c.precision_bits = sizeof(Scalar) == 8 ? 64 : 32;
  c.meta["config"] = config_to_text(t.config());
  c.meta["episode"] = std::to_string(episode);
  c.sections.push_back(classifier_section(t.classifier()));
  if (t.config().uses_adversary()) c.sections.push_back(adversary_section(t.adversary()));
  return c;
}

template <typename Scalar>
RunResult run_impl(const TrainConfig& cfg, const TaskData& task, const RunHooks& hooks) {
  const auto& ds = task.dataset;
  Trainer<Scalar> trainer(cfg, ds.height, ds.width);
  Engine episode_rng(derive_seed(cfg.seed, kStreamTrainEpisodes));
  const auto val = task.split.val.empty()
                       ? std::vector<Episode>{}
                       : sample_episodes(ds, task.split.val, cfg.val_episodes, cfg.n_way, cfg.k_shot, cfg.q_query,
                                         derive_seed(cfg.seed, kStreamValEpisodes));
  RunResult result;
  result.records.reserve(static_cast<std::size_t>(cfg.episodes));
  for (long e = 1; e <= cfg.episodes; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const Episode ep = sample_episode(ds, task.split.train, cfg.n_way, cfg.k_shot, cfg.q_query, episode_rng);
    MetricsRecord rec = trainer.train_step(ep);
    if (e % cfg.eval_every == 0 || e == cfg.episodes) {
      if (!val.empty()) {
        result.val = evaluate<Scalar>(val, trainer.classifier(), trainer.head());
        rec.val_acc = result.val.mean;
      }
      if (hooks.on_checkpoint) {
        hooks.on_checkpoint(e, [&](const std::string& path) { save_checkpoint(make_checkpoint(trainer, e), path); });
      }
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (hooks.on_record) hooks.on_record(rec);
    result.records.push_back(rec);
  }
  if (hooks.evaluate_test && !task.split.test.empty() && cfg.test_episodes > 0) {
    const auto test = sample_episodes(ds, task.split.test, cfg.test_episodes, cfg.n_way, cfg.k_shot, cfg.q_query,
                                      derive_seed(cfg.seed, kStreamTestEpisodes));
    result.test = evaluate<Scalar>(test, trainer.classifier(), trainer.head());
  }
  return result;
}

}  // namespace

RunResult run_training(const TrainConfig& cfg, const TaskData& task, const RunHooks& hooks) {
  cfg.validate();
  return cfg.precision == Precision::F64 ? run_impl<double>(cfg, task, hooks) : run_impl<float>(cfg, task, hooks);
}

// ---------------------------------------------------------------------------

std::vector<double> default_lambda_grid() { return {1e-3, 1e-2, 1e-1, 1.0, 10.0}; }

double select_lambda(std::span<const LambdaRow> rows) {
  if (rows.empty()) throw ContractError("select_lambda: empty table");
  const LambdaRow* best = &rows[0];
  for (const auto& r : rows) {
    if (r.val_acc > best->val_acc || (r.val_acc == best->val_acc && r.lambda < best->lambda)) best = &r;
  }
  return best->lambda;
}

LambdaSearchResult lambda_search(const TrainConfig& base, const TaskData& task, std::vector<double> grid) {
  if (grid.empty()) throw ContractError("lambda_search: empty grid");
  for (double l : grid)
    if (!(l >= 0)) throw ConfigError("lambda_search: grid values must be non-negative", "lambda");
  if (task.split.val.empty()) throw ConfigError("lambda_search: needs validation classes", "val_classes");
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  LambdaSearchResult out;
  auto run_one = [&](int stage, double lambda) {
    for (const auto& r : out.table) {
      if (r.lambda == lambda) {
        out.table.push_back({stage, lambda, r.val_acc, r.half_width});
        return;
      }
    }
    TrainConfig cfg = base;
    cfg.mode = TrainMode::Ma3;
    cfg.lambda = lambda;
    RunHooks hooks;
    hooks.evaluate_test = false;
    const RunResult res = run_training(cfg, task, hooks);
    out.table.push_back({stage, lambda, res.val.mean, res.val.half_width});
  };

  for (double l : grid) run_one(1, l);
  if (grid.size() > 1) {
    const double coarse_best = select_lambda(out.table);
    const auto i = static_cast<std::size_t>(std::find(grid.begin(), grid.end(), coarse_best) - grid.begin());
    const double lo = grid[i == 0 ? 0 : i - 1];
    const double hi = grid[i + 1 < grid.size() ? i + 1 : i];
    for (int k = 0; k < 5; ++k) run_one(2, lo + (hi - lo) * k / 4.0);
  }
  out.best_lambda = select_lambda(out.table);
  return out;
}

}  // namespace ma3

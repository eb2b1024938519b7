#include "doctest.h"

#include <cmath>
#include <numeric>

#include "json.hpp"

#include "ma3/trainer.hpp"

using namespace ma3;

namespace {

TrainConfig toy_config(TrainMode mode) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.dataset = "toy";
  cfg.image_size = 16;
  cfg.blocks = 2;
  cfg.filters = 8;
  cfg.adv_filters = 8;
  cfg.train_classes = 20;
  cfg.val_classes = 5;
  cfg.test_classes = 5;
  cfg.images_per_class = 10;
  cfg.episodes = 40;
  cfg.eval_every = 20;
  cfg.val_episodes = 10;
  cfg.test_episodes = 20;
  cfg.seed = 7;
  return cfg;
}

std::vector<std::string> metrics_lines(const RunResult& r) {
  std::vector<std::string> out;
  for (const auto& rec : r.records) out.push_back(metrics_json(rec));
  return out;
}

// Sum of every parameter and statistic, bit-for-bit sensitive.
std::vector<float> state_of(const EmbeddingNet<float>& net) {
  std::vector<float> s(net.params().begin(), net.params().end());
  s.insert(s.end(), net.running_mean().begin(), net.running_mean().end());
  s.insert(s.end(), net.running_var().begin(), net.running_var().end());
  return s;
}

// Shrinks the embedding projection so squared distances, and hence logits, are O(1).
// An untrained net otherwise separates toy classes by logit gaps in the hundreds and
// the loss underflows to zero, leaving the adversary nothing to ascend.
template <typename Scalar>
void soften(EmbeddingNet<Scalar>& net, Scalar factor) {
  for (std::size_t i = 0; i < net.layout().blocks().size(); ++i)
    if (net.layout()[i].name == "proj.weight") net.layout().view(net.params(), i) *= factor;
}

// Adversary-only configuration on the toy task with a frozen, softened classifier.
TrainConfig adversary_only(double lambda) {
  TrainConfig cfg = toy_config(TrainMode::Ma3);
  cfg.h_dim = 32;
  cfg.lambda = lambda;
  cfg.dropout_rate = 0;
  cfg.freeze_classifier = true;
  cfg.lr_adv = 1e-2;
  return cfg;
}

double mean_reg(const std::vector<MetricsRecord>& recs, std::size_t last) {
  double s = 0;
  for (std::size_t i = recs.size() - last; i < recs.size(); ++i) s += recs[i].reg;
  return s / double(last);
}

// Chi-square statistic of `values` in [lo, hi) over `bins` equal bins.
double chi_square(const std::vector<double>& values, double lo, double hi, int bins) {
  std::vector<int> counts(bins, 0);
  for (double v : values) ++counts[std::min(bins - 1, static_cast<int>((v - lo) / (hi - lo) * bins))];
  const double expected = double(values.size()) / bins;
  double chi = 0;
  for (int c : counts) chi += (c - expected) * (c - expected) / expected;
  return chi;
}

}  // namespace

TEST_CASE("modes parse and print") {
  for (auto m : {TrainMode::Baseline, TrainMode::StandardAug, TrainMode::Ma3, TrainMode::Ma3Lambda0})
    CHECK(parse_mode(to_string(m)) == m);
  CHECK(to_string(TrainMode::Ma3Lambda0) == "ma3-lambda0");
  CHECK_THROWS_AS(parse_mode("adversarial"), ConfigError);
}

TEST_CASE("config validation names the offending key") {
  auto key_of = [](TrainConfig cfg) {
    try {
      cfg.validate();
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("none");
  };
  TrainConfig cfg;
  CHECK(key_of(cfg) == "none");
  cfg.lambda = -1;
  CHECK(key_of(cfg) == "lambda");
  cfg = {};
  cfg.dropout_rate = 1.5;
  CHECK(key_of(cfg) == "dropout_rate");
  cfg = {};
  cfg.episodes = 0;
  CHECK(key_of(cfg) == "episodes");
  cfg = {};
  cfg.lr_adv = 0;
  CHECK(key_of(cfg) == "lr_adv");
  cfg = {};
  cfg.image_size = 8;
  cfg.blocks = 4;
  CHECK(key_of(cfg) == "blocks");
}

TEST_CASE("metrics records serialize with a fixed field order") {
  MetricsRecord r;
  r.episode = 3;
  r.loss = 0.5;
  r.reg = 0.25;
  r.objective = 0.475;
  r.train_acc = 0.8;
  r.lambda = 0.1;
  r.seed = 9;
  r.wall_ms = 12.5;
  const std::string line = metrics_json(r);
  CHECK(line == R"({"episode":3,"loss":0.5,"reg":0.25,"objective":0.475,"train_acc":0.8,"val_acc":null,"lambda":0.1,"seed":9})");
  r.val_acc = 0.625;
  CHECK(nlohmann::json::parse(metrics_json(r))["val_acc"] == 0.625);
}

TEST_CASE("ma3 with dropout 1 replays the baseline bit for bit") {
  TrainConfig base = toy_config(TrainMode::Baseline);
  TrainConfig ma3 = toy_config(TrainMode::Ma3);
  ma3.dropout_rate = 1.0;
  const TaskData task = load_task(base);
  const auto a = run_training(base, task);
  const auto b = run_training(ma3, task);
  CHECK(metrics_lines(a) == metrics_lines(b));
  CHECK(a.test.mean == b.test.mean);
}

TEST_CASE("lambda 0 with a frozen identity adversary gives the baseline loss") {
  TrainConfig base = toy_config(TrainMode::Baseline);
  TrainConfig l0 = toy_config(TrainMode::Ma3Lambda0);
  l0.dropout_rate = 0;
  l0.freeze_adversary = true;
  const TaskData task = load_task(base);
  const auto a = run_training(base, task);
  const auto b = run_training(l0, task);
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].loss == b.records[i].loss);
    CHECK(b.records[i].reg == 0);
  }
}

TEST_CASE("adversary-only steps raise the classifier loss") {
  const TrainConfig cfg = adversary_only(0.1);
  const TaskData task = load_task(cfg);
  const Episode ep = sample_episodes(task.dataset, task.split.train, 1, 5, 1, 5, 11).front();
  Trainer<float> t(cfg, 16, 16);
  soften(t.classifier(), 0.1f);
  const double first = t.train_step(ep).loss;
  double last = first;
  for (int i = 0; i < 50; ++i) last = t.train_step(ep).loss;
  MESSAGE("loss " << first << " -> " << last);
  CHECK(last - first >= 1e-4);
}

TEST_CASE("query images reach the classifier unmodified") {
  for (auto mode : {TrainMode::Ma3, TrainMode::StandardAug, TrainMode::Ma3Lambda0}) {
    TrainConfig cfg = toy_config(mode);
    cfg.dropout_rate = 0;
    cfg.lr_adv = 0.05;
    const TaskData task = load_task(cfg);
    Trainer<float> t(cfg, 16, 16);
    bool warped_support = false;
    for (const auto& ep : sample_episodes(task.dataset, task.split.train, 10, 5, 1, 5, 4)) {
      t.train_step(ep);
      const auto q = stack_images<float>(ep.query);
      const auto s = stack_images<float>(ep.support);
      const auto& in = t.last_classifier_input();
      CHECK(in.data.tail(q.data.size()) == q.data);
      warped_support |= in.data.head(s.data.size()) != s.data;
    }
    CHECK(warped_support);
  }
}

TEST_CASE("standard augmentation with collapsed bounds equals the baseline") {
  TrainConfig base = toy_config(TrainMode::Baseline);
  TrainConfig aug = toy_config(TrainMode::StandardAug);
  aug.theta0 = 0;
  aug.eps_s = 0;
  aug.translation = 0;
  const TaskData task = load_task(base);
  CHECK(metrics_lines(run_training(base, task)) == metrics_lines(run_training(aug, task)));
}

TEST_CASE("standard augmentation draws are uniform inside the bounds") {
  const AdversaryBounds b = AdversaryBounds::defaults_for(28, 28);
  Engine g(derive_seed(0, kStreamStandardAug));
  std::vector<double> th, s, px, py;
  for (int i = 0; i < 10000; ++i) {
    const auto p = sample_uniform_params(b, g);
    CHECK(b.contains(p));
    th.push_back(p.theta);
    s.push_back(p.s);
    px.push_back(p.px);
    py.push_back(p.py);
  }
  // 20 bins, 19 degrees of freedom: the p = 0.01 critical value is 36.19.
  CHECK(chi_square(th, -b.theta0, b.theta0, 20) < 36.19);
  CHECK(chi_square(s, 1 - b.eps_s, 1 + b.eps_s, 20) < 36.19);
  CHECK(chi_square(px, -b.T, b.T, 20) < 36.19);
  CHECK(chi_square(py, -b.T, b.T, 20) < 36.19);
}

TEST_CASE("evaluate with oracle embeddings is perfect") {
  // One 2x2 block lit per class; a 1-block net whose conv copies the input gives one-hot embeddings.
  ClassDataset ds;
  ds.height = ds.width = 8;
  for (int c = 0; c < 5; ++c) {
    ImageClass cls;
    cls.id = "oracle/" + std::to_string(c);
    GrayImage img(8, 8);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) img.at(0, 2 * (c / 4) + i, 2 * (c % 4) + j) = 1;
    cls.images.assign(6, img);
    ds.classes.push_back(cls);
  }
  EmbeddingNet<float> net({{1, 8, 8, 1, 1, false}, 0}, 1);
  net.params().setZero();
  net.params()(4) = 1;  // center tap
  const std::vector<int> classes{0, 1, 2, 3, 4};
  const auto eps = sample_episodes(ds, classes, 50, 5, 1, 5, 3);
  const auto r = evaluate<float>(eps, net, {});
  CHECK(r.mean == 1.0);
  CHECK(r.half_width == 0.0);
  CHECK(r.episodes == 50);
}

TEST_CASE("untrained classifier on structureless data sits at chance") {
  ClassDataset ds;
  ds.height = ds.width = 16;
  Engine g(5);
  for (int c = 0; c < 20; ++c) {
    ImageClass cls;
    cls.id = "noise/" + std::to_string(c);
    for (int k = 0; k < 10; ++k) {
      GrayImage img(16, 16);
      for (auto& v : img.values) v = static_cast<float>(uniform01(g));
      cls.images.push_back(img);
    }
    ds.classes.push_back(cls);
  }
  std::vector<int> classes(20);
  std::iota(classes.begin(), classes.end(), 0);
  const auto eps = sample_episodes(ds, classes, 600, 5, 1, 5, 6);
  const EmbeddingNet<float> net({{1, 16, 16, 2, 8, true}, 0}, 8);
  const auto r = evaluate<float>(eps, net, {});
  CHECK(r.mean >= 0.1);
  CHECK(r.mean <= 0.3);
  CHECK(r.half_width > 0);

  const auto again = evaluate<float>(eps, net, {});
  CHECK(again.mean == r.mean);
  CHECK(again.half_width == r.half_width);
}

TEST_CASE("evaluate leaves every parameter and statistic untouched") {
  TrainConfig cfg = toy_config(TrainMode::Ma3);
  const TaskData task = load_task(cfg);
  Trainer<float> t(cfg, 16, 16);
  for (const auto& ep : sample_episodes(task.dataset, task.split.train, 5, 5, 1, 5, 1)) t.train_step(ep);
  const auto before = state_of(t.classifier());
  const auto adv_before = t.adversary().params();
  evaluate<float>(sample_episodes(task.dataset, task.split.test, 30, 5, 1, 5, 2), t.classifier(), t.head());
  CHECK(state_of(t.classifier()) == before);
  CHECK(t.adversary().params() == adv_before);
}

TEST_CASE("confidence half-width uses the normal approximation") {
  // Accuracies alternate 1 and 0: mean 0.5, sample sd sqrt(n / (n - 1)) / 2.
  TrainConfig cfg = toy_config(TrainMode::Baseline);
  const TaskData task = load_task(cfg);
  const auto eps = sample_episodes(task.dataset, task.split.test, 1, 5, 1, 5, 2);
  const EmbeddingNet<float> net(cfg.embedding_arch(16, 16), 1);
  const auto one = evaluate<float>(eps, net, {});
  CHECK(one.half_width == 0);
  CHECK(one.episodes == 1);
  CHECK_THROWS_AS(evaluate<float>(std::span<const Episode>{}, net, {}), ContractError);
}

TEST_CASE("classifier learning rate halves on schedule") {
  TrainConfig cfg = toy_config(TrainMode::Baseline);
  cfg.lr_halve_every = 3;
  const TaskData task = load_task(cfg);
  Trainer<float> t(cfg, 16, 16);
  std::vector<double> lrs;
  for (const auto& ep : sample_episodes(task.dataset, task.split.train, 7, 5, 1, 5, 1)) {
    lrs.push_back(t.classifier_lr());
    t.train_step(ep);
  }
  CHECK(lrs == std::vector<double>{1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 5e-4, 2.5e-4});
}

TEST_CASE("runs replay identically under a fixed seed") {
  for (auto mode : {TrainMode::Baseline, TrainMode::StandardAug, TrainMode::Ma3, TrainMode::Ma3Lambda0}) {
    const TrainConfig cfg = toy_config(mode);
    const TaskData task = load_task(cfg);
    const auto a = run_training(cfg, task);
    const auto b = run_training(cfg, task);
    CHECK(metrics_lines(a) == metrics_lines(b));
    CHECK(a.test.mean == b.test.mean);
    CHECK(a.val.mean == b.val.mean);
  }
  TrainConfig other = toy_config(TrainMode::Ma3);
  const TaskData task = load_task(other);
  const auto a = run_training(other, task);
  other.seed = 8;
  CHECK(metrics_lines(a) != metrics_lines(run_training(other, task)));
}

TEST_CASE("validation accuracy is recorded every eval_every episodes") {
  const TrainConfig cfg = toy_config(TrainMode::Baseline);
  const auto r = run_training(cfg, load_task(cfg));
  for (const auto& rec : r.records) CHECK(rec.val_acc.has_value() == (rec.episode % 20 == 0));
  CHECK(r.test.episodes == 20);
}

TEST_CASE("non-finite loss aborts with a diagnostic record") {
  TrainConfig cfg = toy_config(TrainMode::Baseline);
  cfg.lr_cls = 1e30;
  cfg.batch_norm = false;
  const TaskData task = load_task(cfg);
  try {
    run_training(cfg, task);
    FAIL("training should have aborted");
  } catch (const NonFiniteLoss& e) {
    CHECK(!std::isfinite(e.record.loss));
    CHECK(e.record.episode >= 1);
  }
}

TEST_CASE("raising lambda weakly lowers the adversary's deviation from identity") {
  auto steady_reg = [](double lambda) {
    const TrainConfig cfg = adversary_only(lambda);
    const TaskData task = load_task(cfg);
    Trainer<float> t(cfg, 16, 16);
    soften(t.classifier(), 0.1f);
    std::vector<MetricsRecord> recs;
    for (const auto& ep : sample_episodes(task.dataset, task.split.train, 200, 5, 1, 5, 12)) recs.push_back(t.train_step(ep));
    return mean_reg(recs, 100);
  };
  const double r001 = steady_reg(0.01), r01 = steady_reg(0.1), r1 = steady_reg(1.0);
  MESSAGE("steady-state reg: lambda 0.01 " << r001 << ", 0.1 " << r01 << ", 1 " << r1);
  CHECK(r01 <= r001);
  CHECK(r1 <= r01);
}

TEST_CASE("without the regularizer the warps drift far from identity") {
  auto final_reg = [](TrainMode mode) {
    TrainConfig cfg = toy_config(mode);
    cfg.lambda = 1.0;
    cfg.episodes = 2000;
    cfg.eval_every = 2000;
    cfg.test_episodes = 0;
    const auto r = run_training(cfg, load_task(cfg));
    return mean_reg(r.records, 100);
  };
  const double with = final_reg(TrainMode::Ma3), without = final_reg(TrainMode::Ma3Lambda0);
  MESSAGE("mean reg over the last 100 episodes: lambda=1 " << with << ", lambda=0 " << without);
  CHECK(without >= 10 * with);
}

TEST_CASE("lambda selection") {
  const std::vector<LambdaRow> tie{{1, 0.1, 0.8, 0}, {1, 0.01, 0.8, 0}, {1, 1.0, 0.7, 0}};
  CHECK(select_lambda(tie) == 0.01);
  const std::vector<LambdaRow> clear{{1, 0.1, 0.8, 0}, {1, 1.0, 0.9, 0}};
  CHECK(select_lambda(clear) == 1.0);
  CHECK(default_lambda_grid() == std::vector<double>{1e-3, 1e-2, 1e-1, 1.0, 10.0});

  TrainConfig cfg = toy_config(TrainMode::Ma3);
  cfg.episodes = 10;
  const TaskData task = load_task(cfg);
  const auto single = lambda_search(cfg, task, {0.3});
  CHECK(single.best_lambda == 0.3);
  CHECK(single.table.size() == 1);
  CHECK_THROWS_AS(lambda_search(cfg, task, {}), ContractError);
  CHECK_THROWS_AS(lambda_search(cfg, task, {-1.0}), ConfigError);
}

TEST_CASE("lambda search runs a coarse then a fine stage and replays") {
  TrainConfig cfg = toy_config(TrainMode::Ma3);
  cfg.episodes = 10;
  const TaskData task = load_task(cfg);
  const auto a = lambda_search(cfg, task, {0.01, 0.1, 1.0});
  REQUIRE(a.table.size() == 8);
  for (int i = 0; i < 3; ++i) CHECK(a.table[i].stage == 1);
  for (int i = 3; i < 8; ++i) CHECK(a.table[i].stage == 2);
  // The fine stage spans the neighbors of the best coarse value.
  const double best_coarse = select_lambda(std::span(a.table).first(3));
  const double lo = best_coarse == 0.01 ? 0.01 : (best_coarse == 0.1 ? 0.01 : 0.1);
  const double hi = best_coarse == 1.0 ? 1.0 : (best_coarse == 0.1 ? 1.0 : 0.1);
  CHECK(a.table[3].lambda == doctest::Approx(lo));
  CHECK(a.table[7].lambda == doctest::Approx(hi));

  const auto b = lambda_search(cfg, task, {1.0, 0.1, 0.01});
  CHECK(b.best_lambda == a.best_lambda);
  for (std::size_t i = 0; i < a.table.size(); ++i) CHECK(a.table[i].val_acc == b.table[i].val_acc);
}

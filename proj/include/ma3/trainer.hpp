#pragma once

// Episodic min-max training: the adversary warps support images, the
// classifier descends the query loss, the adversary ascends
//   L - lambda * sum_j ||A_j - I||^2.
// Query images are never warped; evaluation never warps anything.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ma3/adversary.hpp"
#include "ma3/data.hpp"
#include "ma3/errors.hpp"
#include "ma3/heads.hpp"
#include "ma3/nets.hpp"
#include "ma3/optim.hpp"
#include "ma3/rng.hpp"
#include "ma3/sampler.hpp"

namespace ma3 {

enum class TrainMode { Baseline, StandardAug, Ma3, Ma3Lambda0 };
enum class Precision { F32, F64 };

std::string to_string(TrainMode m);
TrainMode parse_mode(const std::string& s);  // throws ConfigError

/// Every run-defining scalar. Defaults are the desk-scale synthetic protocol.
struct TrainConfig {
  TrainMode mode = TrainMode::Ma3;
  double lambda = 0.1;
  double dropout_rate = 0.5;
  double theta0 = 3.141592653589793;
  double eps_s = 0.1;
  double translation = -1;  // pixels; negative: 0.1 * max(H, W)
  AffineParameterization affine = AffineParameterization::Similarity;

  double lr_cls = 1e-3;
  double lr_adv = 1e-3;
  int lr_halve_every = 2000;

  int episodes = 5000;
  int eval_every = 500;
  int val_episodes = 100;
  int test_episodes = 600;
  int n_way = 5;
  int k_shot = 1;
  int q_query = 5;
  std::uint64_t seed = 0;
  Precision precision = Precision::F32;

  HeadKind head = HeadKind::Euclidean;
  double temperature = 10.0;
  int blocks = 4;
  int filters = 64;
  int h_dim = 0;
  bool batch_norm = true;
  double bn_momentum = 0.1;
  int adv_blocks = 2;
  int adv_filters = 16;

  // Dataset selection.
  std::string dataset = "synthetic";  // synthetic | toy | omniglot | directory
  std::string data_root;
  int image_size = 28;
  bool invert = false;
  bool rotate_classes = false;  // add 90/180/270-degree copies of every class as new classes
  int train_classes = 50;
  int val_classes = 20;
  int test_classes = 20;
  int images_per_class = 20;
  std::uint64_t data_seed = 0;

  bool freeze_classifier = false;
  bool freeze_adversary = false;
  std::string run;

  /// lambda actually used (0 in ma3-lambda0 mode).
  double effective_lambda() const { return mode == TrainMode::Ma3Lambda0 ? 0.0 : lambda; }
  AdversaryBounds bounds(int height, int width) const {
    return {theta0, eps_s, translation >= 0 ? translation : 0.1 * std::max(height, width)};
  }
  EmbeddingArch embedding_arch(int height, int width) const {
    return {{1, height, width, blocks, filters, batch_norm}, h_dim};
  }
  AdversaryArch adversary_arch(int height, int width) const {
    return {{1, height, width, adv_blocks, adv_filters, false}, raw_outputs(affine)};
  }
  bool uses_adversary() const { return mode == TrainMode::Ma3 || mode == TrainMode::Ma3Lambda0; }

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

struct MetricsRecord {
  long episode = 0;
  double loss = 0;
  double reg = 0;  // sum of ||A_j - I||^2 over the support matrices actually applied
  double objective = 0;
  double train_acc = 0;
  std::optional<double> val_acc;
  double lambda = 0;
  std::uint64_t seed = 0;
  double wall_ms = 0;  // kept out of the metrics stream (see metrics_json)
};

/// One JSON object per line; wall-clock time is excluded so streams replay byte-identically.
std::string metrics_json(const MetricsRecord& r);

class NonFiniteLoss : public Error {
 public:
  explicit NonFiniteLoss(const MetricsRecord& r)
      : Error("non-finite loss at episode " + std::to_string(r.episode)), record(r) {}
  MetricsRecord record;
};

// ---------------------------------------------------------------------------
// Episode tensors.

template <typename Scalar>
Tensor4<Scalar> stack_images(std::span<const GrayImage> images) {
  if (images.empty()) return {};
  const auto& f = images.front();
  Tensor4<Scalar> t(static_cast<int>(images.size()), f.channels, f.height, f.width);
  for (std::size_t k = 0; k < images.size(); ++k) {
    if (!images[k].same_shape(f)) throw ContractError("stack_images: images differ in shape");
    t.data.segment(static_cast<Eigen::Index>(k) * t.item_size(), t.item_size()) =
        images[k].values.template cast<Scalar>().matrix();
  }
  return t;
}

template <typename Scalar>
Image<Scalar> tensor_item(const Tensor4<Scalar>& t, int k) {
  Image<Scalar> img(t.h, t.w, t.c);
  img.values = t.data.segment(static_cast<Eigen::Index>(k) * t.item_size(), t.item_size()).array();
  return img;
}

// ---------------------------------------------------------------------------
// One shared forward/backward pass.

/// How the support images are transformed before the classifier sees them.
template <typename Scalar>
struct SupportWarp {
  enum class Kind { None, Fixed, Adversary } kind = Kind::None;
  std::vector<AffineMatrix<Scalar>> fixed;  // Kind::Fixed
  const AdversaryNet<Scalar>* adversary = nullptr;  // Kind::Adversary
  std::vector<bool> dropped;                        // Kind::Adversary; empty = none dropped
  AdversaryBounds bounds;
  AffineParameterization affine = AffineParameterization::Similarity;
};

struct HeadConfig {
  HeadKind kind = HeadKind::Euclidean;
  double temperature = 10.0;
};

template <typename Scalar>
struct StepResult {
  Scalar loss = 0;
  Scalar reg = 0;
  Scalar objective = 0;
  double accuracy = 0;
  Mat<Scalar> probs;
  std::vector<AffineMatrix<Scalar>> matrices;  // applied to the support images
  Tensor4<Scalar> classifier_input;            // warped support then query
  typename EmbeddingNet<Scalar>::Cache cache;
  Vec<Scalar> grad_classifier;  // d L / d classifier params
  Vec<Scalar> grad_adversary;   // d (L - lambda reg) / d adversary params
};

template <typename Scalar>
HeadResult<Scalar> apply_head(const HeadConfig& head, const Mat<Scalar>& query, std::span<const int> labels,
                              const Mat<Scalar>& prototypes) {
  return head.kind == HeadKind::Euclidean ? protonet_loss(query, labels, prototypes)
                                          : cosine_loss(query, labels, prototypes, Scalar(head.temperature));
}

/// Forward pass, and with `want_grads` the gradients for both players, for one episode.
template <typename Scalar>
StepResult<Scalar> forward_backward(const EmbeddingNet<Scalar>& classifier, const Tensor4<Scalar>& support,
                                    std::span<const int> support_labels, const Tensor4<Scalar>& query,
                                    std::span<const int> query_labels, int n_way, const SupportWarp<Scalar>& warp,
                                    const HeadConfig& head, double lambda, NormMode mode, bool want_grads) {
  StepResult<Scalar> r;
  const int ns = support.n, nq = query.n;
  const int h = support.h, w = support.w;

  // Support matrices.
  Mat<Scalar> raw;
  typename AdversaryNet<Scalar>::Cache adv_cache;
  std::vector<bool> active(ns, false);  // matrices that carry gradient to the adversary
  r.matrices.assign(ns, identity_affine<Scalar>());
  if (warp.kind == SupportWarp<Scalar>::Kind::Fixed) {
    if (static_cast<int>(warp.fixed.size()) != ns) throw ContractError("forward_backward: one matrix per support image");
    r.matrices = warp.fixed;
  } else if (warp.kind == SupportWarp<Scalar>::Kind::Adversary) {
    raw = warp.adversary->forward(support, want_grads ? &adv_cache : nullptr);
    for (int j = 0; j < ns; ++j) {
      const bool dropped = !warp.dropped.empty() && warp.dropped[j];
      if (dropped) continue;
      r.matrices[j] = raw_to_affine<Scalar>(raw.row(j).transpose(), warp.bounds, warp.affine, h, w);
      active[j] = true;
    }
  }

  // Warp the support; identity matrices pass the image through untouched.
  std::vector<SampleGrid<Scalar>> grids(ns);
  std::vector<Image<Scalar>> sources(ns);
  r.classifier_input = Tensor4<Scalar>(ns + nq, support.c, h, w);
  const Eigen::Index item = support.item_size();
  for (int j = 0; j < ns; ++j) {
    auto dst = r.classifier_input.data.segment(Eigen::Index(j) * item, item);
    const auto src = support.data.segment(Eigen::Index(j) * item, item);
    if (is_identity(r.matrices[j]) && !active[j]) {
      dst = src;
      continue;
    }
    sources[j] = tensor_item(support, j);
    grids[j] = affine_grid(r.matrices[j], h, w);
    dst = is_identity(r.matrices[j]) ? Vec<Scalar>(src) : Vec<Scalar>(bilinear_sample(sources[j], grids[j]).values.matrix());
  }
  r.classifier_input.data.segment(Eigen::Index(ns) * item, Eigen::Index(nq) * item) = query.data;

  // Classifier.
  const Mat<Scalar> emb = classifier.forward(r.classifier_input, mode, want_grads ? &r.cache : nullptr);
  const Mat<Scalar> semb = emb.topRows(ns), qemb = emb.bottomRows(nq);
  const Mat<Scalar> protos = compute_prototypes<Scalar>(semb, support_labels, n_way);
  HeadResult<Scalar> hr = apply_head(head, qemb, query_labels, protos);
  r.loss = hr.loss;
  r.probs = hr.probs;
  r.accuracy = episode_accuracy(hr.probs, query_labels);
  for (const auto& a : r.matrices) r.reg += identity_reg_loss(a);
  r.objective = r.loss - Scalar(lambda) * r.reg;
  if (!want_grads || !std::isfinite(double(r.loss))) return r;

  Mat<Scalar> d_emb(ns + nq, emb.cols());
  d_emb.topRows(ns) = prototypes_backward<Scalar>(hr.grad_prototypes, support_labels);
  d_emb.bottomRows(nq) = hr.grad_query;
  r.grad_classifier = Vec<Scalar>::Zero(classifier.params().size());
  bool any_active = false;
  for (bool a : active) any_active = any_active || a;
  const Tensor4<Scalar> d_input = classifier.backward(r.cache, d_emb, r.grad_classifier, any_active);

  if (warp.kind == SupportWarp<Scalar>::Kind::Adversary) {
    r.grad_adversary = Vec<Scalar>::Zero(warp.adversary->params().size());
    if (any_active) {
      Mat<Scalar> d_raw = Mat<Scalar>::Zero(ns, raw.cols());
      for (int j = 0; j < ns; ++j) {
        if (!active[j]) continue;
        Image<Scalar> up(h, w, support.c);
        up.values = d_input.data.segment(Eigen::Index(j) * item, item).array();
        AffineMatrix<Scalar> d_a = warp_backward(sources[j], grids[j], up).affine;
        d_a -= Scalar(lambda) * identity_reg_grad(r.matrices[j]);
        d_raw.row(j) = raw_to_affine_backward<Scalar>(raw.row(j).transpose(), warp.bounds, warp.affine, h, w, d_a)
                           .transpose();
      }
      warp.adversary->backward(adv_cache, d_raw, r.grad_adversary);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

struct EvalResult {
  double mean = 0;
  double half_width = 0;  // 95% normal-approximation confidence half-width
  int episodes = 0;
};

/// Mean per-episode accuracy with running-statistics normalization and no warping.
template <typename Scalar>
EvalResult evaluate(std::span<const Episode> episodes, const EmbeddingNet<Scalar>& classifier, const HeadConfig& head) {
  if (episodes.empty()) throw ContractError("evaluate: need at least one episode");
  std::vector<double> acc;
  acc.reserve(episodes.size());
  for (const auto& ep : episodes) {
    const auto s = stack_images<Scalar>(ep.support);
    const auto q = stack_images<Scalar>(ep.query);
    const auto r = forward_backward<Scalar>(classifier, s, ep.support_labels, q, ep.query_labels, ep.n_way, {},
                                            head, 0.0, NormMode::Eval, false);
    acc.push_back(r.accuracy);
  }
  EvalResult e;
  e.episodes = static_cast<int>(acc.size());
  for (double a : acc) e.mean += a;
  e.mean /= e.episodes;
  if (e.episodes > 1) {
    double ss = 0;
    for (double a : acc) ss += (a - e.mean) * (a - e.mean);
    e.half_width = 1.96 * std::sqrt(ss / (e.episodes - 1)) / std::sqrt(double(e.episodes));
  }
  return e;
}

// ---------------------------------------------------------------------------

// Seed streams derived from the master seed.
enum SeedStream : std::uint64_t {
  kStreamClassifierInit = 1,
  kStreamAdversaryInit = 2,
  kStreamTrainEpisodes = 3,
  kStreamDropout = 4,
  kStreamStandardAug = 5,
  kStreamValEpisodes = 6,
  kStreamTestEpisodes = 7,
};

/// Owns both players, their optimizers and the per-step random streams.
///
/// Per step the dropout stream draws one uniform per support image (support
/// order); the standard-augmentation stream draws theta, s, px, py per support
/// image. Both are consumed only in the modes that use them.
template <typename Scalar>
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, int height, int width)
      : cfg_(cfg),
        height_(height),
        width_(width),
        classifier_(cfg.embedding_arch(height, width), derive_seed(cfg.seed, kStreamClassifierInit)),
        adversary_(cfg.adversary_arch(height, width), derive_seed(cfg.seed, kStreamAdversaryInit)),
        adam_cls_(classifier_.params().size()),
        adam_adv_(adversary_.params().size()),
        dropout_rng_(derive_seed(cfg.seed, kStreamDropout)),
        aug_rng_(derive_seed(cfg.seed, kStreamStandardAug)) {
    cfg_.validate();
  }

  const TrainConfig& config() const { return cfg_; }
  const EmbeddingNet<Scalar>& classifier() const { return classifier_; }
  EmbeddingNet<Scalar>& classifier() { return classifier_; }
  const AdversaryNet<Scalar>& adversary() const { return adversary_; }
  AdversaryNet<Scalar>& adversary() { return adversary_; }
  HeadConfig head() const { return {cfg_.head, cfg_.temperature}; }
  long episodes_done() const { return episode_; }
  const Tensor4<Scalar>& last_classifier_input() const { return last_input_; }
  const std::vector<AffineMatrix<Scalar>>& last_matrices() const { return last_matrices_; }

  double classifier_lr() const {
    const long halvings = cfg_.lr_halve_every > 0 ? episode_ / cfg_.lr_halve_every : 0;
    return cfg_.lr_cls * std::pow(0.5, double(halvings));
  }

  MetricsRecord train_step(const Episode& ep) {
    ep.validate();
    const auto support = stack_images<Scalar>(ep.support);
    const auto query = stack_images<Scalar>(ep.query);
    const int ns = support.n;
    const AdversaryBounds bounds = cfg_.bounds(height_, width_);

    SupportWarp<Scalar> warp;
    warp.bounds = bounds;
    warp.affine = cfg_.affine;
    if (cfg_.uses_adversary()) {
      warp.kind = SupportWarp<Scalar>::Kind::Adversary;
      warp.adversary = &adversary_;
      std::vector<AffineMatrix<Scalar>> placeholder(ns, identity_affine<Scalar>());
      warp.dropped = stn_dropout<Scalar>(placeholder, cfg_.dropout_rate, dropout_rng_).dropped;
    } else if (cfg_.mode == TrainMode::StandardAug) {
      warp.kind = SupportWarp<Scalar>::Kind::Fixed;
      std::vector<AffineMatrix<Scalar>> mats;
      for (int j = 0; j < ns; ++j) {
        const auto d = sample_uniform_params(bounds, aug_rng_);
        const AugmentParams<Scalar> p{Scalar(d.theta), Scalar(d.s), Scalar(d.px), Scalar(d.py)};
        mats.push_back(params_to_affine(p, height_, width_));
      }
      warp.fixed = stn_dropout<Scalar>(mats, cfg_.dropout_rate, dropout_rng_).matrices;
    }

    const double lambda = cfg_.effective_lambda();
    auto r = forward_backward<Scalar>(classifier_, support, ep.support_labels, query, ep.query_labels, ep.n_way, warp,
                                      head(), lambda, NormMode::Train, true);
    ++episode_;
    MetricsRecord rec;
    rec.episode = episode_;
    rec.loss = double(r.loss);
    rec.reg = double(r.reg);
    rec.objective = double(r.objective);
    rec.train_acc = r.accuracy;
    rec.lambda = lambda;
    rec.seed = cfg_.seed;
    if (!std::isfinite(rec.loss) || !std::isfinite(rec.objective)) throw NonFiniteLoss(rec);

    // Both gradients come from the pass above; the classifier moves first.
    if (!cfg_.freeze_classifier) {
      adam_cls_.step(classifier_.params(), r.grad_classifier, classifier_lr());
      classifier_.update_running_stats(r.cache, cfg_.bn_momentum);
    }
    if (cfg_.uses_adversary() && !cfg_.freeze_adversary) {
      adam_adv_.step(adversary_.params(), Vec<Scalar>(-r.grad_adversary), cfg_.lr_adv);
    }
    last_input_ = std::move(r.classifier_input);
    last_matrices_ = std::move(r.matrices);
    return rec;
  }

 private:
  TrainConfig cfg_;
  int height_, width_;
  EmbeddingNet<Scalar> classifier_;
  AdversaryNet<Scalar> adversary_;
  Adam<Scalar> adam_cls_;
  Adam<Scalar> adam_adv_;
  Engine dropout_rng_;
  Engine aug_rng_;
  long episode_ = 0;
  Tensor4<Scalar> last_input_;
  std::vector<AffineMatrix<Scalar>> last_matrices_;
};

// ---------------------------------------------------------------------------
// Whole runs.

/// A dataset plus its class split.
struct TaskData {
  ClassDataset dataset;
  SplitSpec split;
};

/// Builds the dataset named by cfg.dataset (synthetic, toy, omniglot, directory).
TaskData load_task(const TrainConfig& cfg);

/// Fixed evaluation episodes drawn from `classes` with the given stream.
std::vector<Episode> sample_episodes(const ClassDataset& ds, std::span<const int> classes, int count, int n_way,
                                     int k_shot, int q_query, std::uint64_t seed);

struct RunHooks {
  bool evaluate_test = true;
  std::function<void(const MetricsRecord&)> on_record;
  /// Called every eval_every episodes with the episode index and a checkpoint writer.
  std::function<void(long, const std::function<void(const std::string&)>&)> on_checkpoint;
};

struct RunResult {
  EvalResult val;   // at the end of training
  EvalResult test;  // on the test split (skipped when it is empty)
  std::vector<MetricsRecord> records;
};

/// Trains for cfg.episodes, evaluating on the validation split every eval_every episodes.
RunResult run_training(const TrainConfig& cfg, const TaskData& task, const RunHooks& hooks = {});

struct LambdaRow {
  int stage;  // 1 coarse, 2 fine
  double lambda;
  double val_acc;
  double half_width;
};

struct LambdaSearchResult {
  double best_lambda = 0;
  std::vector<LambdaRow> table;
};

/// The default coarse grid {1e-3, 1e-2, 1e-1, 1, 10}.
std::vector<double> default_lambda_grid();

/// Coarse pass over `grid`, then five linearly spaced values across the best
/// value's neighboring interval. Highest validation accuracy wins, ties to the
/// smaller lambda. A single-value grid skips the fine pass.
LambdaSearchResult lambda_search(const TrainConfig& base, const TaskData& task, std::vector<double> grid);

/// Picks the best row: highest accuracy, ties to the smaller lambda.
double select_lambda(std::span<const LambdaRow> rows);

}  // namespace ma3

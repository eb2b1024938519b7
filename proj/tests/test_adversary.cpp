#include "doctest.h"

#include <cmath>
#include <numbers>

#include "ma3/adversary.hpp"
#include "ma3/trainer.hpp"

using namespace ma3;

namespace {

constexpr double kPi = std::numbers::pi;

AffineMatrix<double> mat(double a1, double a2, double a3, double a4, double a5, double a6) {
  AffineMatrix<double> a;
  a << a1, a2, a3, a4, a5, a6;
  return a;
}

Tensor4<double> random_batch(int n, int h, int w, Engine& g) {
  Tensor4<double> t(n, 1, h, w);
  for (auto& v : t.data) v = uniform01(g);
  return t;
}

}  // namespace

TEST_CASE("bound_params examples") {
  const AdversaryBounds b = AdversaryBounds::defaults_for(28, 28);
  CHECK(b.T == doctest::Approx(2.8));
  CHECK(b.theta0 == kPi);

  const auto id = bound_params<double>(Eigen::Vector4d::Zero(), b);
  CHECK(id.theta == 0);
  CHECK(id.s == 1);
  CHECK(id.px == 0);
  CHECK(id.py == 0);
  CHECK(is_identity(params_to_affine(id, 28, 28)));

  const auto sat = bound_params<double>(Eigen::Vector4d::Constant(1e6), b);
  CHECK(sat.theta == doctest::Approx(kPi));
  CHECK(sat.s == doctest::Approx(1.1));
  CHECK(sat.px == doctest::Approx(2.8));
  CHECK(sat.py == doctest::Approx(2.8));
  CHECK(b.contains(sat));
  CHECK(b.contains(bound_params<double>(Eigen::Vector4d::Constant(-1e6), b)));
}

TEST_CASE("bounded outputs stay in range for any raw input") {
  const AdversaryBounds b = AdversaryBounds::defaults_for(28, 28);
  Engine g(1);
  int inside = 0;
  for (int i = 0; i < 100000; ++i) {
    Eigen::Vector4d raw;
    for (auto& v : raw) v = normal01(g) * std::pow(10.0, uniform(g, -2, 4));
    const auto p = bound_params<double>(raw, b);
    inside += std::abs(p.theta) <= kPi && p.s >= 0.9 && p.s <= 1.1 && std::abs(p.px) <= b.T &&
              std::abs(p.py) <= b.T;
  }
  CHECK(inside == 100000);
  float big = 1e30f;
  CHECK(b.contains(bound_params<float>(Eigen::Vector4f::Constant(big), b)));
}

TEST_CASE("params_to_affine examples") {
  CHECK(is_identity(params_to_affine<double>({0, 1, 0, 0}, 21, 21)));
  const auto quarter = params_to_affine<double>({kPi / 2, 1, 0, 0}, 21, 21);
  CHECK((quarter - mat(0, -1, 0, 1, 0, 0)).cwiseAbs().maxCoeff() < 1e-15);
  const auto shifted = params_to_affine<double>({0, 1.1, 2, -2}, 21, 21);
  CHECK((shifted - mat(1.1, 0, 0.2, 0, 1.1, -0.2)).cwiseAbs().maxCoeff() < 1e-15);
  // Non-square: x uses the width, y the height.
  const auto rect = params_to_affine<double>({0, 1, 3, 3}, 7, 31);
  CHECK(rect(0, 2) == doctest::Approx(0.2));
  CHECK(rect(1, 2) == doctest::Approx(1.0));
}

TEST_CASE("raw_to_affine_backward matches central differences") {
  const AdversaryBounds b = AdversaryBounds::defaults_for(16, 12);
  Engine g(2);
  const double h = 1e-6;
  for (auto mode : {AffineParameterization::Similarity, AffineParameterization::Free}) {
    for (int t = 0; t < 50; ++t) {
      Eigen::VectorXd raw(raw_outputs(mode));
      for (auto& v : raw) v = uniform(g, -2, 2);
      AffineMatrix<double> up;
      for (Eigen::Index k = 0; k < 6; ++k) up.data()[k] = uniform(g, -1, 1);
      auto f = [&] { return (raw_to_affine<double>(raw, b, mode, 16, 12).array() * up.array()).sum(); };
      const Eigen::VectorXd an = raw_to_affine_backward<double>(raw, b, mode, 16, 12, up);
      for (Eigen::Index k = 0; k < raw.size(); ++k) {
        const double keep = raw(k);
        raw(k) = keep + h;
        const double fp = f();
        raw(k) = keep - h;
        const double fm = f();
        raw(k) = keep;
        CHECK(an(k) == doctest::Approx((fp - fm) / (2 * h)).epsilon(1e-6).scale(1e-3));
      }
    }
  }
}

TEST_CASE("free parameterization stays within its deviation bounds") {
  const AdversaryBounds b = AdversaryBounds::defaults_for(28, 28);
  const auto a = raw_to_affine<double>(Eigen::VectorXd::Constant(6, 50.0), b, AffineParameterization::Free, 28, 28);
  CHECK(a(0, 0) == doctest::Approx(1.1));
  CHECK(a(0, 1) == doctest::Approx(0.1));
  CHECK(a(0, 2) == doctest::Approx(2 * 2.8 / 27));
  CHECK(is_identity(raw_to_affine<double>(Eigen::VectorXd::Zero(6), b, AffineParameterization::Free, 28, 28)));
}

TEST_CASE("stn_dropout rates 0 and 1") {
  std::vector<AffineMatrix<double>> ms(20, mat(1.05, 0.1, 0.2, -0.1, 0.95, 0));
  Engine g(3);
  const auto all = stn_dropout<double>(ms, 1.0, g);
  for (std::size_t i = 0; i < ms.size(); ++i) {
    CHECK(is_identity(all.matrices[i]));
    CHECK(all.dropped[i]);
  }
  const auto none = stn_dropout<double>(ms, 0.0, g);
  for (std::size_t i = 0; i < ms.size(); ++i) {
    CHECK(none.matrices[i] == ms[i]);
    CHECK(!none.dropped[i]);
  }
  // Idempotent at the extremes.
  CHECK(stn_dropout<double>(all.matrices, 1.0, g).matrices == all.matrices);
  CHECK(stn_dropout<double>(none.matrices, 0.0, g).matrices == none.matrices);
  CHECK_THROWS_AS(stn_dropout<double>(ms, 1.5, g), ContractError);
  CHECK_THROWS_AS(stn_dropout<double>(ms, -0.1, g), ContractError);
}

TEST_CASE("stn_dropout at rate 0.5 drops about half and replays under a seed") {
  std::vector<AffineMatrix<double>> ms(10000, mat(1.05, 0, 0, 0, 1, 0));
  Engine g1(4), g2(4);
  const auto a = stn_dropout<double>(ms, 0.5, g1);
  const auto b = stn_dropout<double>(ms, 0.5, g2);
  CHECK(a.dropped == b.dropped);
  int dropped = 0;
  for (std::size_t i = 0; i < ms.size(); ++i) {
    dropped += a.dropped[i];
    CHECK(is_identity(a.matrices[i]) == a.dropped[i]);
  }
  const double frac = dropped / 10000.0;
  CHECK(frac >= 0.48);
  CHECK(frac <= 0.52);
}

TEST_CASE("keyed stn_dropout commutes with batch permutation") {
  Engine g(5);
  std::vector<AffineMatrix<double>> ms;
  std::vector<std::uint64_t> keys;
  for (int i = 0; i < 64; ++i) {
    ms.push_back(mat(1 + 0.001 * (i + 1), 0, 0, 0, 1, 0));
    keys.push_back(1000 + i);
  }
  const auto base = stn_dropout_keyed<double>(ms, 0.5, 9, keys);
  std::vector<int> perm(64);
  for (int i = 0; i < 64; ++i) perm[i] = i;
  shuffle(perm, g);
  std::vector<AffineMatrix<double>> pm;
  std::vector<std::uint64_t> pk;
  for (int i : perm) {
    pm.push_back(ms[i]);
    pk.push_back(keys[i]);
  }
  const auto permuted = stn_dropout_keyed<double>(pm, 0.5, 9, pk);
  for (int j = 0; j < 64; ++j) {
    CHECK(permuted.dropped[j] == base.dropped[perm[j]]);
    CHECK(permuted.matrices[j] == base.matrices[perm[j]]);
  }
}

TEST_CASE("adversary_objective examples") {
  const std::vector<AffineMatrix<double>> ids(3, identity_affine<double>());
  CHECK(adversary_objective<double>(0.7, ids, 5.0) == 0.7);
  const std::vector<AffineMatrix<double>> far{mat(2, 1, 1, 1, 0, 1)};
  CHECK(adversary_objective<double>(0.7, far, 0.0) == 0.7);
  const std::vector<AffineMatrix<double>> one{mat(1.1, 0, 0, 0, 1, 0)};
  CHECK(adversary_objective<double>(1.0, one, 10.0) == doctest::Approx(0.9));
  CHECK_THROWS_AS(adversary_objective<double>(1.0, one, -1.0), ContractError);
}

TEST_CASE("fresh adversary predicts the identity warp") {
  Engine g(6);
  AdversaryNet<double> net({{1, 28, 28, 2, 16, false}, 4}, 7);
  const auto x = random_batch(5, 28, 28, g);
  CHECK(net.forward(x).cwiseAbs().maxCoeff() == 0);
  Image<double> img(28, 28);
  img.values = x.data.head(784).array();
  const auto p = predict_params(net, img, AdversaryBounds::defaults_for(28, 28));
  CHECK(is_identity(params_to_affine(p, 28, 28)));
}

TEST_CASE("a small ascent step does not decrease the adversary objective") {
  Engine g(8);
  int checked = 0;
  while (checked < 10) {
    EmbeddingNet<double> cls({{1, 16, 16, 2, 8, true}, 32}, g());
    AdversaryNet<double> adv({{1, 16, 16, 2, 8, false}, 4}, g());
    for (auto& v : adv.params()) v += uniform(g, -0.3, 0.3);
    const auto support = random_batch(2, 16, 16, g);
    const auto query = random_batch(4, 16, 16, g);
    const std::vector<int> sl{0, 1}, ql{0, 1, 1, 0};
    SupportWarp<double> warp;
    warp.kind = SupportWarp<double>::Kind::Adversary;
    warp.adversary = &adv;
    warp.bounds = AdversaryBounds::defaults_for(16, 16);
    auto run = [&](bool grads) {
      return forward_backward<double>(cls, support, sl, query, ql, 2, warp, {}, 0.1, NormMode::Eval, grads);
    };
    const auto r = run(true);
    const double norm = r.grad_adversary.norm();
    if (norm < 1e-8) continue;
    ++checked;
    adv.params() += 1e-4 * r.grad_adversary / norm;
    CHECK(run(false).objective >= r.objective);
  }
}

TEST_CASE("trained adversary outputs respect the bounds") {
  TrainConfig cfg;
  cfg.mode = TrainMode::Ma3Lambda0;
  cfg.dataset = "toy";
  cfg.image_size = 16;
  cfg.blocks = 2;
  cfg.filters = 8;
  cfg.adv_filters = 8;
  cfg.dropout_rate = 0;
  cfg.lr_adv = 0.05;  // push outputs toward saturation
  cfg.train_classes = 10;
  cfg.val_classes = cfg.test_classes = 5;
  const TaskData task = load_task(cfg);
  const auto eps = sample_episodes(task.dataset, task.split.train, 100, 5, 1, 5, 3);
  Trainer<double> trainer(cfg, 16, 16);
  const double t_norm = 1.6 * 2 / 15;  // T = 1.6 px in normalized units
  int bad = 0;
  for (const auto& ep : eps) {
    trainer.train_step(ep);
    for (const auto& a : trainer.last_matrices()) {
      const double s = std::hypot(a(0, 0), a(1, 0));
      bad += !(s >= 0.9 - 1e-12 && s <= 1.1 + 1e-12 && std::abs(a(0, 2)) <= t_norm + 1e-12 &&
               std::abs(a(1, 2)) <= t_norm + 1e-12 && std::abs(a(0, 0) - a(1, 1)) < 1e-12 &&
               std::abs(a(0, 1) + a(1, 0)) < 1e-12);
    }
  }
  CHECK(bad == 0);
}

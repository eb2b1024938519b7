#include "ma3/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "ma3/trainer.hpp"

namespace ma3 {

namespace {

using Mat64 = Mat<double>;
using Vec64 = Vec<double>;

constexpr double kBreakpointMargin = 1e-4;  // pixels
constexpr double kKinkTolerance = 1e-3;

double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Finite-difference probe of f along one coordinate.
struct Probe {
  double central;
  bool kink;  // one-sided slopes disagree: a ReLU/max-pool switch lies inside the stencil
};

Probe probe(const std::function<double()>& f, double& x, double h) {
  const double keep = x;
  const double mid = f();
  x = keep + h;
  const double up = f();
  x = keep - h;
  const double down = f();
  x = keep;
  const double right = (up - mid) / h, left = (mid - down) / h;
  const bool kink = std::abs(right - left) > kKinkTolerance * std::max({std::abs(right), std::abs(left), 1e-3});
  return {(up - down) / (2 * h), kink};
}

// Compares `analytic` with central differences on up to `count` coordinates of
// `params`, visiting them in a random order and skipping non-smooth ones.
double compare_sampled(const std::function<double()>& f, Vec64& params, const Vec64& analytic, int count, double h,
                       Engine& g, int& skipped) {
  const int n = static_cast<int>(params.size());
  std::vector<double> an, fd;
  for (int i : sample_without_replacement(n, n, g)) {
    if (static_cast<int>(an.size()) == count) break;
    const Probe p = probe(f, params(i), h);
    if (p.kink) {
      ++skipped;
      continue;
    }
    an.push_back(analytic(i));
    fd.push_back(p.central);
  }
  return relative_error(an, fd);
}

Image<double> random_image(int h, int w, Engine& g) {
  Image<double> img(h, w);
  for (auto& v : img.values) v = uniform01(g);
  return img;
}

AffineMatrix<double> near_identity(Engine& g, double spread) {
  AffineMatrix<double> a = identity_affine<double>();
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] += uniform(g, -spread, spread);
  return a;
}

// True when no sampling location lies within `margin` pixels of an interpolation breakpoint.
bool clear_of_breakpoints(const SampleGrid<double>& grid, int h, int w, double margin) {
  for (Eigen::Index k = 0; k < grid.x.size(); ++k) {
    const double ix = (grid.x.data()[k] + 1) * (w - 1) / 2;
    const double iy = (grid.y.data()[k] + 1) * (h - 1) / 2;
    if (std::abs(ix - std::round(ix)) < margin || std::abs(iy - std::round(iy)) < margin) return false;
  }
  return true;
}

EmbeddingArch tiny_embedding() { return {{1, 16, 16, 2, 8, true}, 32}; }
AdversaryArch tiny_adversary() { return {{1, 16, 16, 2, 8, false}, 4}; }

void scramble(Vec64& params, Engine& g, double scale) {
  for (auto& v : params) v += uniform(g, -scale, scale);
}

Tensor4<double> random_batch(int n, int h, int w, Engine& g) {
  Tensor4<double> t(n, 1, h, w);
  for (auto& v : t.data) v = uniform01(g);
  return t;
}

// --- components ---------------------------------------------------------------

GradcheckComponent check_warp(const GradcheckOptions& opt, bool affine_part) {
  GradcheckComponent c{affine_part ? "warp.affine" : "warp.image"};
  Engine g(derive_seed(opt.seed, affine_part ? 11 : 10));
  const int h = 8, w = 8;
  while (c.trials < opt.trials) {
    Image<double> img = random_image(h, w, g);
    AffineMatrix<double> a = near_identity(g, 0.2);
    const Image<double> up = random_image(h, w, g);
    if (!clear_of_breakpoints(affine_grid(a, h, w), h, w, 10 * kBreakpointMargin)) continue;
    auto loss = [&] { return (bilinear_sample(img, affine_grid(a, h, w)).values * up.values).sum(); };
    const auto grads = warp_backward(img, affine_grid(a, h, w), up);
    std::vector<double> an, fd;
    if (affine_part) {
      for (Eigen::Index i = 0; i < a.size(); ++i) {
        an.push_back(grads.affine.data()[i]);
        fd.push_back(probe(loss, a.data()[i], opt.step).central);
      }
    } else {
      for (Eigen::Index i = 0; i < img.values.size(); ++i) {
        an.push_back(grads.image.values[i]);
        fd.push_back(probe(loss, img.values[i], opt.step).central);
      }
    }
    c.max_rel_error = std::max(c.max_rel_error, relative_error(an, fd));
    ++c.trials;
  }
  return c;
}

GradcheckComponent check_embed(const GradcheckOptions& opt, NormMode mode) {
  GradcheckComponent c{mode == NormMode::Eval ? "embed.eval" : "embed.train"};
  Engine g(derive_seed(opt.seed, mode == NormMode::Eval ? 20 : 21));
  for (; c.trials < opt.trials; ++c.trials) {
    EmbeddingNet<double> net(tiny_embedding(), g());
    scramble(net.params(), g, 0.1);
    for (auto& v : net.running_mean()) v = uniform(g, -0.5, 0.5);
    for (auto& v : net.running_var()) v = uniform(g, 0.5, 2.0);
    const Tensor4<double> x = random_batch(3, 16, 16, g);

    typename EmbeddingNet<double>::Cache cache;
    const Mat64 e = net.forward(x, mode, &cache);
    Vec64 grad = Vec64::Zero(net.params().size());
    net.backward(cache, 2 * e, grad, false);

    auto loss = [&] { return net.forward(x, mode).squaredNorm(); };
    const double rel = compare_sampled(loss, net.params(), grad, opt.sampled_coords, opt.step, g, c.skipped);
    c.max_rel_error = std::max(c.max_rel_error, rel);
  }
  return c;
}

// Tiny 2-way 1-shot episode through the whole pipeline.
struct ChainState {
  EmbeddingNet<double> classifier;
  AdversaryNet<double> adversary;
  Tensor4<double> support, query;
  std::vector<int> support_labels{0, 1};
  std::vector<int> query_labels{0, 1, 1, 0};
  SupportWarp<double> warp;
  HeadConfig head;
  double lambda = 0.1;

  StepResult<double> run(bool grads) const {
    SupportWarp<double> w = warp;
    w.adversary = &adversary;
    return forward_backward<double>(classifier, support, support_labels, query, query_labels, 2, w, head, lambda,
                                    NormMode::Train, grads);
  }
};

ChainState make_chain(Engine& g) {
  ChainState s;
  s.classifier = EmbeddingNet<double>(tiny_embedding(), g());
  s.adversary = AdversaryNet<double>(tiny_adversary(), g());
  scramble(s.adversary.params(), g, 0.3);
  s.support = random_batch(2, 16, 16, g);
  s.query = random_batch(4, 16, 16, g);
  s.warp.kind = SupportWarp<double>::Kind::Adversary;
  s.warp.bounds = AdversaryBounds::defaults_for(16, 16);
  s.head.kind = uniform01(g) < 0.5 ? HeadKind::Euclidean : HeadKind::Cosine;
  return s;
}

bool chain_clear_of_breakpoints(const ChainState& s) {
  const auto r = s.run(false);
  for (const auto& a : r.matrices)
    if (!clear_of_breakpoints(affine_grid(a, 16, 16), 16, 16, kBreakpointMargin)) return false;
  return true;
}

GradcheckComponent check_chain(const GradcheckOptions& opt, bool adversary_part) {
  GradcheckComponent c{adversary_part ? "chain.adversary" : "chain.classifier"};
  Engine g(derive_seed(opt.seed, adversary_part ? 31 : 30));
  while (c.trials < opt.trials) {
    ChainState s = make_chain(g);
    if (!chain_clear_of_breakpoints(s)) continue;
    const auto r = s.run(true);
    Vec64& params = adversary_part ? s.adversary.params() : s.classifier.params();
    Vec64 grad = adversary_part ? r.grad_adversary : r.grad_classifier;
    if (adversary_part && opt.sign_bug) grad = -grad;
    auto value = [&] {
      const auto f = s.run(false);
      return adversary_part ? f.objective : f.loss;
    };
    const double rel = compare_sampled(value, params, grad, opt.sampled_coords, opt.step, g, c.skipped);
    c.max_rel_error = std::max(c.max_rel_error, rel);
    ++c.trials;
  }
  return c;
}

}  // namespace

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  if (analytic.size() != numeric.size()) throw ContractError("relative_error: size mismatch");
  std::vector<double> diff(analytic.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = analytic[i] - numeric[i];
  return norm(diff) / std::max({norm(analytic), norm(numeric), 1e-8});
}

GradcheckOptions gradcheck_preset(const std::string& name) {
  GradcheckOptions o;
  if (name == "default") return o;
  if (name == "quick") {
    o.trials = 10;
    return o;
  }
  if (name == "forced-bug") {
    o.trials = 10;
    o.sign_bug = true;
    return o;
  }
  throw ConfigError("gradcheck: unknown preset '" + name + "' (default, quick, forced-bug)", "preset");
}

const GradcheckComponent& GradcheckReport::worst() const {
  if (components.empty()) throw ContractError("gradcheck: empty report");
  return *std::max_element(components.begin(), components.end(),
                           [](const auto& a, const auto& b) { return a.max_rel_error < b.max_rel_error; });
}

GradcheckReport run_gradcheck(const GradcheckOptions& opt) {
  if (opt.trials < 1) throw ConfigError("gradcheck: trials must be positive", "trials");
  GradcheckReport r;
  r.components.push_back(check_warp(opt, false));
  r.components.push_back(check_warp(opt, true));
  r.components.push_back(check_embed(opt, NormMode::Eval));
  r.components.push_back(check_embed(opt, NormMode::Train));
  r.components.push_back(check_chain(opt, false));
  r.components.push_back(check_chain(opt, true));
  return r;
}

}  // namespace ma3

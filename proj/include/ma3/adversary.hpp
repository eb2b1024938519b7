#pragma once

// The adversary's output side: bounded augmentation parameters, their affine
// matrix, STN dropout and the regularized objective the adversary ascends.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "ma3/errors.hpp"
#include "ma3/geometry.hpp"
#include "ma3/layers.hpp"
#include "ma3/nets.hpp"
#include "ma3/rng.hpp"
#include "ma3/sampler.hpp"

namespace ma3 {

/// Rotation (radians), scale, and translations in pixels.
template <typename Scalar>
struct AugmentParams {
  Scalar theta = 0;
  Scalar s = 1;
  Scalar px = 0;
  Scalar py = 0;
};

struct AdversaryBounds {
  double theta0 = std::numbers::pi;
  double eps_s = 0.1;
  double T = 2.8;  // pixels

  /// theta0 = pi, eps_s = 0.1, T = 0.1 * max(H, W).
  static AdversaryBounds defaults_for(int height, int width) {
    return {std::numbers::pi, 0.1, 0.1 * std::max(height, width)};
  }

  /// Closed-range check in the working precision, with the bounds rounded the way
  /// bound_params rounds them (1 + eps_s rather than |s - 1| <= eps_s).
  template <typename Scalar>
  bool contains(const AugmentParams<Scalar>& p) const {
    const Scalar t0 = Scalar(theta0), t = Scalar(T), e = Scalar(eps_s);
    return std::abs(p.theta) <= t0 && p.s >= Scalar(1) - e && p.s <= Scalar(1) + e && std::abs(p.px) <= t &&
           std::abs(p.py) <= t;
  }
};

/// How raw adversary outputs become an affine matrix.
enum class AffineParameterization {
  Similarity,  // (theta, s, px, py) via tanh bounds; 4 raw outputs
  Free,        // six independently bounded deviations from identity; 6 raw outputs (experimental)
};

inline int raw_outputs(AffineParameterization p) { return p == AffineParameterization::Free ? 6 : 4; }

/// theta = theta0 tanh(r1), s = 1 + eps_s tanh(r2), px = T tanh(r3), py = T tanh(r4).
template <typename Scalar, typename Derived>
AugmentParams<Scalar> bound_params(const Eigen::MatrixBase<Derived>& raw, const AdversaryBounds& b) {
  return {Scalar(b.theta0) * std::tanh(Scalar(raw(0))), Scalar(1) + Scalar(b.eps_s) * std::tanh(Scalar(raw(1))),
          Scalar(b.T) * std::tanh(Scalar(raw(2))), Scalar(b.T) * std::tanh(Scalar(raw(3)))};
}

/// Uniform draw inside the bounds (the standard-augmentation baseline), in the
/// order theta, s, px, py.
inline AugmentParams<double> sample_uniform_params(const AdversaryBounds& b, Engine& g) {
  AugmentParams<double> p;
  p.theta = uniform(g, -b.theta0, b.theta0);
  p.s = uniform(g, 1.0 - b.eps_s, 1.0 + b.eps_s);
  p.px = uniform(g, -b.T, b.T);
  p.py = uniform(g, -b.T, b.T);
  return p;
}

template <typename Scalar>
AugmentParams<Scalar> predict_params(const AdversaryNet<Scalar>& net, const Image<Scalar>& img,
                                     const AdversaryBounds& bounds) {
  Tensor4<Scalar> x(1, img.channels, img.height, img.width);
  x.data = img.values.matrix();
  const Mat<Scalar> raw = net.forward(x);
  return bound_params<Scalar>(raw.row(0).transpose(), bounds);
}

/// [[s cos t, -s sin t, px'], [s sin t, s cos t, py']] with pixel translations
/// converted to normalized units (px' = px / ((W - 1) / 2), py' = py / ((H - 1) / 2)).
template <typename Scalar>
AffineMatrix<Scalar> params_to_affine(const AugmentParams<Scalar>& p, int height, int width) {
  const Scalar c = std::cos(p.theta), s = std::sin(p.theta);
  AffineMatrix<Scalar> a;
  a << p.s * c, -p.s * s, p.px * Scalar(2) / Scalar(width - 1),  //
      p.s * s, p.s * c, p.py * Scalar(2) / Scalar(height - 1);
  return a;
}

/// d loss / d (theta, s, px, py) given d loss / d A.
template <typename Scalar>
Eigen::Matrix<Scalar, 4, 1> params_to_affine_backward(const AugmentParams<Scalar>& p, int height, int width,
                                                      const AffineMatrix<Scalar>& g) {
  const Scalar c = std::cos(p.theta), s = std::sin(p.theta);
  Eigen::Matrix<Scalar, 4, 1> d;
  d(0) = p.s * (-g(0, 0) * s - g(0, 1) * c + g(1, 0) * c - g(1, 1) * s);
  d(1) = g(0, 0) * c - g(0, 1) * s + g(1, 0) * s + g(1, 1) * c;
  d(2) = g(0, 2) * Scalar(2) / Scalar(width - 1);
  d(3) = g(1, 2) * Scalar(2) / Scalar(height - 1);
  return d;
}

/// Raw outputs -> affine matrix for either parameterization.
template <typename Scalar, typename Derived>
AffineMatrix<Scalar> raw_to_affine(const Eigen::MatrixBase<Derived>& raw, const AdversaryBounds& b,
                                   AffineParameterization mode, int height, int width) {
  if (mode == AffineParameterization::Similarity)
    return params_to_affine(bound_params<Scalar>(raw, b), height, width);
  const Scalar tx = Scalar(2 * b.T / (width - 1)), ty = Scalar(2 * b.T / (height - 1));
  const Scalar e = Scalar(b.eps_s);
  AffineMatrix<Scalar> a = identity_affine<Scalar>();
  a(0, 0) += e * std::tanh(Scalar(raw(0)));
  a(0, 1) += e * std::tanh(Scalar(raw(1)));
  a(0, 2) += tx * std::tanh(Scalar(raw(2)));
  a(1, 0) += e * std::tanh(Scalar(raw(3)));
  a(1, 1) += e * std::tanh(Scalar(raw(4)));
  a(1, 2) += ty * std::tanh(Scalar(raw(5)));
  return a;
}

/// d loss / d raw outputs given d loss / d A.
template <typename Scalar, typename Derived>
Vec<Scalar> raw_to_affine_backward(const Eigen::MatrixBase<Derived>& raw, const AdversaryBounds& b,
                                   AffineParameterization mode, int height, int width,
                                   const AffineMatrix<Scalar>& g) {
  auto dtanh = [](Scalar r) {
    const Scalar t = std::tanh(r);
    return Scalar(1) - t * t;
  };
  if (mode == AffineParameterization::Similarity) {
    const auto p = bound_params<Scalar>(raw, b);
    const auto dp = params_to_affine_backward(p, height, width, g);
    Vec<Scalar> d(4);
    d(0) = dp(0) * Scalar(b.theta0) * dtanh(Scalar(raw(0)));
    d(1) = dp(1) * Scalar(b.eps_s) * dtanh(Scalar(raw(1)));
    d(2) = dp(2) * Scalar(b.T) * dtanh(Scalar(raw(2)));
    d(3) = dp(3) * Scalar(b.T) * dtanh(Scalar(raw(3)));
    return d;
  }
  const Scalar tx = Scalar(2 * b.T / (width - 1)), ty = Scalar(2 * b.T / (height - 1));
  const Scalar e = Scalar(b.eps_s);
  Vec<Scalar> d(6);
  d(0) = g(0, 0) * e * dtanh(Scalar(raw(0)));
  d(1) = g(0, 1) * e * dtanh(Scalar(raw(1)));
  d(2) = g(0, 2) * tx * dtanh(Scalar(raw(2)));
  d(3) = g(1, 0) * e * dtanh(Scalar(raw(3)));
  d(4) = g(1, 1) * e * dtanh(Scalar(raw(4)));
  d(5) = g(1, 2) * ty * dtanh(Scalar(raw(5)));
  return d;
}

template <typename Scalar>
struct DropoutResult {
  std::vector<AffineMatrix<Scalar>> matrices;
  std::vector<bool> dropped;  // replaced by identity; carries no gradient
};

/// Replaces each matrix by the identity with probability `rate`, drawing one
/// uniform per matrix from `rng` in batch order.
template <typename Scalar>
DropoutResult<Scalar> stn_dropout(std::span<const AffineMatrix<Scalar>> matrices, double rate, Engine& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ContractError("stn_dropout: rate must lie in [0, 1]");
  DropoutResult<Scalar> r;
  r.matrices.assign(matrices.begin(), matrices.end());
  r.dropped.assign(matrices.size(), false);
  for (std::size_t i = 0; i < matrices.size(); ++i) {
    if (uniform01(rng) < rate) {
      r.matrices[i] = identity_affine<Scalar>();
      r.dropped[i] = true;
    }
  }
  return r;
}

/// Same decision rule, but item i draws from its own stream keyed by (seed, keys[i]),
/// so decisions follow the items under any batch permutation.
template <typename Scalar>
DropoutResult<Scalar> stn_dropout_keyed(std::span<const AffineMatrix<Scalar>> matrices, double rate,
                                        std::uint64_t seed, std::span<const std::uint64_t> keys) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ContractError("stn_dropout: rate must lie in [0, 1]");
  if (keys.size() != matrices.size()) throw ContractError("stn_dropout: one key per matrix required");
  DropoutResult<Scalar> r;
  r.matrices.assign(matrices.begin(), matrices.end());
  r.dropped.assign(matrices.size(), false);
  for (std::size_t i = 0; i < matrices.size(); ++i) {
    Engine g(derive_seed(seed, keys[i]));
    if (uniform01(g) < rate) {
      r.matrices[i] = identity_affine<Scalar>();
      r.dropped[i] = true;
    }
  }
  return r;
}

/// L - lambda * sum_j ||A_j - I||^2: ascended by the adversary.
template <typename Scalar>
Scalar adversary_objective(Scalar cls_loss, std::span<const AffineMatrix<Scalar>> matrices, double lambda) {
  if (!(lambda >= 0.0)) throw ContractError("adversary_objective: lambda must be non-negative");
  Scalar reg = 0;
  for (const auto& a : matrices) reg += identity_reg_loss(a);
  return cls_loss - Scalar(lambda) * reg;
}

}  // namespace ma3

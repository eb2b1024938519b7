#pragma once

// Small-perturbation camera geometry and the 2x3 affine algebra shared by the
// warp, the adversary and the approximation checks.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <span>
#include <sstream>
#include <utility>
#include <vector>

#include "ma3/errors.hpp"
#include "ma3/rng.hpp"

namespace ma3 {

template <typename Scalar>
using Point2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar>
using Point3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using RotationMatrix = Eigen::Matrix<Scalar, 3, 3>;

/// [[a1, a2, a3], [a4, a5, a6]] acting on homogeneous normalized coordinates [u, v, 1].
template <typename Scalar>
using AffineMatrix = Eigen::Matrix<Scalar, 2, 3>;

template <typename Scalar>
AffineMatrix<Scalar> identity_affine() {
  AffineMatrix<Scalar> a;
  a << 1, 0, 0, 0, 1, 0;
  return a;
}

template <typename Derived>
bool is_identity(const Eigen::MatrixBase<Derived>& a) {
  using S = typename Derived::Scalar;
  return a(0, 0) == S(1) && a(0, 1) == S(0) && a(0, 2) == S(0) && a(1, 0) == S(0) &&
         a(1, 1) == S(1) && a(1, 2) == S(0);
}

/// The six deviations from identity (a1-1, a2, a3, a4, a5-1, a6).
template <typename Scalar>
Eigen::Matrix<Scalar, 6, 1> deltas(const AffineMatrix<Scalar>& a) {
  Eigen::Matrix<Scalar, 6, 1> d;
  d << a(0, 0) - 1, a(0, 1), a(0, 2), a(1, 0), a(1, 1) - 1, a(1, 2);
  return d;
}

/// Yaw alpha, pitch beta, roll gamma (radians), translation t and object depth z0.
template <typename Scalar>
struct PerturbationParams {
  Scalar alpha = 0;
  Scalar beta = 0;
  Scalar gamma = 0;
  Point3<Scalar> t = Point3<Scalar>::Zero();
  Scalar z0 = 1;

  static constexpr double kMaxAngle = 0.3;
  static constexpr double kMaxRelativeTranslation = 0.3;

  bool in_validity_regime() const {
    return z0 > 0 && std::abs(alpha) <= kMaxAngle && std::abs(beta) <= kMaxAngle &&
           std::abs(gamma) <= kMaxAngle && t.norm() / z0 <= kMaxRelativeTranslation;
  }

  void require_valid() const {
    if (!(z0 > 0)) throw RegimeError("perturbation: z0 must be positive");
    if (!in_validity_regime()) {
      std::ostringstream os;
      os << "perturbation outside validity regime (|angles| <= " << kMaxAngle
         << ", |t|/z0 <= " << kMaxRelativeTranslation << "): alpha=" << alpha
         << " beta=" << beta << " gamma=" << gamma << " |t|/z0=" << t.norm() / z0;
      throw RegimeError(os.str());
    }
  }
};

/// Second-order Taylor expansion of Rz(alpha) Ry(beta) Rx(gamma).
template <typename Scalar>
RotationMatrix<Scalar> rotation_approx(const PerturbationParams<Scalar>& p) {
  p.require_valid();
  const Scalar a = p.alpha, b = p.beta, g = p.gamma;
  RotationMatrix<Scalar> r;
  r << 1 - a * a / 2 - b * b / 2, b * g - a, b + a * g,  //
      a, 1 - a * a / 2 - g * g / 2, a * b - g,           //
      -b, g, 1 - b * b / 2 - g * g / 2;
  return r;
}

/// Exact rotation Rz(alpha) * Ry(beta) * Rx(gamma).
template <typename Scalar>
RotationMatrix<Scalar> rotation_exact(const PerturbationParams<Scalar>& p) {
  using Axis = Eigen::AngleAxis<Scalar>;
  const Axis rz(p.alpha, Point3<Scalar>::UnitZ());
  const Axis ry(p.beta, Point3<Scalar>::UnitY());
  const Axis rx(p.gamma, Point3<Scalar>::UnitX());
  return (rz * ry * rx).toRotationMatrix();
}

/// Pinhole projection of R*p + t onto the z = 1 plane.
template <typename Scalar>
Point2<Scalar> project(const Point3<Scalar>& point, const RotationMatrix<Scalar>& r,
                       const Point3<Scalar>& t) {
  const Point3<Scalar> q = r * point + t;
  if (!(q.z() > 0)) {
    std::ostringstream os;
    os << "projection: transformed depth " << q.z() << " is not positive";
    throw ProjectionError(os.str());
  }
  return {q.x() / q.z(), q.y() / q.z()};
}

template <typename Scalar>
Point2<Scalar> affine_compose_on_point(const AffineMatrix<Scalar>& a, const Point2<Scalar>& p) {
  return a * p.homogeneous();
}

template <typename Scalar>
struct AffineFit {
  AffineMatrix<Scalar> matrix;
  Scalar residual;  // max absolute coordinate error over all pairs
};

/// Least-squares affine map taking each `before` point to its `after` point.
///
/// Normal equations carry a 1e-12 ridge. Clouds whose centered design has a
/// singular-value ratio below 1e-10 (collinear or coincident points) are
/// rejected.
template <typename Scalar>
AffineFit<Scalar> fit_affine(std::span<const std::pair<Point2<Scalar>, Point2<Scalar>>> pairs) {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const auto n = static_cast<Eigen::Index>(pairs.size());
  if (n < 3) throw RankDeficientError("fit_affine: need at least 3 point pairs");

  Mat design(n, 3), target(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    design.row(i) << pairs[i].first.x(), pairs[i].first.y(), Scalar(1);
    target.row(i) = pairs[i].second.transpose();
  }

  const Mat centered = design.leftCols(2).rowwise() - design.leftCols(2).colwise().mean();
  const Eigen::JacobiSVD<Mat> svd(centered);
  const auto sv = svd.singularValues();
  if (!(sv(0) > 0) || sv(1) / sv(0) < Scalar(1e-10)) {
    throw RankDeficientError("fit_affine: before-points are collinear or degenerate");
  }

  Eigen::Matrix<Scalar, 3, 3> normal = design.transpose() * design;
  normal.diagonal().array() += Scalar(1e-12);
  const Eigen::Matrix<Scalar, 3, 2> coeffs = normal.ldlt().solve(design.transpose() * target);

  AffineFit<Scalar> fit;
  fit.matrix = coeffs.transpose();
  fit.residual = (design * coeffs - target).cwiseAbs().maxCoeff();
  return fit;
}

template <typename Scalar>
AffineFit<Scalar> fit_affine(const std::vector<std::pair<Point2<Scalar>, Point2<Scalar>>>& pairs) {
  return fit_affine<Scalar>(std::span<const std::pair<Point2<Scalar>, Point2<Scalar>>>(pairs));
}

/// Squared Frobenius distance to the identity affine map.
template <typename Scalar>
Scalar identity_reg_loss(const AffineMatrix<Scalar>& a) {
  return (a - identity_affine<Scalar>()).squaredNorm();
}

template <typename Scalar>
AffineMatrix<Scalar> identity_reg_grad(const AffineMatrix<Scalar>& a) {
  return 2 * (a - identity_affine<Scalar>());
}

/// One row of the affine-approximation report.
struct ApproxCheckRow {
  double magnitude;
  double residual;  // max |exact projection - best affine fit|
  AffineMatrix<double> fitted;
};

/// Perturbs a cloud of `points` scene points ((x, y) uniform in [-1, 1]^2 at
/// depth z0) with all three angles equal to `magnitude` and a translation of
/// length magnitude * z0 along (1, 1, 1), projects exactly, and fits an affine
/// map from the unperturbed to the perturbed image points.
inline ApproxCheckRow approx_fit_residual(double magnitude, int points, double z0,
                                          std::uint64_t seed) {
  PerturbationParams<double> p;
  p.alpha = p.beta = p.gamma = magnitude;
  p.t = Point3<double>::Constant(magnitude * z0 / std::sqrt(3.0));
  p.z0 = z0;
  p.require_valid();
  if (points < 3) throw ContractError("approx check: need at least 3 points");

  Engine g(seed);
  const RotationMatrix<double> r = rotation_exact(p);
  std::vector<std::pair<Point2<double>, Point2<double>>> pairs;
  pairs.reserve(points);
  for (int i = 0; i < points; ++i) {
    const double px = uniform(g, -1, 1);
    const double py = uniform(g, -1, 1);
    const Point3<double> x(px, py, z0);
    pairs.emplace_back(project<double>(x, RotationMatrix<double>::Identity(), Point3<double>::Zero()),
                       project<double>(x, r, p.t));
  }
  const auto fit = fit_affine<double>(pairs);
  return {magnitude, fit.residual, fit.matrix};
}

}  // namespace ma3

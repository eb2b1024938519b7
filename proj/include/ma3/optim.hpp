#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "ma3/layers.hpp"

namespace ma3 {

/// Adaptive-moment gradient descent over one flat parameter vector.
template <typename Scalar>
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(Eigen::Index size, Options opt = {})
      : opt_(opt), m_(Vec<Scalar>::Zero(size)), v_(Vec<Scalar>::Zero(size)) {}

  /// params -= lr * m_hat / (sqrt(v_hat) + eps)
  void step(Vec<Scalar>& params, const Vec<Scalar>& grad, double lr) {
    ++t_;
    const Scalar b1 = Scalar(opt_.beta1), b2 = Scalar(opt_.beta2);
    m_ = b1 * m_ + (1 - b1) * grad;
    v_ = b2 * v_ + (1 - b2) * grad.cwiseProduct(grad);
    const Scalar c1 = Scalar(1) - Scalar(std::pow(opt_.beta1, t_));
    const Scalar c2 = Scalar(1) - Scalar(std::pow(opt_.beta2, t_));
    const Scalar step = Scalar(lr) / c1;
    params.array() -= step * m_.array() / ((v_.array() / c2).sqrt() + Scalar(opt_.eps));
  }

  long steps() const { return t_; }

 private:
  Options opt_;
  Vec<Scalar> m_, v_;
  long t_ = 0;
};

}  // namespace ma3

#pragma once

// Dense building blocks for the conv nets: NCHW tensors, 3x3 same-padding
// convolution (im2col + GEMM), batch normalization, ReLU, 2x2 max-pool and a
// fully connected layer. Each layer is a pair of free functions (forward,
// backward) over parameter views into a flat parameter vector.

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "ma3/errors.hpp"
#include "ma3/rng.hpp"

namespace ma3 {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatMap = Eigen::Map<Mat<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const Mat<Scalar>>;

template <typename Scalar>
struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  Vec<Scalar> data;

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_), data(Vec<Scalar>::Zero(Eigen::Index(n_) * c_ * h_ * w_)) {}

  Eigen::Index plane() const { return Eigen::Index(h) * w; }
  Eigen::Index item_size() const { return plane() * c; }

  /// Image k viewed as an (H*W) x C column-major matrix: one column per channel.
  MatMap<Scalar> item(int k) { return MatMap<Scalar>(data.data() + k * item_size(), plane(), c); }
  ConstMatMap<Scalar> item(int k) const {
    return ConstMatMap<Scalar>(data.data() + k * item_size(), plane(), c);
  }
  Scalar* channel(int k, int ch) { return data.data() + k * item_size() + ch * plane(); }
  const Scalar* channel(int k, int ch) const { return data.data() + k * item_size() + ch * plane(); }

  bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

/// Offsets of named parameter blocks inside one flat vector.
struct ParamBlock {
  std::string name;
  Eigen::Index offset;
  Eigen::Index rows;
  Eigen::Index cols;
  Eigen::Index size() const { return rows * cols; }
};

class ParamLayout {
 public:
  Eigen::Index add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    blocks_.push_back({std::move(name), total_, rows, cols});
    total_ += rows * cols;
    return blocks_.size() - 1;
  }
  const ParamBlock& operator[](std::size_t i) const { return blocks_[i]; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  Eigen::Index total() const { return total_; }

  template <typename Scalar>
  ConstMatMap<Scalar> view(const Vec<Scalar>& flat, std::size_t i) const {
    const auto& b = blocks_[i];
    return ConstMatMap<Scalar>(flat.data() + b.offset, b.rows, b.cols);
  }
  template <typename Scalar>
  MatMap<Scalar> view(Vec<Scalar>& flat, std::size_t i) const {
    const auto& b = blocks_[i];
    return MatMap<Scalar>(flat.data() + b.offset, b.rows, b.cols);
  }

 private:
  std::vector<ParamBlock> blocks_;
  Eigen::Index total_ = 0;
};

/// He-style uniform fill: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
template <typename Derived>
void he_uniform(Eigen::MatrixBase<Derived>&& m, Eigen::Index fan_in, Engine& g) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  using S = typename Derived::Scalar;
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = S(uniform(g, -bound, bound));
}

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, zero padding 1.
// Weight is F x (C*9) with column index c*9 + ky*3 + kx.

template <typename Scalar>
Mat<Scalar> im2col3x3(const Tensor4<Scalar>& x, int k) {
  const int h = x.h, w = x.w;
  Mat<Scalar> cols = Mat<Scalar>::Zero(x.plane(), Eigen::Index(x.c) * 9);
  for (int ch = 0; ch < x.c; ++ch) {
    const Scalar* src = x.channel(k, ch);
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        Scalar* dst = cols.col(ch * 9 + ky * 3 + kx).data();
        for (int i = 0; i < h; ++i) {
          const int si = i + ky - 1;
          if (si < 0 || si >= h) continue;
          const int j_lo = kx == 0 ? 1 : 0;
          const int j_hi = kx == 2 ? w - 1 : w;
          for (int j = j_lo; j < j_hi; ++j) dst[i * w + j] = src[si * w + j + kx - 1];
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void col2im3x3_add(const Mat<Scalar>& dcols, Tensor4<Scalar>& dx, int k) {
  const int h = dx.h, w = dx.w;
  for (int ch = 0; ch < dx.c; ++ch) {
    Scalar* dst = dx.channel(k, ch);
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Scalar* src = dcols.col(ch * 9 + ky * 3 + kx).data();
        for (int i = 0; i < h; ++i) {
          const int si = i + ky - 1;
          if (si < 0 || si >= h) continue;
          const int j_lo = kx == 0 ? 1 : 0;
          const int j_hi = kx == 2 ? w - 1 : w;
          for (int j = j_lo; j < j_hi; ++j) dst[si * w + j + kx - 1] += src[i * w + j];
        }
      }
    }
  }
}

template <typename Scalar, typename WeightT, typename BiasT>
Tensor4<Scalar> conv3x3_forward(const Tensor4<Scalar>& x, const WeightT& weight, const BiasT& bias,
                                std::vector<Mat<Scalar>>* cols_cache) {
  const int f = static_cast<int>(weight.rows());
  Tensor4<Scalar> y(x.n, f, x.h, x.w);
  if (cols_cache) cols_cache->resize(x.n);
  for (int k = 0; k < x.n; ++k) {
    Mat<Scalar> cols = im2col3x3(x, k);
    auto out = y.item(k);
    out.noalias() = cols * weight.transpose();
    out.rowwise() += bias.col(0).transpose();
    if (cols_cache) (*cols_cache)[k] = std::move(cols);
  }
  return y;
}

/// Accumulates weight/bias gradients; returns d loss / d input when `want_input`.
template <typename Scalar, typename WeightT, typename GradW, typename GradB>
Tensor4<Scalar> conv3x3_backward(const Tensor4<Scalar>& dy, const std::vector<Mat<Scalar>>& cols,
                                 const WeightT& weight, int in_channels, GradW&& grad_w,
                                 GradB&& grad_b, bool want_input) {
  Tensor4<Scalar> dx;
  if (want_input) dx = Tensor4<Scalar>(dy.n, in_channels, dy.h, dy.w);
  for (int k = 0; k < dy.n; ++k) {
    const auto g = dy.item(k);
    grad_w.noalias() += g.transpose() * cols[k];
    grad_b.col(0) += g.colwise().sum().transpose();
    if (want_input) {
      const Mat<Scalar> dcols = g * weight;
      col2im3x3_add(dcols, dx, k);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

enum class NormMode {
  Train,  // batch statistics
  Eval,   // running statistics
};

template <typename Scalar>
struct BatchNormCache {
  Tensor4<Scalar> xhat;
  Vec<Scalar> inv_std;
  Vec<Scalar> batch_mean;
  Vec<Scalar> batch_var;  // biased
  NormMode mode = NormMode::Train;
};

inline constexpr double kBatchNormEps = 1e-5;

template <typename Scalar, typename GammaT, typename BetaT>
Tensor4<Scalar> batchnorm_forward(const Tensor4<Scalar>& x, const GammaT& gamma, const BetaT& beta,
                                  const Vec<Scalar>& running_mean, const Vec<Scalar>& running_var,
                                  NormMode mode, BatchNormCache<Scalar>* cache) {
  Tensor4<Scalar> y(x.n, x.c, x.h, x.w);
  Tensor4<Scalar> xhat(x.n, x.c, x.h, x.w);
  Vec<Scalar> mean(x.c), var(x.c), inv_std(x.c);
  const Eigen::Index plane = x.plane();
  const Scalar count = Scalar(plane * x.n);
  for (int ch = 0; ch < x.c; ++ch) {
    if (mode == NormMode::Train) {
      Scalar s = 0;
      for (int k = 0; k < x.n; ++k) s += Eigen::Map<const Vec<Scalar>>(x.channel(k, ch), plane).sum();
      const Scalar m = s / count;
      Scalar ss = 0;
      for (int k = 0; k < x.n; ++k)
        ss += (Eigen::Map<const Vec<Scalar>>(x.channel(k, ch), plane).array() - m).square().sum();
      mean[ch] = m;
      var[ch] = ss / count;
    } else {
      mean[ch] = running_mean[ch];
      var[ch] = running_var[ch];
    }
    inv_std[ch] = Scalar(1) / std::sqrt(var[ch] + Scalar(kBatchNormEps));
    for (int k = 0; k < x.n; ++k) {
      auto xh = Eigen::Map<Vec<Scalar>>(xhat.channel(k, ch), plane);
      xh = (Eigen::Map<const Vec<Scalar>>(x.channel(k, ch), plane).array() - mean[ch]) * inv_std[ch];
      Eigen::Map<Vec<Scalar>>(y.channel(k, ch), plane) = (xh.array() * gamma(ch, 0) + beta(ch, 0)).matrix();
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
    cache->batch_mean = mean;
    cache->batch_var = var;
    cache->mode = mode;
  }
  return y;
}

template <typename Scalar, typename GammaT, typename GradG, typename GradB>
Tensor4<Scalar> batchnorm_backward(const Tensor4<Scalar>& dy, const BatchNormCache<Scalar>& cache,
                                   const GammaT& gamma, GradG&& grad_gamma, GradB&& grad_beta) {
  Tensor4<Scalar> dx(dy.n, dy.c, dy.h, dy.w);
  const Eigen::Index plane = dy.plane();
  const Scalar count = Scalar(plane * dy.n);
  for (int ch = 0; ch < dy.c; ++ch) {
    Scalar sum_dy = 0, sum_dy_xhat = 0;
    for (int k = 0; k < dy.n; ++k) {
      const auto g = Eigen::Map<const Vec<Scalar>>(dy.channel(k, ch), plane);
      const auto xh = Eigen::Map<const Vec<Scalar>>(cache.xhat.channel(k, ch), plane);
      sum_dy += g.sum();
      sum_dy_xhat += g.dot(xh);
    }
    grad_gamma(ch, 0) += sum_dy_xhat;
    grad_beta(ch, 0) += sum_dy;
    const Scalar gi = gamma(ch, 0) * cache.inv_std[ch];
    for (int k = 0; k < dy.n; ++k) {
      const auto g = Eigen::Map<const Vec<Scalar>>(dy.channel(k, ch), plane);
      const auto xh = Eigen::Map<const Vec<Scalar>>(cache.xhat.channel(k, ch), plane);
      auto d = Eigen::Map<Vec<Scalar>>(dx.channel(k, ch), plane);
      if (cache.mode == NormMode::Train) {
        d = (gi / count) * (count * g.array() - sum_dy - xh.array() * sum_dy_xhat).matrix();
      } else {
        d = gi * g;
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ReLU and 2x2 max-pool (floor on odd sizes).

template <typename Scalar>
Tensor4<Scalar> relu_forward(Tensor4<Scalar> x) {
  x.data = x.data.cwiseMax(Scalar(0));
  return x;
}

/// d/dx relu(x) given the pre-activation; zero at x == 0.
template <typename Scalar>
Tensor4<Scalar> relu_backward(Tensor4<Scalar> dy, const Tensor4<Scalar>& pre) {
  dy.data = (pre.data.array() > Scalar(0)).select(dy.data.array(), Scalar(0)).matrix();
  return dy;
}

template <typename Scalar>
Tensor4<Scalar> maxpool2_forward(const Tensor4<Scalar>& x, std::vector<int>* argmax) {
  const int oh = x.h / 2, ow = x.w / 2;
  if (oh < 1 || ow < 1) throw ConfigError("maxpool: input smaller than the 2x2 window");
  Tensor4<Scalar> y(x.n, x.c, oh, ow);
  if (argmax) argmax->assign(y.data.size(), 0);
  Eigen::Index o = 0;
  for (int k = 0; k < x.n; ++k) {
    for (int ch = 0; ch < x.c; ++ch) {
      const Scalar* src = x.channel(k, ch);
      const Eigen::Index base = src - x.data.data();
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j, ++o) {
          int best = (2 * i) * x.w + 2 * j;
          for (int di = 0; di < 2; ++di)
            for (int dj = 0; dj < 2; ++dj) {
              const int idx = (2 * i + di) * x.w + 2 * j + dj;
              if (src[idx] > src[best]) best = idx;
            }
          y.data[o] = src[best];
          if (argmax) (*argmax)[o] = static_cast<int>(base + best);
        }
      }
    }
  }
  return y;
}

template <typename Scalar>
Tensor4<Scalar> maxpool2_backward(const Tensor4<Scalar>& dy, const std::vector<int>& argmax, int n,
                                  int c, int h, int w) {
  Tensor4<Scalar> dx(n, c, h, w);
  for (Eigen::Index o = 0; o < dy.data.size(); ++o) dx.data[argmax[o]] += dy.data[o];
  return dx;
}

// ---------------------------------------------------------------------------
// Fully connected: rows of `x` are samples; weight is out x in.

template <typename Scalar, typename WeightT, typename BiasT>
Mat<Scalar> linear_forward(const Mat<Scalar>& x, const WeightT& weight, const BiasT& bias) {
  Mat<Scalar> y = x * weight.transpose();
  y.rowwise() += bias.col(0).transpose();
  return y;
}

template <typename Scalar, typename WeightT, typename GradW, typename GradB>
Mat<Scalar> linear_backward(const Mat<Scalar>& dy, const Mat<Scalar>& x, const WeightT& weight,
                            GradW&& grad_w, GradB&& grad_b) {
  grad_w.noalias() += dy.transpose() * x;
  grad_b.col(0) += dy.colwise().sum().transpose();
  return dy * weight;
}

/// Rows are images, columns the flattened (C, H, W) values.
template <typename Scalar>
Mat<Scalar> flatten(const Tensor4<Scalar>& x) {
  return Eigen::Map<const Mat<Scalar>>(x.data.data(), x.item_size(), x.n).transpose();
}

template <typename Scalar>
Tensor4<Scalar> unflatten(const Mat<Scalar>& rows, int c, int h, int w) {
  Tensor4<Scalar> t(static_cast<int>(rows.rows()), c, h, w);
  Eigen::Map<Mat<Scalar>>(t.data.data(), t.item_size(), t.n) = rows.transpose();
  return t;
}

}  // namespace ma3

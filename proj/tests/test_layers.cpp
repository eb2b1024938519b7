#include "doctest.h"

#include <cmath>

#include "ma3/layers.hpp"
#include "ma3/nets.hpp"

using namespace ma3;

namespace {

Tensor4<double> random_tensor(int n, int c, int h, int w, Engine& g) {
  Tensor4<double> t(n, c, h, w);
  for (auto& v : t.data) v = uniform(g, -1, 1);
  return t;
}

double& at(Tensor4<double>& t, int k, int c, int i, int j) { return t.channel(k, c)[i * t.w + j]; }
double at(const Tensor4<double>& t, int k, int c, int i, int j) { return t.channel(k, c)[i * t.w + j]; }

// Direct 3x3 same-padding convolution, weight column c*9 + ky*3 + kx.
Tensor4<double> naive_conv(const Tensor4<double>& x, const Mat<double>& wt, const Vec<double>& b) {
  Tensor4<double> y(x.n, static_cast<int>(wt.rows()), x.h, x.w);
  for (int k = 0; k < x.n; ++k)
    for (int f = 0; f < y.c; ++f)
      for (int i = 0; i < x.h; ++i)
        for (int j = 0; j < x.w; ++j) {
          double s = b[f];
          for (int c = 0; c < x.c; ++c)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int si = i + ky - 1, sj = j + kx - 1;
                if (si < 0 || sj < 0 || si >= x.h || sj >= x.w) continue;
                s += wt(f, c * 9 + ky * 3 + kx) * at(x, k, c, si, sj);
              }
          at(y, k, f, i, j) = s;
        }
  return y;
}

}  // namespace

TEST_CASE("conv3x3 matches a direct convolution") {
  Engine g(1);
  const auto x = random_tensor(2, 3, 5, 6, g);
  Mat<double> wt(4, 27);
  Vec<double> b(4);
  for (auto& v : wt.reshaped()) v = uniform(g, -1, 1);
  for (auto& v : b) v = uniform(g, -1, 1);
  std::vector<Mat<double>> cols;
  const auto y = conv3x3_forward(x, wt, Mat<double>(b), &cols);
  CHECK((y.data - naive_conv(x, wt, b).data).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("conv3x3 backward is the adjoint of forward") {
  // <dy, conv(x)> is bilinear in (x, w); check d/dx and d/dw against the direct form.
  Engine g(2);
  const auto x = random_tensor(2, 2, 4, 5, g);
  const auto dy = random_tensor(2, 3, 4, 5, g);
  Mat<double> wt(3, 18);
  for (auto& v : wt.reshaped()) v = uniform(g, -1, 1);
  const Mat<double> b = Mat<double>::Zero(3, 1);
  std::vector<Mat<double>> cols;
  conv3x3_forward(x, wt, b, &cols);
  Mat<double> gw = Mat<double>::Zero(3, 18), gb = Mat<double>::Zero(3, 1);
  const auto dx = conv3x3_backward(dy, cols, wt, 2, gw, gb, true);

  auto inner = [&](const Tensor4<double>& xx, const Mat<double>& ww) {
    return naive_conv(xx, ww, Vec<double>::Zero(3)).data.dot(dy.data);
  };
  // inner() is linear in x: inner(x) = <dx, x>.
  CHECK(dx.data.dot(x.data) == doctest::Approx(inner(x, wt)).epsilon(1e-12));
  CHECK((gw.array() * wt.array()).sum() == doctest::Approx(inner(x, wt)).epsilon(1e-12));
  double bias_sum = 0;
  for (int k = 0; k < 2; ++k)
    for (int f = 0; f < 3; ++f) bias_sum += Eigen::Map<const Vec<double>>(dy.channel(k, f), dy.plane()).sum();
  CHECK(gb.sum() == doctest::Approx(bias_sum));
}

TEST_CASE("batchnorm train mode normalizes each channel") {
  Engine g(3);
  auto x = random_tensor(4, 3, 5, 5, g);
  for (auto& v : x.data) v = 3 * v + 2;
  const Mat<double> gamma = Mat<double>::Ones(3, 1), beta = Mat<double>::Zero(3, 1);
  const Vec<double> rm = Vec<double>::Zero(3), rv = Vec<double>::Ones(3);
  BatchNormCache<double> cache;
  const auto y = batchnorm_forward(x, gamma, beta, rm, rv, NormMode::Train, &cache);
  for (int c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (int k = 0; k < 4; ++k)
      for (int p = 0; p < 25; ++p) {
        s += y.channel(k, c)[p];
        ss += y.channel(k, c)[p] * y.channel(k, c)[p];
      }
    CHECK(s / 100 == doctest::Approx(0).scale(1));
    CHECK(ss / 100 == doctest::Approx(1).epsilon(1e-4));  // variance eps 1e-5
  }

  // Eval mode with the running statistics set to the batch statistics reproduces Train mode.
  const auto y_eval = batchnorm_forward(x, gamma, beta, cache.batch_mean, cache.batch_var, NormMode::Eval,
                                        static_cast<BatchNormCache<double>*>(nullptr));
  CHECK((y_eval.data - y.data).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("maxpool picks the largest entry and routes the gradient there") {
  Tensor4<double> x(1, 1, 2, 4);
  x.data << 1, 5, 2, 2, 3, 4, 9, 2;
  std::vector<int> arg;
  const auto y = maxpool2_forward(x, &arg);
  CHECK(y.data(0) == 5);
  CHECK(y.data(1) == 9);
  Tensor4<double> dy(1, 1, 1, 2);
  dy.data << 1, 2;
  const auto dx = maxpool2_backward(dy, arg, 1, 1, 2, 4);
  Vec<double> expected(8);
  expected << 0, 1, 0, 0, 0, 0, 2, 0;
  CHECK(dx.data == expected);

  Tensor4<double> tie(1, 1, 2, 2);
  tie.data.setConstant(7);
  maxpool2_forward(tie, &arg);
  CHECK(arg[0] == 0);  // first element wins a tie
  CHECK_THROWS_AS(maxpool2_forward(Tensor4<double>(1, 1, 1, 4), &arg), ConfigError);
}

TEST_CASE("flatten and unflatten are inverse") {
  Engine g(4);
  const auto x = random_tensor(3, 2, 3, 4, g);
  const Mat<double> rows = flatten(x);
  CHECK(rows.rows() == 3);
  CHECK(rows.cols() == 24);
  CHECK(rows(1, 5) == x.channel(1, 0)[5]);
  CHECK(unflatten(rows, 2, 3, 4).data == x.data);
}

TEST_CASE("param layout is contiguous and in registration order") {
  ParamLayout layout;
  layout.add("a", 2, 3);
  layout.add("b", 4, 1);
  CHECK(layout.total() == 10);
  CHECK(layout[1].offset == 6);
  Vec<double> flat = Vec<double>::LinSpaced(10, 0, 9);
  CHECK(layout.view(flat, 1)(2, 0) == 8);
  CHECK(layout.view(flat, 0)(1, 2) == 5);  // column-major block
}

TEST_CASE("running statistics follow the momentum update with unbiased variance") {
  EmbeddingNet<double> net({{1, 4, 4, 1, 2, true}, 0}, 5);
  Engine g(6);
  const auto x = random_tensor(2, 1, 4, 4, g);
  typename EmbeddingNet<double>::Cache cache;
  net.forward(x, NormMode::Train, &cache);
  const auto& bn = cache.stack[0].bn;
  net.update_running_stats(cache, 0.1);
  for (int c = 0; c < 2; ++c) {
    CHECK(net.running_mean()[c] == doctest::Approx(0.1 * bn.batch_mean[c]));
    CHECK(net.running_var()[c] == doctest::Approx(0.9 + 0.1 * bn.batch_var[c] * 32.0 / 31.0));
  }
}

#pragma once

// Few-shot classification heads over embeddings. Rows of every matrix are
// samples: support/query embeddings are (count x D), prototypes (N x D),
// probabilities (queries x N).

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

#include "ma3/errors.hpp"
#include "ma3/layers.hpp"

namespace ma3 {

enum class HeadKind { Euclidean, Cosine };

template <typename Scalar>
struct HeadResult {
  Scalar loss = 0;
  Mat<Scalar> probs;
  Mat<Scalar> grad_query;       // d loss / d query embeddings
  Mat<Scalar> grad_prototypes;  // d loss / d prototypes
};

/// Class means of the support embeddings; every class 0..n_way-1 must be present.
template <typename Scalar>
Mat<Scalar> compute_prototypes(const Mat<Scalar>& support, std::span<const int> labels, int n_way) {
  if (static_cast<Eigen::Index>(labels.size()) != support.rows())
    throw ContractError("compute_prototypes: label count does not match support rows");
  Mat<Scalar> protos = Mat<Scalar>::Zero(n_way, support.cols());
  std::vector<int> counts(n_way, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int k = labels[i];
    if (k < 0 || k >= n_way) throw ContractError("compute_prototypes: label out of range");
    protos.row(k) += support.row(static_cast<Eigen::Index>(i));
    ++counts[k];
  }
  for (int k = 0; k < n_way; ++k) {
    if (counts[k] == 0)
      throw ContractError("compute_prototypes: class " + std::to_string(k) + " has no support example");
    protos.row(k) /= Scalar(counts[k]);
  }
  return protos;
}

/// Chain rule through the class mean: d loss / d support embeddings.
template <typename Scalar>
Mat<Scalar> prototypes_backward(const Mat<Scalar>& grad_prototypes, std::span<const int> labels) {
  const int n_way = static_cast<int>(grad_prototypes.rows());
  std::vector<int> counts(n_way, 0);
  for (int k : labels) ++counts[k];
  Mat<Scalar> grad(static_cast<Eigen::Index>(labels.size()), grad_prototypes.cols());
  for (std::size_t i = 0; i < labels.size(); ++i)
    grad.row(static_cast<Eigen::Index>(i)) = grad_prototypes.row(labels[i]) / Scalar(counts[labels[i]]);
  return grad;
}

namespace detail {

// Softmax cross-entropy averaged over rows; returns loss, fills probs and d loss / d logits.
template <typename Scalar>
Scalar softmax_xent(const Mat<Scalar>& logits, std::span<const int> labels, Mat<Scalar>& probs,
                    Mat<Scalar>& grad_logits) {
  const Eigen::Index m = logits.rows();
  if (static_cast<Eigen::Index>(labels.size()) != m)
    throw ContractError("classification head: label count does not match query rows");
  probs.resize(m, logits.cols());
  grad_logits.resize(m, logits.cols());
  Scalar loss = 0;
  for (Eigen::Index q = 0; q < m; ++q) {
    const int y = labels[static_cast<std::size_t>(q)];
    if (y < 0 || y >= logits.cols()) throw ContractError("classification head: label out of range");
    const Scalar mx = logits.row(q).maxCoeff();
    const auto shifted = (logits.row(q).array() - mx).eval();
    const Scalar lse = std::log(shifted.exp().sum());
    probs.row(q) = (shifted - lse).exp().matrix();
    loss += lse - shifted(y);
    grad_logits.row(q) = probs.row(q);
    grad_logits(q, y) -= Scalar(1);
  }
  grad_logits /= Scalar(m);
  return loss / Scalar(m);
}

}  // namespace detail

/// Prototypical-network head: logits are negative squared Euclidean distances.
template <typename Scalar>
HeadResult<Scalar> protonet_loss(const Mat<Scalar>& query, std::span<const int> labels,
                                 const Mat<Scalar>& prototypes) {
  if (prototypes.rows() == 0) throw ContractError("protonet_loss: no prototypes");
  const Eigen::Index m = query.rows(), n = prototypes.rows();
  Mat<Scalar> logits(m, n);
  for (Eigen::Index q = 0; q < m; ++q)
    for (Eigen::Index k = 0; k < n; ++k) logits(q, k) = -(query.row(q) - prototypes.row(k)).squaredNorm();

  HeadResult<Scalar> r;
  Mat<Scalar> g;
  r.loss = detail::softmax_xent(logits, labels, r.probs, g);
  r.grad_query = Mat<Scalar>::Zero(m, query.cols());
  r.grad_prototypes = Mat<Scalar>::Zero(n, query.cols());
  for (Eigen::Index q = 0; q < m; ++q) {
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto diff = (query.row(q) - prototypes.row(k)).eval();
      r.grad_query.row(q) -= Scalar(2) * g(q, k) * diff;
      r.grad_prototypes.row(k) += Scalar(2) * g(q, k) * diff;
    }
  }
  return r;
}

inline constexpr double kCosineNormFloor = 1e-8;

/// Cosine head: logits are temperature * cos(query, prototype), norms floored at 1e-8.
template <typename Scalar>
HeadResult<Scalar> cosine_loss(const Mat<Scalar>& query, std::span<const int> labels,
                               const Mat<Scalar>& prototypes, Scalar temperature) {
  if (prototypes.rows() == 0) throw ContractError("cosine_loss: no prototypes");
  const Eigen::Index m = query.rows(), n = prototypes.rows();
  const Scalar floor = Scalar(kCosineNormFloor);
  const Vec<Scalar> qn = query.rowwise().norm().cwiseMax(floor);
  const Vec<Scalar> pn = prototypes.rowwise().norm().cwiseMax(floor);
  const Mat<Scalar> qhat = qn.cwiseInverse().asDiagonal() * query;
  const Mat<Scalar> phat = pn.cwiseInverse().asDiagonal() * prototypes;
  const Mat<Scalar> cosines = qhat * phat.transpose();

  HeadResult<Scalar> r;
  Mat<Scalar> g;
  r.loss = detail::softmax_xent<Scalar>(temperature * cosines, labels, r.probs, g);
  const Mat<Scalar> gc = temperature * g;  // d loss / d cosines

  // d cos / d x for x = a / max(|a|, floor): (b_hat - cos * a_hat) / |a| when the floor is
  // inactive, b_hat / floor otherwise.
  r.grad_query = Mat<Scalar>::Zero(m, query.cols());
  r.grad_prototypes = Mat<Scalar>::Zero(n, query.cols());
  for (Eigen::Index q = 0; q < m; ++q) {
    const bool q_free = query.row(q).norm() > floor;
    for (Eigen::Index k = 0; k < n; ++k) {
      const bool p_free = prototypes.row(k).norm() > floor;
      const Scalar c = cosines(q, k);
      r.grad_query.row(q) +=
          gc(q, k) * (q_free ? (phat.row(k) - c * qhat.row(q)).eval() : phat.row(k).eval()) / qn(q);
      r.grad_prototypes.row(k) +=
          gc(q, k) * (p_free ? (qhat.row(q) - c * phat.row(k)).eval() : qhat.row(q).eval()) / pn(k);
    }
  }
  return r;
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
template <typename Scalar>
double episode_accuracy(const Mat<Scalar>& probs, std::span<const int> labels) {
  if (probs.rows() == 0) return 0.0;
  int correct = 0;
  for (Eigen::Index q = 0; q < probs.rows(); ++q) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < probs.cols(); ++k)
      if (probs(q, k) > probs(q, best)) best = k;
    if (best == labels[static_cast<std::size_t>(q)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(probs.rows());
}

}  // namespace ma3

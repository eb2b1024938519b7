#pragma once

// The two networks of the min-max game.
//
// EmbeddingNet (the few-shot learner's feature extractor):
//   B x [conv3x3(F) -> batchnorm -> ReLU -> maxpool2] -> flatten [-> linear(h_dim)]
// AdversaryNet (the warp-parameter predictor):
//   2 x [conv3x3(16) -> ReLU -> maxpool2] -> global average pool -> linear(4)
//
// Both keep their trainable parameters in one flat vector; forward passes are
// const and deterministic, backward passes accumulate into a caller-owned
// gradient vector of the same layout.

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "ma3/errors.hpp"
#include "ma3/layers.hpp"
#include "ma3/rng.hpp"

namespace ma3 {

struct ConvStackArch {
  int in_channels = 1;
  int height = 28;
  int width = 28;
  int blocks = 4;
  int filters = 64;
  bool batch_norm = true;

  int out_height() const { return height >> blocks; }
  int out_width() const { return width >> blocks; }

  void validate() const {
    if (blocks < 1 || filters < 1 || in_channels < 1)
      throw ConfigError("conv stack: blocks, filters and channels must be positive");
    if (out_height() < 1 || out_width() < 1) {
      throw ConfigError("conv stack: " + std::to_string(height) + "x" + std::to_string(width) +
                        " input is too small for " + std::to_string(blocks) + " pooling stages");
    }
  }
};

/// Conv blocks shared by both networks; registers its parameters in a layout.
template <typename Scalar>
class ConvStack {
 public:
  struct BlockCache {
    Tensor4<Scalar> input;
    std::vector<Mat<Scalar>> cols;
    BatchNormCache<Scalar> bn;
    Tensor4<Scalar> pre_relu;
    std::vector<int> argmax;
  };
  using Cache = std::vector<BlockCache>;

  ConvStack() = default;
  ConvStack(const ConvStackArch& arch, ParamLayout& layout) : arch_(arch) {
    arch_.validate();
    int c = arch.in_channels;
    for (int b = 0; b < arch.blocks; ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      Ids id;
      id.weight = layout.add(p + "conv.weight", arch.filters, Eigen::Index(c) * 9);
      id.bias = layout.add(p + "conv.bias", arch.filters, 1);
      if (arch.batch_norm) {
        id.gamma = layout.add(p + "bn.gamma", arch.filters, 1);
        id.beta = layout.add(p + "bn.beta", arch.filters, 1);
      }
      ids_.push_back(id);
      c = arch.filters;
    }
  }

  const ConvStackArch& arch() const { return arch_; }

  void init(Vec<Scalar>& params, const ParamLayout& layout, Engine& g) const {
    int c = arch_.in_channels;
    for (const auto& id : ids_) {
      he_uniform(layout.view(params, id.weight), Eigen::Index(c) * 9, g);
      layout.view(params, id.bias).setZero();
      if (arch_.batch_norm) {
        layout.view(params, id.gamma).setOnes();
        layout.view(params, id.beta).setZero();
      }
      c = arch_.filters;
    }
  }

  /// running_mean/var hold blocks * filters entries (ignored without batch norm).
  Tensor4<Scalar> forward(Tensor4<Scalar> x, const Vec<Scalar>& params, const ParamLayout& layout,
                          const Vec<Scalar>& running_mean, const Vec<Scalar>& running_var,
                          NormMode mode, Cache* cache) const {
    if (x.c != arch_.in_channels || x.h != arch_.height || x.w != arch_.width) {
      throw ConfigError("conv stack: expected " + std::to_string(arch_.in_channels) + "x" +
                        std::to_string(arch_.height) + "x" + std::to_string(arch_.width) +
                        " input, got " + std::to_string(x.c) + "x" + std::to_string(x.h) + "x" +
                        std::to_string(x.w));
    }
    if (cache) cache->assign(ids_.size(), BlockCache{});
    const Eigen::Index f = arch_.filters;
    for (std::size_t b = 0; b < ids_.size(); ++b) {
      const auto& id = ids_[b];
      BlockCache* bc = cache ? &(*cache)[b] : nullptr;
      Tensor4<Scalar> y = conv3x3_forward(x, layout.view(params, id.weight),
                                          layout.view(params, id.bias), bc ? &bc->cols : nullptr);
      if (arch_.batch_norm) {
        const Vec<Scalar> rm = running_mean.segment(Eigen::Index(b) * f, f);
        const Vec<Scalar> rv = running_var.segment(Eigen::Index(b) * f, f);
        y = batchnorm_forward(y, layout.view(params, id.gamma), layout.view(params, id.beta), rm, rv,
                              mode, bc ? &bc->bn : nullptr);
      }
      Tensor4<Scalar> a = relu_forward(y);
      Tensor4<Scalar> pooled = maxpool2_forward(a, bc ? &bc->argmax : nullptr);
      if (bc) {
        bc->input = std::move(x);
        bc->pre_relu = std::move(y);
      }
      x = std::move(pooled);
    }
    return x;
  }

  Tensor4<Scalar> backward(const Cache& cache, Tensor4<Scalar> dy, const Vec<Scalar>& params,
                           const ParamLayout& layout, Vec<Scalar>& grad, bool want_input) const {
    for (std::size_t bi = ids_.size(); bi-- > 0;) {
      const auto& id = ids_[bi];
      const auto& bc = cache[bi];
      const auto& pre = bc.pre_relu;
      Tensor4<Scalar> d = maxpool2_backward(dy, bc.argmax, pre.n, pre.c, pre.h, pre.w);
      d = relu_backward(std::move(d), pre);
      if (arch_.batch_norm) {
        d = batchnorm_backward(d, bc.bn, layout.view(params, id.gamma), layout.view(grad, id.gamma),
                               layout.view(grad, id.beta));
      }
      const bool need_dx = want_input || bi > 0;
      dy = conv3x3_backward(d, bc.cols, layout.view(params, id.weight), bc.input.c,
                            layout.view(grad, id.weight), layout.view(grad, id.bias), need_dx);
    }
    return dy;
  }

  /// Exponential update of running statistics from a Train-mode cache (unbiased variance).
  void update_running_stats(const Cache& cache, Vec<Scalar>& running_mean, Vec<Scalar>& running_var,
                            double momentum) const {
    if (!arch_.batch_norm) return;
    const Eigen::Index f = arch_.filters;
    const Scalar m = Scalar(momentum);
    for (std::size_t b = 0; b < cache.size(); ++b) {
      const auto& bn = cache[b].bn;
      if (bn.mode != NormMode::Train) continue;
      const Tensor4<Scalar>& x = bn.xhat;
      const Scalar count = Scalar(x.plane() * x.n);
      const Scalar unbias = count > 1 ? count / (count - 1) : Scalar(1);
      auto rm = running_mean.segment(Eigen::Index(b) * f, f);
      auto rv = running_var.segment(Eigen::Index(b) * f, f);
      rm = (1 - m) * rm + m * bn.batch_mean;
      rv = (1 - m) * rv + m * unbias * bn.batch_var;
    }
  }

 private:
  struct Ids {
    std::size_t weight = 0, bias = 0, gamma = 0, beta = 0;
  };
  ConvStackArch arch_;
  std::vector<Ids> ids_;
};

// ---------------------------------------------------------------------------

struct EmbeddingArch {
  ConvStackArch stack;
  int h_dim = 0;  // 0: use the flattened conv output as the embedding

  int flat_dim() const { return stack.filters * stack.out_height() * stack.out_width(); }
  bool has_projection() const { return h_dim > 0 && h_dim != flat_dim(); }
  int embedding_dim() const { return has_projection() ? h_dim : flat_dim(); }
};

template <typename Scalar>
class EmbeddingNet {
 public:
  struct Cache {
    typename ConvStack<Scalar>::Cache stack;
    Tensor4<Scalar> features;  // conv output
    Mat<Scalar> flat;
  };

  EmbeddingNet() = default;
  EmbeddingNet(const EmbeddingArch& arch, std::uint64_t seed) : arch_(arch) {
    build();
    Engine g(seed);
    stack_.init(params_, layout_, g);
    if (arch_.has_projection()) {
      he_uniform(layout_.view(params_, proj_w_), arch_.flat_dim(), g);
      layout_.view(params_, proj_b_).setZero();
    }
  }

  const EmbeddingArch& arch() const { return arch_; }
  int embedding_dim() const { return arch_.embedding_dim(); }
  const ParamLayout& layout() const { return layout_; }
  Vec<Scalar>& params() { return params_; }
  const Vec<Scalar>& params() const { return params_; }
  Vec<Scalar>& running_mean() { return running_mean_; }
  const Vec<Scalar>& running_mean() const { return running_mean_; }
  Vec<Scalar>& running_var() { return running_var_; }
  const Vec<Scalar>& running_var() const { return running_var_; }

  /// Rows of the result are the embeddings of the images in `x`.
  Mat<Scalar> forward(const Tensor4<Scalar>& x, NormMode mode, Cache* cache = nullptr) const {
    Tensor4<Scalar> feat = stack_.forward(x, params_, layout_, running_mean_, running_var_, mode,
                                          cache ? &cache->stack : nullptr);
    Mat<Scalar> flat = flatten(feat);
    Mat<Scalar> out = arch_.has_projection()
                          ? linear_forward(flat, layout_.view(params_, proj_w_), layout_.view(params_, proj_b_))
                          : flat;
    if (cache) {
      cache->features = std::move(feat);
      cache->flat = std::move(flat);
    }
    return out;
  }

  /// Accumulates d loss / d params into `grad`; returns d loss / d input.
  Tensor4<Scalar> backward(const Cache& cache, const Mat<Scalar>& d_embed, Vec<Scalar>& grad,
                           bool want_input = true) const {
    Mat<Scalar> d_flat = arch_.has_projection()
                             ? linear_backward(d_embed, cache.flat, layout_.view(params_, proj_w_),
                                               layout_.view(grad, proj_w_), layout_.view(grad, proj_b_))
                             : d_embed;
    const auto& f = cache.features;
    Tensor4<Scalar> d_feat = unflatten(d_flat, f.c, f.h, f.w);
    return stack_.backward(cache.stack, std::move(d_feat), params_, layout_, grad, want_input);
  }

  void update_running_stats(const Cache& cache, double momentum = 0.1) {
    stack_.update_running_stats(cache.stack, running_mean_, running_var_, momentum);
  }

  template <typename Other>
  EmbeddingNet<Other> cast() const {
    EmbeddingNet<Other> out;
    out.arch_ = arch_;
    out.build();
    out.params_ = params_.template cast<Other>();
    out.running_mean_ = running_mean_.template cast<Other>();
    out.running_var_ = running_var_.template cast<Other>();
    return out;
  }

 private:
  template <typename>
  friend class EmbeddingNet;

  void build() {
    layout_ = ParamLayout{};
    stack_ = ConvStack<Scalar>(arch_.stack, layout_);
    if (arch_.has_projection()) {
      proj_w_ = layout_.add("proj.weight", arch_.h_dim, arch_.flat_dim());
      proj_b_ = layout_.add("proj.bias", arch_.h_dim, 1);
    }
    params_ = Vec<Scalar>::Zero(layout_.total());
    const Eigen::Index stats = Eigen::Index(arch_.stack.blocks) * arch_.stack.filters;
    running_mean_ = Vec<Scalar>::Zero(stats);
    running_var_ = Vec<Scalar>::Ones(stats);
  }

  EmbeddingArch arch_;
  ParamLayout layout_;
  ConvStack<Scalar> stack_;
  std::size_t proj_w_ = 0, proj_b_ = 0;
  Vec<Scalar> params_;
  Vec<Scalar> running_mean_;
  Vec<Scalar> running_var_;
};

// ---------------------------------------------------------------------------

struct AdversaryArch {
  ConvStackArch stack{1, 28, 28, 2, 16, false};
  int outputs = 4;  // 4: (theta, s, px, py); 6: free affine deviations
};

template <typename Scalar>
class AdversaryNet {
 public:
  struct Cache {
    typename ConvStack<Scalar>::Cache stack;
    Tensor4<Scalar> features;
    Mat<Scalar> pooled;  // N x F
  };

  AdversaryNet() = default;
  /// The output layer starts at zero so the untrained adversary predicts the identity warp.
  AdversaryNet(const AdversaryArch& arch, std::uint64_t seed) : arch_(arch) {
    build();
    Engine g(seed);
    stack_.init(params_, layout_, g);
  }

  const AdversaryArch& arch() const { return arch_; }
  const ParamLayout& layout() const { return layout_; }
  Vec<Scalar>& params() { return params_; }
  const Vec<Scalar>& params() const { return params_; }

  int outputs() const { return arch_.outputs; }

  /// N x outputs raw (pre-tanh) values.
  Mat<Scalar> forward(const Tensor4<Scalar>& x, Cache* cache = nullptr) const {
    static const Vec<Scalar> none;
    Tensor4<Scalar> feat =
        stack_.forward(x, params_, layout_, none, none, NormMode::Eval, cache ? &cache->stack : nullptr);
    Mat<Scalar> pooled(feat.n, feat.c);
    for (int k = 0; k < feat.n; ++k) pooled.row(k) = feat.item(k).colwise().mean();
    Mat<Scalar> out = linear_forward(pooled, layout_.view(params_, head_w_), layout_.view(params_, head_b_));
    if (cache) {
      cache->features = std::move(feat);
      cache->pooled = std::move(pooled);
    }
    return out;
  }

  /// Accumulates d objective / d params into `grad`.
  void backward(const Cache& cache, const Mat<Scalar>& d_raw, Vec<Scalar>& grad) const {
    const Mat<Scalar> d_pooled = linear_backward(d_raw, cache.pooled, layout_.view(params_, head_w_),
                                                 layout_.view(grad, head_w_), layout_.view(grad, head_b_));
    const auto& f = cache.features;
    Tensor4<Scalar> d_feat(f.n, f.c, f.h, f.w);
    const Scalar inv_plane = Scalar(1) / Scalar(f.plane());
    for (int k = 0; k < f.n; ++k)
      d_feat.item(k).rowwise() = d_pooled.row(k) * inv_plane;
    stack_.backward(cache.stack, std::move(d_feat), params_, layout_, grad, false);
  }

  template <typename Other>
  AdversaryNet<Other> cast() const {
    AdversaryNet<Other> out;
    out.arch_ = arch_;
    out.build();
    out.params_ = params_.template cast<Other>();
    return out;
  }

 private:
  template <typename>
  friend class AdversaryNet;

  void build() {
    arch_.stack.batch_norm = false;
    if (arch_.outputs != 4 && arch_.outputs != 6) throw ConfigError("adversary: outputs must be 4 or 6");
    layout_ = ParamLayout{};
    stack_ = ConvStack<Scalar>(arch_.stack, layout_);
    head_w_ = layout_.add("head.weight", arch_.outputs, arch_.stack.filters);
    head_b_ = layout_.add("head.bias", arch_.outputs, 1);
    params_ = Vec<Scalar>::Zero(layout_.total());
  }

  AdversaryArch arch_;
  ParamLayout layout_;
  ConvStack<Scalar> stack_;
  std::size_t head_w_ = 0, head_b_ = 0;
  Vec<Scalar> params_;
};

}  // namespace ma3

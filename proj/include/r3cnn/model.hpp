#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "r3cnn/geometry.hpp"
#include "r3cnn/nn.hpp"
#include "r3cnn/rng.hpp"
#include "r3cnn/tensor.hpp"

namespace r3cnn {

struct AnchorConfig {
  std::vector<double> base_sizes{16, 32, 64};
  std::vector<double> aspect_ratios{0.5, 1.0, 2.0};
  std::size_t stride = 8;

  std::size_t anchors_per_cell() const {
    return base_sizes.size() * aspect_ratios.size();
  }
};

struct ModelConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> backbone_channels{32, 64, 64, 64};
  std::vector<std::size_t> backbone_strides{2, 2, 2, 1};
  std::size_t num_classes = 3;  // foreground classes; logits are C+1
  std::size_t head_hidden = 256;
  std::size_t roi_size = 7;
  std::size_t mask_roi_size = 14;
  std::size_t mask_out_size = 28;
  std::size_t mask_channels = 16;
  std::size_t num_heads = 1;  // 1 = recursive single head; 3 = cascade comparator
  AnchorConfig anchors;
  std::size_t rpn_k_pre = 1000;
  std::size_t rpn_k_post = 64;
  double rpn_nms_threshold = 0.7;

  std::size_t feat_channels() const { return backbone_channels.back(); }
  std::size_t total_stride() const {
    return std::accumulate(backbone_strides.begin(), backbone_strides.end(),
                           std::size_t{1}, std::multiplies<>());
  }
};

template <typename T>
struct FeatureMap {
  Tensor<T> values;  // [C, H', W']
  std::size_t stride = 1;
};

// ---------------------------------------------------------------------------
// Backbone: small conv stack, overall stride 8, single feature level.
// ---------------------------------------------------------------------------

template <typename T>
struct BackboneCtx {
  std::vector<Tensor<T>> inputs;  // input of each conv
  std::vector<Tensor<T>> pre;     // pre-relu output of each conv
};

template <typename T>
class Backbone {
 public:
  Backbone() = default;
  explicit Backbone(const ModelConfig& cfg) : cfg_(cfg) {
    std::size_t prev = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
      convs_.emplace_back(prev, cfg.backbone_channels[i], 3,
                          cfg.backbone_strides[i], 1);
      prev = cfg.backbone_channels[i];
    }
  }

  void init(Rng& rng) {
    for (auto& c : convs_) c.init(rng);
  }

  FeatureMap<T> forward(const Tensor<T>& image, BackboneCtx<T>* ctx) const {
    if (image.ndim() != 3 || image.dim(0) != cfg_.in_channels) {
      throw std::invalid_argument("backbone: expected [" +
                                  std::to_string(cfg_.in_channels) +
                                  "xHxW] image, got " + image.shape_str());
    }
    const std::size_t s = cfg_.total_stride();
    if (image.dim(1) % s != 0 || image.dim(2) % s != 0) {
      throw std::invalid_argument(
          "backbone: image dims must be divisible by stride " +
          std::to_string(s) + ", got " + image.shape_str());
    }
    Tensor<T> x = image;
    for (const auto& c : convs_) {
      if (ctx) ctx->inputs.push_back(x);
      Tensor<T> z = c.forward(x);
      if (ctx) ctx->pre.push_back(z);
      x = relu(z);
    }
    return FeatureMap<T>{std::move(x), s};
  }

  void backward(const BackboneCtx<T>& ctx, const Tensor<T>& dfeat) {
    Tensor<T> d = dfeat;
    for (std::size_t i = convs_.size(); i-- > 0;) {
      d = relu_backward(ctx.pre[i], d);
      d = convs_[i].backward(ctx.inputs[i], d);
    }
  }

  void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
    for (std::size_t i = 0; i < convs_.size(); ++i)
      convs_[i].visit_params(prefix + ".conv" + std::to_string(i + 1), fn);
  }

 private:
  ModelConfig cfg_;
  std::vector<Conv2d<T>> convs_;
};

// ---------------------------------------------------------------------------
// Anchors and RPN
// ---------------------------------------------------------------------------

// One anchor per (location, size, ratio). Location-major ordering:
// anchor index = (i * W' + j) * A + (size_idx * n_ratios + ratio_idx).
inline std::vector<Box> generate_anchors(const AnchorConfig& cfg,
                                         std::size_t feat_h,
                                         std::size_t feat_w) {
  std::vector<Box> anchors;
  anchors.reserve(feat_h * feat_w * cfg.anchors_per_cell());
  for (std::size_t i = 0; i < feat_h; ++i) {
    for (std::size_t j = 0; j < feat_w; ++j) {
      const double cx = (static_cast<double>(j) + 0.5) * cfg.stride;
      const double cy = (static_cast<double>(i) + 0.5) * cfg.stride;
      for (double s : cfg.base_sizes) {
        for (double r : cfg.aspect_ratios) {
          const double w = s / std::sqrt(r);
          const double h = s * std::sqrt(r);
          anchors.push_back(
              Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
      }
    }
  }
  return anchors;
}

template <typename T>
struct RpnOut {
  std::vector<T> objectness;   // one logit per anchor
  std::vector<Delta4> deltas;  // one delta per anchor
};

template <typename T>
struct RpnCtx {
  Tensor<T> feat;       // input feature map
  Tensor<T> hidden_pre; // pre-relu conv output
  Tensor<T> hidden;
  Tensor<T> cls;        // [A, H, W]
  Tensor<T> reg;        // [4A, H, W]
};

template <typename T>
class RpnHead {
 public:
  RpnHead() = default;
  explicit RpnHead(const ModelConfig& cfg)
      : num_anchors_(cfg.anchors.anchors_per_cell()),
        conv_(cfg.feat_channels(), cfg.feat_channels(), 3, 1, 1),
        cls_(cfg.feat_channels(), num_anchors_, 1, 1, 0),
        reg_(cfg.feat_channels(), num_anchors_ * 4, 1, 1, 0) {}

  void init(Rng& rng) {
    conv_.init(rng);
    cls_.init(rng);
    reg_.init(rng);
  }

  RpnOut<T> forward(const FeatureMap<T>& fmap, RpnCtx<T>* ctx) const {
    const std::size_t H = fmap.values.dim(1), W = fmap.values.dim(2);
    Tensor<T> pre = conv_.forward(fmap.values);
    Tensor<T> hid = relu(pre);
    Tensor<T> cls = cls_.forward(hid);
    Tensor<T> reg = reg_.forward(hid);
    if (ctx) {
      ctx->feat = fmap.values;
      ctx->hidden_pre = pre;
      ctx->hidden = hid;
      ctx->cls = cls;
      ctx->reg = reg;
    }
    RpnOut<T> out;
    out.objectness.resize(H * W * num_anchors_);
    out.deltas.resize(H * W * num_anchors_);
    for (std::size_t a = 0; a < num_anchors_; ++a) {
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
          const std::size_t idx = (i * W + j) * num_anchors_ + a;
          out.objectness[idx] = cls[(a * H + i) * W + j];
          out.deltas[idx] = Delta4{
              static_cast<double>(reg[((a * 4 + 0) * H + i) * W + j]),
              static_cast<double>(reg[((a * 4 + 1) * H + i) * W + j]),
              static_cast<double>(reg[((a * 4 + 2) * H + i) * W + j]),
              static_cast<double>(reg[((a * 4 + 3) * H + i) * W + j])};
        }
      }
    }
    return out;
  }

  // dcls/dreg are laid out like ctx.cls / ctx.reg. Returns dL/dfeat.
  Tensor<T> backward(const RpnCtx<T>& ctx, const Tensor<T>& dcls,
                     const Tensor<T>& dreg) {
    Tensor<T> dhid = cls_.backward(ctx.hidden, dcls);
    Tensor<T> dhid2 = reg_.backward(ctx.hidden, dreg);
    for (std::size_t i = 0; i < dhid.size(); ++i) dhid[i] += dhid2[i];
    Tensor<T> dpre = relu_backward(ctx.hidden_pre, dhid);
    return conv_.backward(ctx.feat, dpre);
  }

  std::size_t anchors_per_cell() const { return num_anchors_; }

  void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
    conv_.visit_params(prefix + ".conv", fn);
    cls_.visit_params(prefix + ".cls", fn);
    reg_.visit_params(prefix + ".reg", fn);
  }

 private:
  std::size_t num_anchors_ = 0;
  Conv2d<T> conv_, cls_, reg_;
};

// Top-k_pre by objectness -> decode -> clip -> NMS -> top-k_post.
// Boxes with either side < 1 px are discarded. Ties broken by anchor index.
template <typename T>
inline std::vector<Box> rpn_propose(const std::vector<T>& objectness,
                                    const std::vector<Delta4>& deltas,
                                    const std::vector<Box>& anchors,
                                    double image_w, double image_h,
                                    std::size_t k_pre, std::size_t k_post,
                                    double nms_threshold) {
  if (objectness.size() != anchors.size() || deltas.size() != anchors.size()) {
    throw std::invalid_argument(
        "rpn_propose: objectness/deltas/anchors length mismatch: " +
        std::to_string(objectness.size()) + "/" +
        std::to_string(deltas.size()) + "/" + std::to_string(anchors.size()));
  }
  std::vector<std::size_t> order(anchors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (objectness[a] != objectness[b]) return objectness[a] > objectness[b];
    return a < b;
  });
  if (order.size() > k_pre) order.resize(k_pre);
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (std::size_t idx : order) {
    Box b = decode_deltas(anchors[idx], deltas[idx], image_w, image_h);
    if (b.width() < 1.0 || b.height() < 1.0) continue;
    boxes.push_back(b);
    scores.push_back(static_cast<double>(objectness[idx]));
  }
  auto kept = nms_class_agnostic(boxes, scores, nms_threshold);
  if (kept.size() > k_post) kept.resize(k_post);
  std::vector<Box> out;
  out.reserve(kept.size());
  for (std::size_t i : kept) out.push_back(boxes[i]);
  return out;
}

// ---------------------------------------------------------------------------
// RoIAlign: bilinear sampling, 2x2 sample points per output cell, averaged.
// Feature value (i, j) is treated as a sample at continuous feature
// coordinate (i, j); image point p maps to feature coordinate p/stride - 0.5.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline void bilinear_weights(double x, double y, std::size_t H, std::size_t W,
                             std::size_t idx[4], double w[4]) {
  x = std::clamp(x, 0.0, static_cast<double>(W - 1));
  y = std::clamp(y, 0.0, static_cast<double>(H - 1));
  const std::size_t x0 = static_cast<std::size_t>(x);
  const std::size_t y0 = static_cast<std::size_t>(y);
  const std::size_t x1 = std::min(x0 + 1, W - 1);
  const std::size_t y1 = std::min(y0 + 1, H - 1);
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  idx[0] = y0 * W + x0;
  idx[1] = y0 * W + x1;
  idx[2] = y1 * W + x0;
  idx[3] = y1 * W + x1;
  w[0] = (1 - fx) * (1 - fy);
  w[1] = fx * (1 - fy);
  w[2] = (1 - fx) * fy;
  w[3] = fx * fy;
}

}  // namespace detail

template <typename T>
inline Tensor<T> roi_align(const FeatureMap<T>& fmap,
                           const std::vector<Box>& boxes,
                           std::size_t out_size) {
  const std::size_t C = fmap.values.dim(0);
  const std::size_t H = fmap.values.dim(1);
  const std::size_t W = fmap.values.dim(2);
  const double inv_stride = 1.0 / static_cast<double>(fmap.stride);
  Tensor<T> pooled({boxes.size(), C, out_size, out_size});
  const T* src = fmap.values.ptr();
  for (std::size_t r = 0; r < boxes.size(); ++r) {
    const Box& b = boxes[r];
    if (!b.valid())
      throw std::invalid_argument("roi_align: invalid box at index " +
                                  std::to_string(r));
    const double bw = b.width() / static_cast<double>(out_size);
    const double bh = b.height() / static_cast<double>(out_size);
    for (std::size_t oy = 0; oy < out_size; ++oy) {
      for (std::size_t ox = 0; ox < out_size; ++ox) {
        std::size_t idx[4][4];
        double w[4][4];
        for (int s = 0; s < 4; ++s) {
          const double sx =
              b.x1 + (static_cast<double>(ox) + 0.25 + 0.5 * (s % 2)) * bw;
          const double sy =
              b.y1 + (static_cast<double>(oy) + 0.25 + 0.5 * (s / 2)) * bh;
          detail::bilinear_weights<T>(sx * inv_stride - 0.5,
                                      sy * inv_stride - 0.5, H, W, idx[s],
                                      w[s]);
        }
        for (std::size_t c = 0; c < C; ++c) {
          const T* plane = src + c * H * W;
          double acc = 0;
          for (int s = 0; s < 4; ++s)
            for (int t = 0; t < 4; ++t) acc += w[s][t] * plane[idx[s][t]];
          pooled[((r * C + c) * out_size + oy) * out_size + ox] =
              static_cast<T>(acc * 0.25);
        }
      }
    }
  }
  return pooled;
}

// Scatters pooled-feature gradients back onto the feature map (accumulates).
template <typename T>
inline void roi_align_backward(const FeatureMap<T>& fmap,
                               const std::vector<Box>& boxes,
                               std::size_t out_size, const Tensor<T>& dpooled,
                               Tensor<T>& dfeat) {
  const std::size_t C = fmap.values.dim(0);
  const std::size_t H = fmap.values.dim(1);
  const std::size_t W = fmap.values.dim(2);
  if (dfeat.shape != fmap.values.shape) {
    dfeat = Tensor<T>(fmap.values.shape);
  }
  const double inv_stride = 1.0 / static_cast<double>(fmap.stride);
  for (std::size_t r = 0; r < boxes.size(); ++r) {
    const Box& b = boxes[r];
    const double bw = b.width() / static_cast<double>(out_size);
    const double bh = b.height() / static_cast<double>(out_size);
    for (std::size_t oy = 0; oy < out_size; ++oy) {
      for (std::size_t ox = 0; ox < out_size; ++ox) {
        std::size_t idx[4][4];
        double w[4][4];
        for (int s = 0; s < 4; ++s) {
          const double sx =
              b.x1 + (static_cast<double>(ox) + 0.25 + 0.5 * (s % 2)) * bw;
          const double sy =
              b.y1 + (static_cast<double>(oy) + 0.25 + 0.5 * (s / 2)) * bh;
          detail::bilinear_weights<T>(sx * inv_stride - 0.5,
                                      sy * inv_stride - 0.5, H, W, idx[s],
                                      w[s]);
        }
        for (std::size_t c = 0; c < C; ++c) {
          T* plane = dfeat.ptr() + c * H * W;
          const T g =
              dpooled[((r * C + c) * out_size + oy) * out_size + ox] * T(0.25);
          for (int s = 0; s < 4; ++s)
            for (int t = 0; t < 4; ++t)
              plane[idx[s][t]] += static_cast<T>(w[s][t]) * g;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Detection head: classifier h and class-agnostic regressor f sharing two
// hidden fully-connected layers. One parameter set regardless of loop count.
// ---------------------------------------------------------------------------

template <typename T>
struct DetHeadCtx {
  Tensor<T> flat;    // [R, C*S*S]
  Tensor<T> h1_pre, h1, h2_pre, h2;
};

template <typename T>
struct DetHeadOut {
  Tensor<T> cls_logits;  // [R, num_classes+1]
  Tensor<T> deltas;      // [R, 4]
};

template <typename T>
class DetectionHead {
 public:
  DetectionHead() = default;
  explicit DetectionHead(const ModelConfig& cfg)
      : in_dim_(cfg.feat_channels() * cfg.roi_size * cfg.roi_size),
        hidden_(cfg.head_hidden),
        num_classes_(cfg.num_classes),
        fc1_(in_dim_, hidden_),
        fc2_(hidden_, hidden_),
        cls_(hidden_, cfg.num_classes + 1),
        reg_(hidden_, 4) {}

  void init(Rng& rng) {
    fc1_.init(rng);
    fc2_.init(rng);
    cls_.init(rng, 0.02);  // small init keeps initial logits near uniform
    reg_.init(rng, 0.02);
  }

  // pooled: [R, C, S, S]
  DetHeadOut<T> forward(const Tensor<T>& pooled, DetHeadCtx<T>* ctx) const {
    const std::size_t R = pooled.dim(0);
    Tensor<T> flat({R, in_dim_});
    if (pooled.size() != flat.size()) {
      throw std::invalid_argument("detection head: expected pooled [Rx" +
                                  std::to_string(in_dim_) + "] values, got " +
                                  pooled.shape_str());
    }
    flat.data = pooled.data;
    Tensor<T> h1p = fc1_.forward(flat);
    Tensor<T> h1 = relu(h1p);
    Tensor<T> h2p = fc2_.forward(h1);
    Tensor<T> h2 = relu(h2p);
    DetHeadOut<T> out{cls_.forward(h2), reg_.forward(h2)};
    if (ctx) {
      ctx->flat = std::move(flat);
      ctx->h1_pre = std::move(h1p);
      ctx->h1 = std::move(h1);
      ctx->h2_pre = std::move(h2p);
      ctx->h2 = std::move(h2);
    }
    return out;
  }

  // Returns dL/dpooled flattened as [R, C*S*S].
  Tensor<T> backward(const DetHeadCtx<T>& ctx, const Tensor<T>& dcls,
                     const Tensor<T>& dreg) {
    Tensor<T> dh2 = cls_.backward(ctx.h2, dcls);
    Tensor<T> dh2b = reg_.backward(ctx.h2, dreg);
    for (std::size_t i = 0; i < dh2.size(); ++i) dh2[i] += dh2b[i];
    Tensor<T> dh2p = relu_backward(ctx.h2_pre, dh2);
    Tensor<T> dh1 = fc2_.backward(ctx.h1, dh2p);
    Tensor<T> dh1p = relu_backward(ctx.h1_pre, dh1);
    return fc1_.backward(ctx.flat, dh1p);
  }

  void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
    fc1_.visit_params(prefix + ".fc1", fn);
    fc2_.visit_params(prefix + ".fc2", fn);
    cls_.visit_params(prefix + ".cls", fn);
    reg_.visit_params(prefix + ".reg", fn);
  }

 private:
  std::size_t in_dim_ = 0, hidden_ = 0, num_classes_ = 0;
  Linear<T> fc1_, fc2_, cls_, reg_;
};

// ---------------------------------------------------------------------------
// Mask head: small conv stack on 14x14 pooled features, 2x upsample,
// per-class 28x28 logits. Single parameter set shared across loops.
// ---------------------------------------------------------------------------

template <typename T>
struct MaskHeadCtx {
  // per-RoI caches
  std::vector<Tensor<T>> in, c1_pre, c1, c2_pre, c2, up_pre, up;
};

template <typename T>
class MaskHead {
 public:
  MaskHead() = default;
  explicit MaskHead(const ModelConfig& cfg)
      : num_classes_(cfg.num_classes),
        conv1_(cfg.feat_channels(), cfg.mask_channels, 3, 1, 1),
        conv2_(cfg.mask_channels, cfg.mask_channels, 3, 1, 1),
        up_(cfg.mask_channels, cfg.mask_channels),
        pred_(cfg.mask_channels, cfg.num_classes, 1, 1, 0) {}

  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    up_.init(rng);
    pred_.init(rng);
  }

  // pooled: [R, C, 14, 14] -> logits [R, num_classes, 28, 28]
  Tensor<T> forward(const Tensor<T>& pooled, MaskHeadCtx<T>* ctx) const {
    const std::size_t R = pooled.dim(0), C = pooled.dim(1);
    const std::size_t S = pooled.dim(2);
    Tensor<T> out({R, num_classes_, 2 * S, 2 * S});
    for (std::size_t r = 0; r < R; ++r) {
      Tensor<T> x({C, S, S});
      std::copy_n(pooled.ptr() + r * C * S * S, C * S * S, x.ptr());
      Tensor<T> c1p = conv1_.forward(x);
      Tensor<T> c1 = relu(c1p);
      Tensor<T> c2p = conv2_.forward(c1);
      Tensor<T> c2 = relu(c2p);
      Tensor<T> upp = up_.forward(c2);
      Tensor<T> up = relu(upp);
      Tensor<T> logits = pred_.forward(up);
      std::copy_n(logits.ptr(), logits.size(),
                  out.ptr() + r * logits.size());
      if (ctx) {
        ctx->in.push_back(std::move(x));
        ctx->c1_pre.push_back(std::move(c1p));
        ctx->c1.push_back(std::move(c1));
        ctx->c2_pre.push_back(std::move(c2p));
        ctx->c2.push_back(std::move(c2));
        ctx->up_pre.push_back(std::move(upp));
        ctx->up.push_back(std::move(up));
      }
    }
    return out;
  }

  // Returns dL/dpooled: [R, C, 14, 14].
  Tensor<T> backward(const MaskHeadCtx<T>& ctx, const Tensor<T>& dlogits) {
    const std::size_t R = ctx.in.size();
    const std::size_t C = ctx.in[0].dim(0), S = ctx.in[0].dim(1);
    Tensor<T> dpooled({R, C, S, S});
    const std::size_t per = dlogits.size() / R;
    for (std::size_t r = 0; r < R; ++r) {
      Tensor<T> dl({num_classes_, 2 * S, 2 * S});
      std::copy_n(dlogits.ptr() + r * per, per, dl.ptr());
      Tensor<T> dup = pred_.backward(ctx.up[r], dl);
      Tensor<T> dupp = relu_backward(ctx.up_pre[r], dup);
      Tensor<T> dc2 = up_.backward(ctx.c2[r], dupp);
      Tensor<T> dc2p = relu_backward(ctx.c2_pre[r], dc2);
      Tensor<T> dc1 = conv2_.backward(ctx.c1[r], dc2p);
      Tensor<T> dc1p = relu_backward(ctx.c1_pre[r], dc1);
      Tensor<T> dx = conv1_.backward(ctx.in[r], dc1p);
      std::copy_n(dx.ptr(), dx.size(), dpooled.ptr() + r * dx.size());
    }
    return dpooled;
  }

  void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
    conv1_.visit_params(prefix + ".conv1", fn);
    conv2_.visit_params(prefix + ".conv2", fn);
    up_.visit_params(prefix + ".up", fn);
    pred_.visit_params(prefix + ".pred", fn);
  }

 private:
  std::size_t num_classes_ = 0;
  Conv2d<T> conv1_, conv2_;
  ConvTranspose2x<T> up_;
  Conv2d<T> pred_;
};

// ---------------------------------------------------------------------------
// Full model container. num_heads > 1 builds the cascade comparator with
// distinct per-stage heads; the recursive model always has exactly one.
// ---------------------------------------------------------------------------

template <typename T>
class R3Cnn {
 public:
  R3Cnn() = default;
  explicit R3Cnn(const ModelConfig& cfg)
      : cfg_(cfg), backbone_(cfg), rpn_(cfg) {
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      det_heads_.emplace_back(cfg);
      mask_heads_.emplace_back(cfg);
    }
  }

  void init(Rng& rng) {
    backbone_.init(rng);
    rpn_.init(rng);
    for (auto& h : det_heads_) h.init(rng);
    for (auto& h : mask_heads_) h.init(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }
  RpnHead<T>& rpn() { return rpn_; }
  const RpnHead<T>& rpn() const { return rpn_; }
  // Head selection: the recursive model uses head(0) at every loop; the
  // cascade comparator uses head(min(t, H-1)).
  DetectionHead<T>& det_head(std::size_t loop = 0) {
    return det_heads_[std::min(loop, det_heads_.size() - 1)];
  }
  const DetectionHead<T>& det_head(std::size_t loop = 0) const {
    return det_heads_[std::min(loop, det_heads_.size() - 1)];
  }
  MaskHead<T>& mask_head(std::size_t loop = 0) {
    return mask_heads_[std::min(loop, mask_heads_.size() - 1)];
  }
  std::size_t num_heads() const { return det_heads_.size(); }

  void visit_params(const ParamVisitor<T>& fn) {
    backbone_.visit_params("backbone", fn);
    rpn_.visit_params("rpn", fn);
    for (std::size_t h = 0; h < det_heads_.size(); ++h)
      det_heads_[h].visit_params("det_head" + std::to_string(h), fn);
    for (std::size_t h = 0; h < mask_heads_.size(); ++h)
      mask_heads_[h].visit_params("mask_head" + std::to_string(h), fn);
  }

  std::vector<Param<T>*> parameters() {
    std::vector<Param<T>*> out;
    visit_params([&](const std::string&, Param<T>& p) { out.push_back(&p); });
    return out;
  }

  void save(const std::string& path) {
    std::vector<std::pair<std::string, const Tensor<T>*>> entries;
    visit_params([&](const std::string& name, Param<T>& p) {
      entries.emplace_back(name, &p.value);
    });
    save_checkpoint(path, entries);
  }

  void load(const std::string& path) {
    auto archive = load_checkpoint<T>(path);
    std::size_t used = 0;
    visit_params([&](const std::string& name, Param<T>& p) {
      auto it = archive.find(name);
      if (it == archive.end())
        throw std::runtime_error("checkpoint missing key '" + name + "'");
      if (it->second.shape != p.value.shape)
        throw std::runtime_error("checkpoint shape mismatch for key '" + name +
                                 "': expected " + p.value.shape_str() +
                                 ", got " + it->second.shape_str());
      p.value = it->second;
      ++used;
    });
    if (used != archive.size()) {
      for (auto& [name, t] : archive) {
        bool found = false;
        visit_params([&](const std::string& n, Param<T>&) {
          if (n == name) found = true;
        });
        if (!found)
          throw std::runtime_error("checkpoint has unknown key '" + name +
                                   "'");
      }
    }
  }

 private:
  ModelConfig cfg_;
  Backbone<T> backbone_;
  RpnHead<T> rpn_;
  std::vector<DetectionHead<T>> det_heads_;
  std::vector<MaskHead<T>> mask_heads_;
};

}  // namespace r3cnn

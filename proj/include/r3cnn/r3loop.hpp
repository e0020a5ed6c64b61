#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "r3cnn/geometry.hpp"
#include "r3cnn/model.hpp"
#include "r3cnn/rng.hpp"
#include "r3cnn/synthdata.hpp"
#include "r3cnn/tensor.hpp"

namespace r3cnn {

// Per-loop IoU thresholds and loop counts.
struct LoopSchedule {
  std::vector<double> thresholds;        // u^1..u^T, one per training loop
  std::size_t train_loops = 3;           // L_t
  std::size_t eval_loops = 3;            // L_e
  std::vector<double> loop_loss_weights; // one per training loop

  void validate() const {
    if (thresholds.size() != train_loops)
      throw std::invalid_argument(
          "LoopSchedule: thresholds count != train_loops");
    if (loop_loss_weights.size() != train_loops)
      throw std::invalid_argument(
          "LoopSchedule: loop_loss_weights count != train_loops");
    for (double u : thresholds)
      if (!(u > 0.0 && u < 1.0))
        throw std::invalid_argument("LoopSchedule: threshold not in (0,1)");
    for (double w : loop_loss_weights)
      if (!(w > 0.0))
        throw std::invalid_argument("LoopSchedule: non-positive loop weight");
    if (eval_loops < 1)
      throw std::invalid_argument("LoopSchedule: eval_loops must be >= 1");
  }
};

struct LossConfig {
  double lambda = 1.0;       // localization balance
  double smooth_l1_beta = 1.0;

  void validate() const {
    if (!(lambda > 0.0))
      throw std::invalid_argument("LossConfig: lambda must be positive");
  }
};

struct SamplerConfig {
  std::size_t total = 64;
  double pos_fraction = 0.25;
  std::size_t mask_rois_per_loop = 8;  // cap on mask-head positives per loop
};

// Per-proposal labels: y = matched gt class iff matched IoU >= u, else 0.
struct AssignmentResult {
  std::vector<int> labels;        // 0 = background
  std::vector<int> matched_gt;    // argmax-IoU gt index, -1 when no gt
  std::vector<double> matched_iou;

  std::size_t size() const { return labels.size(); }
};

inline AssignmentResult assign_labels(const std::vector<Box>& proposals,
                                      const GroundTruth& gt, double u) {
  if (!(u > 0.0 && u < 1.0))
    throw std::invalid_argument("assign_labels: u must be in (0,1)");
  AssignmentResult out;
  out.labels.resize(proposals.size(), 0);
  out.matched_gt.resize(proposals.size(), -1);
  out.matched_iou.resize(proposals.size(), 0.0);
  for (std::size_t p = 0; p < proposals.size(); ++p) {
    double best = -1.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(proposals[p], gt.boxes[g]);
      if (v > best) {  // ties keep the lower gt index
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      out.matched_gt[p] = best_gt;
      out.matched_iou[p] = best;
      if (best >= u)
        out.labels[p] = gt.class_labels[static_cast<std::size_t>(best_gt)];
    }
  }
  return out;
}

namespace detail {

// Uniform sample of k elements from pool, without replacement; pool order is
// consumed deterministically.
inline std::vector<std::size_t> sample_without_replacement(
    std::vector<std::size_t> pool, std::size_t k, Rng& rng) {
  k = std::min(k, pool.size());
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j =
        i + static_cast<std::size_t>(rng.uniform_int(
                0, static_cast<std::int64_t>(pool.size() - 1 - i)));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace detail

// Samples up to total*pos_fraction positives, remainder negatives; a deficit
// in one pool is filled from the other.
inline std::vector<std::size_t> sample_rois(const AssignmentResult& assignment,
                                            std::size_t total,
                                            double pos_fraction, Rng& rng) {
  if (total == 0)
    throw std::invalid_argument("sample_rois: total must be > 0");
  if (!(pos_fraction > 0.0 && pos_fraction < 1.0))
    throw std::invalid_argument("sample_rois: pos_fraction must be in (0,1)");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    (assignment.labels[i] >= 1 ? pos : neg).push_back(i);
  const std::size_t pos_quota =
      static_cast<std::size_t>(static_cast<double>(total) * pos_fraction);
  std::size_t n_pos = std::min(pos_quota, pos.size());
  std::size_t n_neg = std::min(total - n_pos, neg.size());
  if (n_pos + n_neg < total)  // fill deficit from the other pool
    n_pos = std::min(total - n_neg, pos.size());
  auto take_pos = detail::sample_without_replacement(pos, n_pos, rng);
  auto take_neg = detail::sample_without_replacement(neg, n_neg, rng);
  take_pos.insert(take_pos.end(), take_neg.begin(), take_neg.end());
  return take_pos;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct DetectionLoss {
  double cls = 0, loc = 0;
  double total() const { return cls + loc; }
};

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* term) {
  if (!t.all_finite())
    throw std::runtime_error(std::string("non-finite values in ") + term);
}

inline double smooth_l1(double d, double beta) {
  const double a = std::abs(d);
  return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
}

inline double smooth_l1_grad(double d, double beta) {
  return std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
}

// Cross-entropy over sampled RoIs plus lambda * smooth-L1 over positives.
// cls_logits: [N, C+1], deltas: [N, 4], proposals/assignment: the N sampled
// RoIs. Gradient outputs (optional) have the same shapes; the localization
// term touches positives only.
template <typename T>
inline DetectionLoss detection_loss(const Tensor<T>& cls_logits,
                                    const Tensor<T>& deltas,
                                    const std::vector<Box>& proposals,
                                    const AssignmentResult& assignment,
                                    const GroundTruth& gt,
                                    const LossConfig& cfg,
                                    Tensor<T>* dcls = nullptr,
                                    Tensor<T>* ddeltas = nullptr,
                                    double grad_scale = 1.0) {
  cfg.validate();
  check_finite(cls_logits, "classification logits");
  check_finite(deltas, "regression deltas");
  const std::size_t N = cls_logits.dim(0);
  const std::size_t C = cls_logits.dim(1);
  if (deltas.dim(0) != N || proposals.size() != N || assignment.size() != N)
    throw std::invalid_argument("detection_loss: misaligned inputs");
  if (dcls) *dcls = Tensor<T>(cls_logits.shape);
  if (ddeltas) *ddeltas = Tensor<T>(deltas.shape);
  DetectionLoss out;
  if (N == 0) return out;

  // softmax cross-entropy, mean over samples
  for (std::size_t i = 0; i < N; ++i) {
    const T* row = cls_logits.ptr() + i * C;
    double mx = row[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double z = 0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
    const int y = assignment.labels[i];
    out.cls += (std::log(z) - (static_cast<double>(row[static_cast<std::size_t>(y)]) - mx)) /
               static_cast<double>(N);
    if (dcls) {
      T* drow = dcls->ptr() + i * C;
      for (std::size_t c = 0; c < C; ++c) {
        const double p = std::exp(static_cast<double>(row[c]) - mx) / z;
        drow[c] = static_cast<T>(grad_scale *
                                 (p - (static_cast<int>(c) == y ? 1.0 : 0.0)) /
                                 static_cast<double>(N));
      }
    }
  }

  // smooth-L1 over positives, mean over positive count
  std::vector<std::size_t> positives;
  for (std::size_t i = 0; i < N; ++i)
    if (assignment.labels[i] >= 1) positives.push_back(i);
  if (!positives.empty()) {
    const double inv = 1.0 / static_cast<double>(positives.size());
    for (std::size_t i : positives) {
      const Box& target =
          gt.boxes[static_cast<std::size_t>(assignment.matched_gt[i])];
      const Delta4 t = encode_deltas(proposals[i], target);
      const double pred[4] = {static_cast<double>(deltas[i * 4 + 0]),
                              static_cast<double>(deltas[i * 4 + 1]),
                              static_cast<double>(deltas[i * 4 + 2]),
                              static_cast<double>(deltas[i * 4 + 3])};
      const double tgt[4] = {t.dx, t.dy, t.dw, t.dh};
      for (int k = 0; k < 4; ++k) {
        const double d = pred[k] - tgt[k];
        out.loc += cfg.lambda * smooth_l1(d, cfg.smooth_l1_beta) * inv;
        if (ddeltas)
          (*ddeltas)[i * 4 + static_cast<std::size_t>(k)] = static_cast<T>(
              grad_scale * cfg.lambda * smooth_l1_grad(d, cfg.smooth_l1_beta) *
              inv);
      }
    }
  }
  return out;
}

// Ground-truth mask cropped to the proposal and resampled to out_size^2.
// Sample at cell centers, nearest pixel.
inline MaskRaster mask_target(const MaskRaster& gt_mask, std::size_t img_w,
                              std::size_t img_h, const Box& proposal,
                              std::size_t out_size) {
  MaskRaster t(out_size * out_size, 0);
  const double bw = proposal.width() / static_cast<double>(out_size);
  const double bh = proposal.height() / static_cast<double>(out_size);
  for (std::size_t i = 0; i < out_size; ++i) {
    for (std::size_t j = 0; j < out_size; ++j) {
      const double px = proposal.x1 + (static_cast<double>(j) + 0.5) * bw;
      const double py = proposal.y1 + (static_cast<double>(i) + 0.5) * bh;
      const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(std::floor(px));
      const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(std::floor(py));
      if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(img_w) ||
          y >= static_cast<std::ptrdiff_t>(img_h))
        continue;
      t[i * out_size + j] =
          gt_mask[static_cast<std::size_t>(y) * img_w +
                  static_cast<std::size_t>(x)];
    }
  }
  return t;
}

// Per-pixel binary cross-entropy on the channel of the assigned class,
// mean-reduced over positives x pixels. Zero positives contribute 0.
template <typename T>
inline double mask_loss(const Tensor<T>& mask_logits,
                        const std::vector<int>& classes,
                        const std::vector<MaskRaster>& targets,
                        Tensor<T>* dlogits = nullptr,
                        double grad_scale = 1.0) {
  const std::size_t R = classes.size();
  if (dlogits) *dlogits = Tensor<T>(mask_logits.shape);
  if (R == 0) return 0.0;
  check_finite(mask_logits, "mask logits");
  if (mask_logits.dim(0) != R || targets.size() != R)
    throw std::invalid_argument("mask_loss: misaligned inputs");
  const std::size_t C = mask_logits.dim(1);
  const std::size_t M = mask_logits.dim(2);
  const double inv = 1.0 / static_cast<double>(R * M * M);
  double loss = 0;
  for (std::size_t r = 0; r < R; ++r) {
    if (classes[r] < 1 || static_cast<std::size_t>(classes[r]) > C)
      throw std::invalid_argument("mask_loss: class out of range at RoI " +
                                  std::to_string(r));
    const std::size_t ch = static_cast<std::size_t>(classes[r] - 1);
    const T* plane = mask_logits.ptr() + (r * C + ch) * M * M;
    T* dplane = dlogits ? dlogits->ptr() + (r * C + ch) * M * M : nullptr;
    for (std::size_t p = 0; p < M * M; ++p) {
      const double x = plane[p];
      const double y = targets[r][p] ? 1.0 : 0.0;
      // stable BCE-with-logits: max(x,0) - x*y + log(1+exp(-|x|))
      loss += (std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)))) *
              inv;
      if (dplane) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        dplane[p] = static_cast<T>(grad_scale * (s - y) * inv);
      }
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// IoU histogram instrumentation (positive training samples per loop)
// ---------------------------------------------------------------------------

struct IoUHistogram {
  double bin_width = 0.05;
  std::vector<std::vector<std::uint64_t>> counts;  // [loop][bin]

  explicit IoUHistogram(double bw = 0.05, std::size_t loops = 0) : bin_width(bw) {
    const double nb = 1.0 / bw;
    if (std::abs(nb - std::round(nb)) > 1e-9)
      throw std::invalid_argument("IoUHistogram: bin_width must divide 1");
    counts.assign(loops, std::vector<std::uint64_t>(num_bins(), 0));
  }

  std::size_t num_bins() const {
    return static_cast<std::size_t>(std::llround(1.0 / bin_width));
  }

  void ensure_loops(std::size_t loops) {
    while (counts.size() < loops)
      counts.emplace_back(num_bins(), 0);
  }

  void add(std::size_t loop, double iou_value) {
    ensure_loops(loop + 1);
    std::size_t bin = static_cast<std::size_t>(iou_value / bin_width);
    bin = std::min(bin, num_bins() - 1);  // IoU exactly 1.0 lands in the top bin
    ++counts[loop][bin];
  }

  std::uint64_t total(std::size_t loop) const {
    std::uint64_t t = 0;
    for (std::uint64_t c : counts[loop]) t += c;
    return t;
  }

  void merge(const IoUHistogram& other) {
    ensure_loops(other.counts.size());
    for (std::size_t l = 0; l < other.counts.size(); ++l)
      for (std::size_t b = 0; b < other.counts[l].size(); ++b)
        counts[l][b] += other.counts[l][b];
  }
};

// Adds each positive sample's matched IoU under the per-loop series.
inline void record_histogram(const AssignmentResult& assignment,
                             std::size_t loop_index, IoUHistogram& hist) {
  for (std::size_t i = 0; i < assignment.size(); ++i)
    if (assignment.labels[i] >= 1) hist.add(loop_index, assignment.matched_iou[i]);
}

// ---------------------------------------------------------------------------
// RPN training target: IoU-based anchor assignment, binary objectness
// cross-entropy plus smooth-L1 on positive anchors.
// ---------------------------------------------------------------------------

struct RpnTrainConfig {
  double pos_iou = 0.7;
  double neg_iou = 0.3;
  std::size_t sample_total = 64;
  double pos_fraction = 0.5;
  double smooth_l1_beta = 1.0;
};

struct RpnLoss {
  double cls = 0, loc = 0;
  double total() const { return cls + loc; }
};

// anchors are in rpn_propose index order: (i*W + j)*A + a. dcls/dreg are laid
// out like the RPN conv outputs [A,H,W] / [4A,H,W].
template <typename T>
inline RpnLoss rpn_loss(const RpnOut<T>& rpn_out,
                        const std::vector<Box>& anchors, const GroundTruth& gt,
                        const RpnTrainConfig& cfg, std::size_t feat_h,
                        std::size_t feat_w, std::size_t anchors_per_cell,
                        Rng& rng, Tensor<T>* dcls, Tensor<T>* dreg) {
  const std::size_t n = anchors.size();
  std::vector<int> label(n, -1);  // 1 pos, 0 neg, -1 ignore
  std::vector<int> matched(n, -1);
  std::vector<double> best_iou(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(anchors[i], gt.boxes[g]);
      if (v > best_iou[i]) {
        best_iou[i] = v;
        matched[i] = static_cast<int>(g);
      }
    }
    if (best_iou[i] >= cfg.pos_iou) label[i] = 1;
    else if (best_iou[i] < cfg.neg_iou) label[i] = 0;
  }
  // every gt gets its best anchor as positive
  for (std::size_t g = 0; g < gt.size(); ++g) {
    double best = 0.0;
    std::ptrdiff_t best_a = -1;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = iou(anchors[i], gt.boxes[g]);
      if (v > best) {
        best = v;
        best_a = static_cast<std::ptrdiff_t>(i);
      }
    }
    if (best_a >= 0 && best > 0.0) {
      label[static_cast<std::size_t>(best_a)] = 1;
      matched[static_cast<std::size_t>(best_a)] = static_cast<int>(g);
    }
  }
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < n; ++i) {
    if (label[i] == 1) pos.push_back(i);
    else if (label[i] == 0) neg.push_back(i);
  }
  const std::size_t pos_quota = static_cast<std::size_t>(
      static_cast<double>(cfg.sample_total) * cfg.pos_fraction);
  auto take_pos =
      detail::sample_without_replacement(pos, std::min(pos_quota, pos.size()), rng);
  auto take_neg = detail::sample_without_replacement(
      neg, std::min(cfg.sample_total - take_pos.size(), neg.size()), rng);

  if (dcls) *dcls = Tensor<T>({anchors_per_cell, feat_h, feat_w});
  if (dreg) *dreg = Tensor<T>({anchors_per_cell * 4, feat_h, feat_w});
  RpnLoss out;
  const std::size_t n_samp = take_pos.size() + take_neg.size();
  if (n_samp == 0) return out;
  const double inv_cls = 1.0 / static_cast<double>(n_samp);
  auto cls_offset = [&](std::size_t idx) {
    const std::size_t cell = idx / anchors_per_cell;
    const std::size_t a = idx % anchors_per_cell;
    const std::size_t i = cell / feat_w, j = cell % feat_w;
    return (a * feat_h + i) * feat_w + j;
  };
  auto bce = [&](std::size_t idx, double y) {
    const double x = rpn_out.objectness[idx];
    out.cls +=
        (std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)))) *
        inv_cls;
    if (dcls) {
      const double s = 1.0 / (1.0 + std::exp(-x));
      (*dcls)[cls_offset(idx)] += static_cast<T>((s - y) * inv_cls);
    }
  };
  for (std::size_t i : take_pos) bce(i, 1.0);
  for (std::size_t i : take_neg) bce(i, 0.0);

  if (!take_pos.empty()) {
    const double inv_loc = 1.0 / static_cast<double>(take_pos.size());
    for (std::size_t idx : take_pos) {
      const Box& target = gt.boxes[static_cast<std::size_t>(matched[idx])];
      if (anchors[idx].width() <= 0 || anchors[idx].height() <= 0) continue;
      const Delta4 t = encode_deltas(anchors[idx], target);
      const Delta4& p = rpn_out.deltas[idx];
      const double pred[4] = {p.dx, p.dy, p.dw, p.dh};
      const double tgt[4] = {t.dx, t.dy, t.dw, t.dh};
      const std::size_t cell = idx / anchors_per_cell;
      const std::size_t a = idx % anchors_per_cell;
      const std::size_t i = cell / feat_w, j = cell % feat_w;
      for (int k = 0; k < 4; ++k) {
        const double d = pred[k] - tgt[k];
        out.loc += smooth_l1(d, cfg.smooth_l1_beta) * inv_loc;
        if (dreg)
          (*dreg)[((a * 4 + static_cast<std::size_t>(k)) * feat_h + i) * feat_w +
                  j] +=
              static_cast<T>(smooth_l1_grad(d, cfg.smooth_l1_beta) * inv_loc);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Recursive training step (Fig. 1b): pool, assign at u^t, sample, accumulate
// losses, decode all proposals into b^t (detached), repeat.
// ---------------------------------------------------------------------------

struct StepStats {
  double total = 0;
  double rpn_cls = 0, rpn_loc = 0;
  double det_cls = 0, det_loc = 0, mask = 0;
  std::size_t loops_run = 0;
};

// Decodes every current proposal into the next loop's proposal set. Boxes
// that collapse below 1px keep their pre-decode geometry so proposal
// identity is preserved across loops.
template <typename T>
inline std::vector<Box> decode_proposals(const std::vector<Box>& proposals,
                                         const Tensor<T>& deltas,
                                         double image_w, double image_h) {
  std::vector<Box> next;
  next.reserve(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const Delta4 d{static_cast<double>(deltas[i * 4 + 0]),
                   static_cast<double>(deltas[i * 4 + 1]),
                   static_cast<double>(deltas[i * 4 + 2]),
                   static_cast<double>(deltas[i * 4 + 3])};
    Box b = decode_deltas(proposals[i], d, image_w, image_h);
    if (b.width() < 1.0 || b.height() < 1.0)
      b = clip_box(proposals[i], image_w, image_h);
    next.push_back(b);
  }
  return next;
}

template <typename T>
inline StepStats train_step(const Tensor<T>& image, const GroundTruth& gt,
                            const LoopSchedule& schedule, R3Cnn<T>& model,
                            const LossConfig& loss_cfg,
                            const SamplerConfig& sampler_cfg,
                            const RpnTrainConfig& rpn_cfg, Rng& rng,
                            IoUHistogram* hist) {
  schedule.validate();
  loss_cfg.validate();
  const ModelConfig& mc = model.config();
  const double img_w = static_cast<double>(image.dim(2));
  const double img_h = static_cast<double>(image.dim(1));

  BackboneCtx<T> bctx;
  FeatureMap<T> fmap = model.backbone().forward(image, &bctx);
  const std::size_t fh = fmap.values.dim(1), fw = fmap.values.dim(2);

  RpnCtx<T> rctx;
  RpnOut<T> rpn_out = model.rpn().forward(fmap, &rctx);
  const std::vector<Box> anchors = generate_anchors(mc.anchors, fh, fw);

  Tensor<T> drpn_cls, drpn_reg;
  const RpnLoss rl =
      rpn_loss(rpn_out, anchors, gt, rpn_cfg, fh, fw,
               model.rpn().anchors_per_cell(), rng, &drpn_cls, &drpn_reg);

  std::vector<Box> proposals =
      rpn_propose(rpn_out.objectness, rpn_out.deltas, anchors, img_w, img_h,
                  mc.rpn_k_pre, mc.rpn_k_post, mc.rpn_nms_threshold);

  Tensor<T> dfeat(fmap.values.shape);
  StepStats stats;
  stats.rpn_cls = rl.cls;
  stats.rpn_loc = rl.loc;
  stats.total = rl.total();

  if (hist) hist->ensure_loops(schedule.train_loops);

  for (std::size_t t = 0; t < schedule.train_loops; ++t) {
    // seed each loop's pool with the gt boxes themselves, so loops with a
    // high threshold always see positives (standard cascade sampling)
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const Box b = clip_box(gt.boxes[g], img_w, img_h);
      if (b.width() >= 1.0 && b.height() >= 1.0) proposals.push_back(b);
    }
    if (proposals.empty()) break;  // partial loss for this image
    const double w = schedule.loop_loss_weights[t];
    const double u = schedule.thresholds[t];

    AssignmentResult assignment = assign_labels(proposals, gt, u);
    std::vector<std::size_t> sampled = sample_rois(
        assignment, sampler_cfg.total, sampler_cfg.pos_fraction, rng);
    if (sampled.empty()) break;

    Tensor<T> pooled = roi_align(fmap, proposals, mc.roi_size);
    DetHeadCtx<T> dctx;
    DetHeadOut<T> out = model.det_head(t).forward(pooled, &dctx);

    // gather sampled rows for the loss
    const std::size_t S = sampled.size();
    const std::size_t C = out.cls_logits.dim(1);
    Tensor<T> s_cls({S, C}), s_reg({S, 4});
    std::vector<Box> s_boxes(S);
    AssignmentResult s_assign;
    s_assign.labels.resize(S);
    s_assign.matched_gt.resize(S);
    s_assign.matched_iou.resize(S);
    for (std::size_t k = 0; k < S; ++k) {
      const std::size_t i = sampled[k];
      std::copy_n(out.cls_logits.ptr() + i * C, C, s_cls.ptr() + k * C);
      std::copy_n(out.deltas.ptr() + i * 4, 4, s_reg.ptr() + k * 4);
      s_boxes[k] = proposals[i];
      s_assign.labels[k] = assignment.labels[i];
      s_assign.matched_gt[k] = assignment.matched_gt[i];
      s_assign.matched_iou[k] = assignment.matched_iou[i];
    }

    Tensor<T> ds_cls, ds_reg;
    const DetectionLoss dl = detection_loss(s_cls, s_reg, s_boxes, s_assign,
                                            gt, loss_cfg, &ds_cls, &ds_reg, w);
    stats.det_cls += dl.cls;
    stats.det_loc += dl.loc;
    stats.total += w * dl.total();
    if (hist) record_histogram(s_assign, t, *hist);

    // scatter loss grads back to the full proposal set
    Tensor<T> dcls_full(out.cls_logits.shape), dreg_full(out.deltas.shape);
    for (std::size_t k = 0; k < S; ++k) {
      const std::size_t i = sampled[k];
      std::copy_n(ds_cls.ptr() + k * C, C, dcls_full.ptr() + i * C);
      std::copy_n(ds_reg.ptr() + k * 4, 4, dreg_full.ptr() + i * 4);
    }
    Tensor<T> dflat = model.det_head(t).backward(dctx, dcls_full, dreg_full);
    Tensor<T> dpooled(pooled.shape);
    dpooled.data = dflat.data;
    roi_align_backward(fmap, proposals, mc.roi_size, dpooled, dfeat);

    // mask branch on (a capped subset of) sampled positives
    std::vector<std::size_t> pos_pool;
    for (std::size_t k = 0; k < S; ++k)
      if (s_assign.labels[k] >= 1) pos_pool.push_back(k);
    auto mask_sel = detail::sample_without_replacement(
        pos_pool, sampler_cfg.mask_rois_per_loop, rng);
    if (!mask_sel.empty()) {
      std::vector<Box> m_boxes;
      std::vector<int> m_classes;
      std::vector<MaskRaster> m_targets;
      for (std::size_t k : mask_sel) {
        m_boxes.push_back(s_boxes[k]);
        m_classes.push_back(s_assign.labels[k]);
        const auto& gm =
            gt.masks[static_cast<std::size_t>(s_assign.matched_gt[k])];
        m_targets.push_back(mask_target(gm, static_cast<std::size_t>(img_w),
                                        static_cast<std::size_t>(img_h),
                                        s_boxes[k], mc.mask_out_size));
      }
      Tensor<T> m_pooled = roi_align(fmap, m_boxes, mc.mask_roi_size);
      MaskHeadCtx<T> mctx;
      Tensor<T> m_logits = model.mask_head(t).forward(m_pooled, &mctx);
      Tensor<T> dm_logits;
      const double ml = mask_loss(m_logits, m_classes, m_targets, &dm_logits, w);
      stats.mask += ml;
      stats.total += w * ml;
      Tensor<T> dm_pooled = model.mask_head(t).backward(mctx, dm_logits);
      roi_align_backward(fmap, m_boxes, mc.mask_roi_size, dm_pooled, dfeat);
    }

    stats.loops_run = t + 1;
    // b^t: decode ALL current proposals, detached from the gradient graph
    proposals = decode_proposals(proposals, out.deltas, img_w, img_h);
  }

  Tensor<T> dfeat_rpn = model.rpn().backward(rctx, drpn_cls, drpn_reg);
  for (std::size_t i = 0; i < dfeat.size(); ++i) dfeat[i] += dfeat_rpn[i];
  model.backbone().backward(bctx, dfeat);
  return stats;
}

// ---------------------------------------------------------------------------
// Full training driver
// ---------------------------------------------------------------------------

struct OptimConfig {
  std::size_t epochs = 12;
  double learning_rate = 0.005;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::size_t> decay_epochs{8, 11};
  double decay_factor = 0.1;
};

struct TrainingSet {
  SceneSpec spec;
  std::vector<std::size_t> indices;
  std::vector<GroundTruth> gts;
  std::vector<Image> images;  // cached renders, aligned with indices
};

inline TrainingSet load_training_set(const DatasetManifest& manifest) {
  TrainingSet set;
  set.spec = manifest.spec;
  for (const auto& rec : manifest.scenes) {
    set.indices.push_back(rec.index);
    set.gts.push_back(rec.gt);
    set.images.push_back(generate_scene(manifest.spec, rec.index).first);
  }
  return set;
}

template <typename T>
inline Tensor<T> image_to_tensor(const Image& img) {
  Tensor<T> t({3, img.height, img.width});
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        t[(c * img.height + y) * img.width + x] = static_cast<T>(
            static_cast<double>(img.rgb[(y * img.width + x) * 3 + c]) / 255.0 -
            0.5);
  return t;
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double mean_total = 0, mean_rpn_cls = 0, mean_rpn_loc = 0;
  double mean_det_cls = 0, mean_det_loc = 0, mean_mask = 0;
  IoUHistogram hist{0.05, 0};
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  bool diverged = false;
};

// SGD training over the scene set. Per-epoch loss means and per-epoch
// histogram snapshots are logged. On divergence (non-finite loss) the
// last-good epoch parameters are restored and training stops.
template <typename T>
inline TrainLog fit(const TrainingSet& data, const LoopSchedule& schedule,
                    R3Cnn<T>& model, const OptimConfig& opt,
                    const LossConfig& loss_cfg, const SamplerConfig& sampler_cfg,
                    const RpnTrainConfig& rpn_cfg, std::uint64_t seed) {
  schedule.validate();
  TrainLog log;
  Sgd<T> sgd(model.parameters(), opt.momentum, opt.weight_decay);
  double lr = opt.learning_rate;

  auto snapshot = [&] {
    std::vector<Tensor<T>> s;
    model.visit_params(
        [&](const std::string&, Param<T>& p) { s.push_back(p.value); });
    return s;
  };
  auto restore = [&](const std::vector<Tensor<T>>& s) {
    std::size_t i = 0;
    model.visit_params(
        [&](const std::string&, Param<T>& p) { p.value = s[i++]; });
  };
  std::vector<Tensor<T>> last_good = snapshot();

  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    if (std::find(opt.decay_epochs.begin(), opt.decay_epochs.end(), epoch) !=
        opt.decay_epochs.end())
      lr *= opt.decay_factor;

    Rng order_rng(Rng::mix(Rng::mix(seed, 0x73687566ULL), epoch));
    std::vector<std::size_t> order(data.indices.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(
                    order_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    EpochLog el;
    el.epoch = epoch;
    el.lr = lr;
    el.hist = IoUHistogram(0.05, schedule.train_loops);
    std::size_t steps = 0;
    bool bad = false;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const std::size_t i = order[k];
      Rng step_rng(Rng::mix(Rng::mix(Rng::mix(seed, 0x73746570ULL), epoch),
                            data.indices[i]));
      Tensor<T> img = image_to_tensor<T>(data.images[i]);
      sgd.zero_grad();
      StepStats st = train_step(img, data.gts[i], schedule, model, loss_cfg,
                                sampler_cfg, rpn_cfg, step_rng, &el.hist);
      if (!std::isfinite(st.total)) {
        bad = true;
        break;
      }
      sgd.step(lr);
      el.mean_total += st.total;
      el.mean_rpn_cls += st.rpn_cls;
      el.mean_rpn_loc += st.rpn_loc;
      el.mean_det_cls += st.det_cls;
      el.mean_det_loc += st.det_loc;
      el.mean_mask += st.mask;
      ++steps;
    }
    if (bad) {
      restore(last_good);
      log.diverged = true;
      break;
    }
    if (steps > 0) {
      const double inv = 1.0 / static_cast<double>(steps);
      el.mean_total *= inv;
      el.mean_rpn_cls *= inv;
      el.mean_rpn_loc *= inv;
      el.mean_det_cls *= inv;
      el.mean_det_loc *= inv;
      el.mean_mask *= inv;
    }
    log.epochs.push_back(std::move(el));
    last_good = snapshot();
  }
  return log;
}

}  // namespace r3cnn

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "r3cnn/geometry.hpp"
#include "r3cnn/model.hpp"
#include "r3cnn/r3loop.hpp"
#include "r3cnn/synthdata.hpp"

namespace r3cnn {

struct PostConfig {
  double score_threshold = 0.05;
  double nms_threshold = 0.5;
  std::size_t max_detections = 100;
  bool average_logits = false;  // average pre-softmax logits instead of probs
};

struct DetectionResult {
  std::vector<Box> boxes;
  std::vector<int> class_labels;
  std::vector<double> scores;       // descending
  std::vector<MaskRaster> masks;    // image resolution, aligned with boxes

  std::size_t size() const { return boxes.size(); }
};

// Arithmetic mean per class across loops. Inputs must be aligned: proposal i
// at loop t descends from proposal i at loop t-1.
inline std::vector<double> merge_loop_scores(
    const std::vector<std::vector<double>>& per_loop_scores) {
  if (per_loop_scores.empty())
    throw std::invalid_argument("merge_loop_scores: need at least one loop");
  const std::size_t n = per_loop_scores[0].size();
  std::vector<double> mean(n, 0.0);
  for (const auto& loop : per_loop_scores) {
    if (loop.size() != n)
      throw std::invalid_argument(
          "merge_loop_scores: mismatched score vector lengths: " +
          std::to_string(loop.size()) + " vs " + std::to_string(n));
    for (std::size_t i = 0; i < n; ++i) mean[i] += loop[i];
  }
  const double inv = 1.0 / static_cast<double>(per_loop_scores.size());
  for (double& v : mean) v *= inv;
  return mean;
}

namespace detail {

template <typename T>
inline std::vector<double> softmax_row(const T* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t c = 1; c < n; ++c)
    mx = std::max(mx, static_cast<double>(row[c]));
  std::vector<double> p(n);
  double z = 0;
  for (std::size_t c = 0; c < n; ++c) {
    p[c] = std::exp(static_cast<double>(row[c]) - mx);
    z += p[c];
  }
  for (double& v : p) v /= z;
  return p;
}

// Paste a 28x28 sigmoid mask into an image-resolution raster, bilinear
// sampled, binarized at 0.5.
inline MaskRaster paste_mask(const std::vector<double>& probs, std::size_t m,
                             const Box& box, std::size_t img_w,
                             std::size_t img_h) {
  MaskRaster out(img_w * img_h, 0);
  const std::size_t x0 = static_cast<std::size_t>(
      std::clamp(std::floor(box.x1), 0.0, static_cast<double>(img_w)));
  const std::size_t x1 = static_cast<std::size_t>(
      std::clamp(std::ceil(box.x2), 0.0, static_cast<double>(img_w)));
  const std::size_t y0 = static_cast<std::size_t>(
      std::clamp(std::floor(box.y1), 0.0, static_cast<double>(img_h)));
  const std::size_t y1 = static_cast<std::size_t>(
      std::clamp(std::ceil(box.y2), 0.0, static_cast<double>(img_h)));
  if (box.width() <= 0 || box.height() <= 0) return out;
  const double md = static_cast<double>(m);
  for (std::size_t y = y0; y < y1; ++y) {
    for (std::size_t x = x0; x < x1; ++x) {
      // mask-grid coordinates of the pixel center
      const double u =
          (static_cast<double>(x) + 0.5 - box.x1) / box.width() * md - 0.5;
      const double v =
          (static_cast<double>(y) + 0.5 - box.y1) / box.height() * md - 0.5;
      if (u < -0.5 || v < -0.5 || u > md - 0.5 || v > md - 0.5) continue;
      const double uc = std::clamp(u, 0.0, md - 1.0);
      const double vc = std::clamp(v, 0.0, md - 1.0);
      const std::size_t iu = static_cast<std::size_t>(uc);
      const std::size_t iv = static_cast<std::size_t>(vc);
      const std::size_t iu1 = std::min(iu + 1, m - 1);
      const std::size_t iv1 = std::min(iv + 1, m - 1);
      const double fu = uc - static_cast<double>(iu);
      const double fv = vc - static_cast<double>(iv);
      const double p = probs[iv * m + iu] * (1 - fu) * (1 - fv) +
                       probs[iv * m + iu1] * fu * (1 - fv) +
                       probs[iv1 * m + iu] * (1 - fu) * fv +
                       probs[iv1 * m + iu1] * fu * fv;
      if (p >= 0.5) out[y * img_w + x] = 1;
    }
  }
  return out;
}

}  // namespace detail

// Evaluation-time recursion: L_e refinement loops, boxes from the final loop,
// scores merged across all loops, then score threshold, per-class NMS and the
// mask head on the survivors.
template <typename T>
inline DetectionResult run_inference(const Tensor<T>& image, R3Cnn<T>& model,
                                     const LoopSchedule& schedule,
                                     const PostConfig& post) {
  if (schedule.eval_loops < 1)
    throw std::invalid_argument("run_inference: eval_loops must be >= 1");
  const ModelConfig& mc = model.config();
  const double img_w = static_cast<double>(image.dim(2));
  const double img_h = static_cast<double>(image.dim(1));

  FeatureMap<T> fmap = model.backbone().forward(image, nullptr);
  RpnOut<T> rpn_out = model.rpn().forward(fmap, nullptr);
  const std::vector<Box> anchors = generate_anchors(
      mc.anchors, fmap.values.dim(1), fmap.values.dim(2));
  std::vector<Box> proposals =
      rpn_propose(rpn_out.objectness, rpn_out.deltas, anchors, img_w, img_h,
                  mc.rpn_k_pre, mc.rpn_k_post, mc.rpn_nms_threshold);

  DetectionResult result;
  if (proposals.empty()) return result;

  const std::size_t R = proposals.size();
  const std::size_t C = mc.num_classes + 1;
  // per-proposal, per-class accumulators across loops
  std::vector<std::vector<std::vector<double>>> loop_scores(
      R, std::vector<std::vector<double>>());
  for (std::size_t t = 0; t < schedule.eval_loops; ++t) {
    Tensor<T> pooled = roi_align(fmap, proposals, mc.roi_size);
    DetHeadOut<T> out = model.det_head(t).forward(pooled, nullptr);
    for (std::size_t i = 0; i < R; ++i) {
      if (post.average_logits) {
        std::vector<double> row(C);
        for (std::size_t c = 0; c < C; ++c)
          row[c] = static_cast<double>(out.cls_logits[i * C + c]);
        loop_scores[i].push_back(std::move(row));
      } else {
        loop_scores[i].push_back(
            detail::softmax_row(out.cls_logits.ptr() + i * C, C));
      }
    }
    proposals = decode_proposals(proposals, out.deltas, img_w, img_h);
  }

  LabeledBoxSet candidates;
  for (std::size_t i = 0; i < R; ++i) {
    std::vector<double> merged = merge_loop_scores(loop_scores[i]);
    if (post.average_logits) {
      // averaged logits -> probabilities
      double mx = merged[0];
      for (double v : merged) mx = std::max(mx, v);
      double z = 0;
      for (double& v : merged) {
        v = std::exp(v - mx);
        z += v;
      }
      for (double& v : merged) v /= z;
    }
    for (std::size_t c = 1; c < C; ++c) {
      if (merged[c] >= post.score_threshold)
        candidates.push_back(proposals[i], static_cast<int>(c), merged[c]);
    }
  }

  LabeledBoxSet kept = nms(candidates, post.nms_threshold);
  const std::size_t n =
      std::min(kept.size(), post.max_detections);

  if (n == 0) return result;
  std::vector<Box> final_boxes(kept.boxes.begin(), kept.boxes.begin() + static_cast<std::ptrdiff_t>(n));
  Tensor<T> m_pooled = roi_align(fmap, final_boxes, mc.mask_roi_size);
  Tensor<T> m_logits = model.mask_head(0).forward(m_pooled, nullptr);
  const std::size_t M = mc.mask_out_size;
  for (std::size_t i = 0; i < n; ++i) {
    result.boxes.push_back(kept.boxes[i]);
    result.class_labels.push_back(kept.labels[i]);
    result.scores.push_back(kept.scores[i]);
    const std::size_t ch = static_cast<std::size_t>(kept.labels[i] - 1);
    std::vector<double> probs(M * M);
    const T* plane = m_logits.ptr() + (i * mc.num_classes + ch) * M * M;
    for (std::size_t p = 0; p < M * M; ++p)
      probs[p] = 1.0 / (1.0 + std::exp(-static_cast<double>(plane[p])));
    result.masks.push_back(detail::paste_mask(
        probs, M, kept.boxes[i], static_cast<std::size_t>(img_w),
        static_cast<std::size_t>(img_h)));
  }
  return result;
}

// One text record per detection: image id, class, score, box, RLE mask.
inline void write_detections(std::ostream& os, std::size_t image_id,
                             const DetectionResult& result) {
  for (std::size_t i = 0; i < result.size(); ++i) {
    os << image_id << " " << result.class_labels[i] << " " << result.scores[i]
       << " " << result.boxes[i].x1 << " " << result.boxes[i].y1 << " "
       << result.boxes[i].x2 << " " << result.boxes[i].y2 << " rle";
    for (std::size_t run : rle_encode(result.masks[i])) os << " " << run;
    os << "\n";
  }
}

}  // namespace r3cnn

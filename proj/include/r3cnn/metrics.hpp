#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "r3cnn/geometry.hpp"
#include "r3cnn/inference.hpp"
#include "r3cnn/model.hpp"
#include "r3cnn/synthdata.hpp"

namespace r3cnn {

enum class ApTask { kBox, kMask };

struct APResult {
  double ap = 0;    // mean over IoU 0.50:0.95
  double ap50 = 0;
  double ap75 = 0;
  bool defined = true;  // false when no ground-truth instances exist
};

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

inline double mask_iou(const MaskRaster& a, const MaskRaster& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("mask_iou: raster size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool av = a[i] != 0, bv = b[i] != 0;
    inter += (av && bv) ? 1 : 0;
    uni += (av || bv) ? 1 : 0;
  }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

namespace detail {

// Average precision for one class at one IoU threshold: greedy score-ordered
// matching, each gt matched at most once, 101-point interpolation.
inline double ap_single(const std::vector<DetectionResult>& detections,
                        const std::vector<GroundTruth>& gts, int cls,
                        double iou_thr, ApTask task, std::size_t total_gt) {
  struct Det {
    double score;
    std::size_t img, idx;
  };
  std::vector<Det> all;
  for (std::size_t im = 0; im < detections.size(); ++im)
    for (std::size_t d = 0; d < detections[im].size(); ++d)
      if (detections[im].class_labels[d] == cls)
        all.push_back({detections[im].scores[d], im, d});
  std::stable_sort(all.begin(), all.end(), [](const Det& a, const Det& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.img != b.img) return a.img < b.img;
    return a.idx < b.idx;
  });

  std::vector<std::vector<bool>> gt_used(gts.size());
  for (std::size_t im = 0; im < gts.size(); ++im)
    gt_used[im].assign(gts[im].size(), false);

  std::vector<bool> tp(all.size(), false);
  for (std::size_t k = 0; k < all.size(); ++k) {
    const auto& det = all[k];
    const GroundTruth& gt = gts[det.img];
    double best = -1.0;
    std::ptrdiff_t best_g = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (gt.class_labels[g] != cls || gt_used[det.img][g]) continue;
      const double v =
          task == ApTask::kBox
              ? iou(detections[det.img].boxes[det.idx], gt.boxes[g])
              : mask_iou(detections[det.img].masks[det.idx], gt.masks[g]);
      if (v > best) {
        best = v;
        best_g = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (best_g >= 0 && best >= iou_thr) {
      tp[k] = true;
      gt_used[det.img][static_cast<std::size_t>(best_g)] = true;
    }
  }

  // precision/recall points in score order
  std::vector<double> precision(all.size()), recall(all.size());
  std::size_t cum_tp = 0;
  for (std::size_t k = 0; k < all.size(); ++k) {
    if (tp[k]) ++cum_tp;
    precision[k] = static_cast<double>(cum_tp) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(cum_tp) / static_cast<double>(total_gt);
  }
  // 101-point interpolated AP
  double ap = 0;
  for (int r = 0; r <= 100; ++r) {
    const double rr = static_cast<double>(r) / 100.0;
    double pmax = 0;
    for (std::size_t k = 0; k < all.size(); ++k)
      if (recall[k] >= rr) pmax = std::max(pmax, precision[k]);
    ap += pmax / 101.0;
  }
  return ap;
}

}  // namespace detail

// COCO-style AP: greedy matching per class and threshold, averaged over
// classes (those with ground truth) then thresholds.
inline APResult compute_ap(const std::vector<DetectionResult>& detections,
                           const std::vector<GroundTruth>& gts,
                           const std::vector<double>& iou_thresholds,
                           ApTask task) {
  if (detections.size() != gts.size())
    throw std::invalid_argument(
        "compute_ap: detections/gts image count mismatch");
  std::map<int, std::size_t> gt_per_class;
  for (const auto& gt : gts)
    for (int c : gt.class_labels) ++gt_per_class[c];
  APResult out;
  if (gt_per_class.empty()) {
    out.defined = false;
    return out;
  }
  double sum = 0;
  for (double thr : iou_thresholds) {
    double class_sum = 0;
    for (const auto& [cls, total] : gt_per_class)
      class_sum += detail::ap_single(detections, gts, cls, thr, task, total);
    const double ap_thr = class_sum / static_cast<double>(gt_per_class.size());
    sum += ap_thr;
    if (std::abs(thr - 0.5) < 1e-12) out.ap50 = ap_thr;
    if (std::abs(thr - 0.75) < 1e-12) out.ap75 = ap_thr;
  }
  out.ap = sum / static_cast<double>(iou_thresholds.size());
  return out;
}

// Per-class AP at the full threshold sweep (for the CSV report).
inline std::map<int, double> compute_per_class_ap(
    const std::vector<DetectionResult>& detections,
    const std::vector<GroundTruth>& gts,
    const std::vector<double>& iou_thresholds, ApTask task) {
  std::map<int, std::size_t> gt_per_class;
  for (const auto& gt : gts)
    for (int c : gt.class_labels) ++gt_per_class[c];
  std::map<int, double> out;
  for (const auto& [cls, total] : gt_per_class) {
    double sum = 0;
    for (double thr : iou_thresholds)
      sum += detail::ap_single(detections, gts, cls, thr, task, total);
    out[cls] = sum / static_cast<double>(iou_thresholds.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter census
// ---------------------------------------------------------------------------

struct ParamCensus {
  std::map<std::string, std::size_t> per_module;  // top-level module -> count
  std::size_t backbone = 0, rpn = 0, heads = 0, total = 0;
};

inline ParamCensus count_parameters(const ModelConfig& config) {
  R3Cnn<float> model(config);
  ParamCensus census;
  model.visit_params([&](const std::string& name, Param<float>& p) {
    const std::string module = name.substr(0, name.find('.'));
    census.per_module[module] += p.size();
    census.total += p.size();
    if (module == "backbone") census.backbone += p.size();
    else if (module == "rpn") census.rpn += p.size();
    else census.heads += p.size();
  });
  return census;
}

}  // namespace r3cnn

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace r3cnn {

// Axis-aligned box, corner convention, continuous coordinates.
// area = (x2-x1)*(y2-y1), no +1.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2) && x2 >= x1 && y2 >= y1;
  }
};

// Regression target in the standard center/log-size parametrization.
struct Delta4 {
  double dx = 0, dy = 0, dw = 0, dh = 0;
};

// Clamp bound for dw/dh before exponentiation.
inline constexpr double kDeltaClamp = 4.135166556742356;  // log(1000/16)

struct LabeledBoxSet {
  std::vector<Box> boxes;
  std::vector<int> labels;
  std::vector<double> scores;

  std::size_t size() const { return boxes.size(); }
  void push_back(const Box& b, int label, double score) {
    boxes.push_back(b);
    labels.push_back(label);
    scores.push_back(score);
  }
};

inline double iou(const Box& a, const Box& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = std::max(0.0, ix2 - ix1);
  const double ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline Delta4 encode_deltas(const Box& proposal, const Box& target) {
  const double pw = proposal.width();
  const double ph = proposal.height();
  if (pw <= 0.0 || ph <= 0.0) {
    throw std::invalid_argument("encode_deltas: degenerate proposal (width=" +
                                std::to_string(pw) +
                                ", height=" + std::to_string(ph) + ")");
  }
  Delta4 d;
  d.dx = (target.cx() - proposal.cx()) / pw;
  d.dy = (target.cy() - proposal.cy()) / ph;
  d.dw = std::log(target.width() / pw);
  d.dh = std::log(target.height() / ph);
  return d;
}

inline Box clip_box(const Box& b, double width, double height) {
  Box c;
  c.x1 = std::clamp(b.x1, 0.0, width);
  c.y1 = std::clamp(b.y1, 0.0, height);
  c.x2 = std::clamp(b.x2, 0.0, width);
  c.y2 = std::clamp(b.y2, 0.0, height);
  return c;
}

inline Box decode_deltas(const Box& proposal, const Delta4& delta, double width,
                         double height) {
  const double pw = proposal.width();
  const double ph = proposal.height();
  if (pw <= 0.0 || ph <= 0.0) {
    throw std::invalid_argument("decode_deltas: degenerate proposal");
  }
  const double dw = std::clamp(delta.dw, -kDeltaClamp, kDeltaClamp);
  const double dh = std::clamp(delta.dh, -kDeltaClamp, kDeltaClamp);
  const double cx = proposal.cx() + delta.dx * pw;
  const double cy = proposal.cy() + delta.dy * ph;
  const double w = pw * std::exp(dw);
  const double h = ph * std::exp(dh);
  Box out{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  return clip_box(out, width, height);
}

// Unclipped decode, for round-trip checks and internal use.
inline Box decode_deltas_unclipped(const Box& proposal, const Delta4& delta) {
  const double pw = proposal.width();
  const double ph = proposal.height();
  if (pw <= 0.0 || ph <= 0.0) {
    throw std::invalid_argument("decode_deltas: degenerate proposal");
  }
  const double dw = std::clamp(delta.dw, -kDeltaClamp, kDeltaClamp);
  const double dh = std::clamp(delta.dh, -kDeltaClamp, kDeltaClamp);
  const double cx = proposal.cx() + delta.dx * pw;
  const double cy = proposal.cy() + delta.dy * ph;
  const double w = pw * std::exp(dw);
  const double h = ph * std::exp(dh);
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

namespace detail {

// Greedy NMS over one group of indices. Suppresses when iou >= threshold so
// that threshold 1.0 still removes exact duplicates. Ties in score are broken
// by lower original index.
inline std::vector<std::size_t> nms_indices(const std::vector<Box>& boxes,
                                            const std::vector<double>& scores,
                                            const std::vector<std::size_t>& idx,
                                            double iou_threshold) {
  std::vector<std::size_t> order = idx;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     if (scores[a] != scores[b]) return scores[a] > scores[b];
                     return a < b;
                   });
  std::vector<std::size_t> kept;
  for (std::size_t cand : order) {
    bool suppressed = false;
    for (std::size_t k : kept) {
      if (iou(boxes[cand], boxes[k]) >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

}  // namespace detail

// Per-class greedy NMS. Output order: descending score, ties by lower
// original index.
inline LabeledBoxSet nms(const LabeledBoxSet& in, double iou_threshold) {
  if (iou_threshold <= 0.0 || iou_threshold > 1.0) {
    throw std::invalid_argument("nms: iou_threshold must be in (0, 1]");
  }
  std::vector<std::size_t> kept;
  std::vector<int> classes(in.labels);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  for (int c : classes) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < in.size(); ++i)
      if (in.labels[i] == c) idx.push_back(i);
    auto k = detail::nms_indices(in.boxes, in.scores, idx, iou_threshold);
    kept.insert(kept.end(), k.begin(), k.end());
  }
  std::stable_sort(kept.begin(), kept.end(), [&](std::size_t a, std::size_t b) {
    if (in.scores[a] != in.scores[b]) return in.scores[a] > in.scores[b];
    return a < b;
  });
  LabeledBoxSet out;
  for (std::size_t i : kept)
    out.push_back(in.boxes[i], in.labels[i], in.scores[i]);
  return out;
}

// Class-agnostic NMS over raw boxes+scores, returns kept original indices in
// descending-score order.
inline std::vector<std::size_t> nms_class_agnostic(
    const std::vector<Box>& boxes, const std::vector<double>& scores,
    double iou_threshold) {
  std::vector<std::size_t> idx(boxes.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return detail::nms_indices(boxes, scores, idx, iou_threshold);
}

}  // namespace r3cnn

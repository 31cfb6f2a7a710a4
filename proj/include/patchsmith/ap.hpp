#pragma once
// PASCAL-style average precision: greedy IoU matching, precision/recall
// points at distinct-score boundaries, 11-point interpolation.
//
// Determinism contract: detections are ranked by a total order (score
// descending, then image id, then box geometry), so AP is a pure function of
// the multiset of detections.  Precision/recall points are emitted only
// where the score strictly drops; an exhaustive score-threshold sweep sees
// exactly the same (tp, fp) prefixes, which is what makes the brute-force
// oracle agree to float precision.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "patchsmith/detector.hpp"

namespace patchsmith {

struct ScoredBox {
  std::string image_id;
  BoundingBox box;
  double score = 0.0;
};

inline bool scored_box_order(const ScoredBox& a, const ScoredBox& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.image_id != b.image_id) return a.image_id < b.image_id;
  if (a.box.cx != b.box.cx) return a.box.cx < b.box.cx;
  if (a.box.cy != b.box.cy) return a.box.cy < b.box.cy;
  if (a.box.w != b.box.w) return a.box.w < b.box.w;
  return a.box.h < b.box.h;
}

// Greedy matching flags for detections taken in ranked order: each detection
// claims the unmatched reference box of highest IoU >= threshold (if any).
inline std::vector<bool> match_detections(
    const std::vector<ScoredBox>& ranked,
    const std::map<std::string, std::vector<BoundingBox>>& reference, double iou_threshold) {
  std::map<std::string, std::vector<bool>> used;
  for (const auto& [id, boxes] : reference) used[id].assign(boxes.size(), false);
  std::vector<bool> is_tp(ranked.size(), false);
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    auto it = reference.find(ranked[i].image_id);
    if (it == reference.end()) continue;
    const auto& boxes = it->second;
    auto& flags = used[ranked[i].image_id];
    double best = 0.0;
    int best_j = -1;
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      if (flags[j]) continue;
      double iou = box_iou(ranked[i].box, boxes[j]);
      if (iou >= iou_threshold && iou > best) {
        best = iou;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j >= 0) {
      flags[static_cast<std::size_t>(best_j)] = true;
      is_tp[i] = true;
    }
  }
  return is_tp;
}

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

inline std::vector<PrPoint> precision_recall_points(
    std::vector<ScoredBox> detections,
    const std::map<std::string, std::vector<BoundingBox>>& reference, double iou_threshold,
    std::size_t n_reference) {
  std::sort(detections.begin(), detections.end(), scored_box_order);
  std::vector<bool> is_tp = match_detections(detections, reference, iou_threshold);
  std::vector<PrPoint> points;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    if (is_tp[i])
      ++tp;
    else
      ++fp;
    bool boundary =
        (i + 1 == detections.size()) || (detections[i + 1].score != detections[i].score);
    if (boundary)
      points.push_back({static_cast<double>(tp) / static_cast<double>(n_reference),
                        static_cast<double>(tp) / static_cast<double>(tp + fp)});
  }
  return points;
}

// 11-point interpolated AP in [0,1].  Zero reference boxes means there is
// nothing to miss; defined as a perfect 1.
inline double average_precision(const std::vector<ScoredBox>& detections,
                                const std::map<std::string, std::vector<BoundingBox>>& reference,
                                double iou_threshold = 0.5) {
  std::size_t n_ref = 0;
  for (const auto& [id, boxes] : reference) n_ref += boxes.size();
  if (n_ref == 0) return 1.0;
  auto points = precision_recall_points(detections, reference, iou_threshold, n_ref);
  double acc = 0.0;
  for (int k = 0; k <= 10; ++k) {
    double r = k / 10.0;
    double best = 0.0;
    // exact comparison: IEEE division is correctly rounded, so recalls that
    // equal r as real numbers are the identical double
    for (const auto& p : points)
      if (p.recall >= r) best = std::max(best, p.precision);
    acc += best;
  }
  return acc / 11.0;
}

}  // namespace patchsmith

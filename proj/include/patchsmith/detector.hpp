#pragma once
// Victim-detector contract and the confidence loss the attack minimizes.
//
// Two detection views exist on purpose:
//  - detect(): thresholded + NMS'd detections for evaluation protocols.
//  - detect_var(): every raw candidate (no floor, no NMS) with objectness and
//    class probability as autodiff scalars.  The attack loss takes a max over
//    these, so the gradient stays alive even when nothing clears the
//    reporting threshold.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "patchsmith/autodiff.hpp"
#include "patchsmith/renderer.hpp"

namespace patchsmith {

struct Detection {
  BoundingBox box;
  double objectness = 0.0;                  // in [0,1]
  std::map<std::string, double> class_probs;  // class-id -> prob in [0,1]

  // Ranking score for a class: objectness times class probability.
  double confidence(const std::string& cls) const {
    auto it = class_probs.find(cls);
    return it == class_probs.end() ? 0.0 : objectness * it->second;
  }
};

// Differentiable counterpart; geometry stays plain (the loss only needs the
// confidence path), scores stay on the tape.
struct DetectionV {
  BoundingBox box;
  ad::Var objectness;
  std::map<std::string, ad::Var> class_probs;
};

class DetectorContract {
 public:
  virtual ~DetectorContract() = default;
  virtual std::string id() const = 0;
  virtual int input_size() const = 0;  // square side the detector expects
  virtual std::vector<std::string> classes() const = 0;
  virtual std::vector<Detection> detect(const Tensor& image) const = 0;
  virtual std::vector<DetectionV> detect_var(const ad::Var& image) const = 0;
};

inline double box_iou(const BoundingBox& a, const BoundingBox& b) {
  double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2;
  double ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
  double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2;
  double by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
  double ix = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  double iy = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  double inter = ix * iy;
  double uni = a.w * a.h + b.w * b.h - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

// Greedy non-maximum suppression by descending class confidence.
inline std::vector<Detection> nms(std::vector<Detection> dets, const std::string& cls,
                                  double iou_threshold = 0.5) {
  std::stable_sort(dets.begin(), dets.end(), [&](const Detection& a, const Detection& b) {
    return a.confidence(cls) > b.confidence(cls);
  });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (box_iou(d.box, k.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// Attack objective term: the highest person confidence in the scene.  An
// empty detection list scores 0 (nothing left to suppress).  A person class
// no detection knows about is a configuration error, not a silent zero.
inline double detector_loss(const std::vector<Detection>& dets, const std::string& person_class) {
  if (dets.empty()) return 0.0;
  bool known = false;
  double best = 0.0;
  for (const auto& d : dets) {
    auto it = d.class_probs.find(person_class);
    if (it == d.class_probs.end()) continue;
    known = true;
    best = std::max(best, d.objectness * it->second);
  }
  if (!known)
    throw ConfigError("detector_loss: class '" + person_class + "' unknown to these detections");
  return best;
}

inline ad::Var detector_loss(const std::vector<DetectionV>& dets,
                             const std::string& person_class) {
  if (dets.empty()) return ad::Var::scalar(0.0);
  const ad::Var* best = nullptr;
  double best_val = -1.0;
  std::vector<ad::Var> holder;
  holder.reserve(dets.size());
  for (const auto& d : dets) {
    auto it = d.class_probs.find(person_class);
    if (it == d.class_probs.end()) continue;
    holder.push_back(ad::mul(d.objectness, it->second));
    double v = holder.back().item();
    if (v > best_val) {
      best_val = v;
      best = &holder.back();
    }
  }
  if (!best)
    throw ConfigError("detector_loss: class '" + person_class + "' unknown to these detections");
  return *best;
}

}  // namespace patchsmith

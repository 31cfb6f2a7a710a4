#pragma once
// Scene rendering for expectation-over-transformations training and for
// evaluation: photometric + geometric patch transforms, and differentiable
// torso-anchored compositing onto person boxes.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "patchsmith/autodiff.hpp"
#include "patchsmith/rng.hpp"
#include "patchsmith/tensor.hpp"

namespace patchsmith {

// Axis-aligned box in normalized image coordinates (center, size in [0,1]).
struct BoundingBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
};

struct SceneSample {
  std::string id;
  Tensor image;                         // {3,H,W} in [0,1]
  std::vector<BoundingBox> person_boxes;  // placement anchors
};

// Uniform sampling ranges for the physical-condition transforms.
struct TransformRanges {
  double brightness_lo = -0.1, brightness_hi = 0.1;
  double contrast_lo = 0.8, contrast_hi = 1.2;
  double noise_lo = 0.0, noise_hi = 0.05;
  double rotation_deg_lo = -20.0, rotation_deg_hi = 20.0;
  double scale_lo = 0.9, scale_hi = 1.1;
};

inline TransformRanges identity_ranges() {
  return TransformRanges{0, 0, 1, 1, 0, 0, 0, 0, 1, 1};
}

struct TransformParams {
  double brightness_shift = 0.0;
  double contrast_gain = 1.0;
  double noise_amplitude = 0.0;
  double rotation_deg = 0.0;
  double scale_jitter = 1.0;
  std::uint64_t seed = 0;  // drives the additive-noise draw
};

inline TransformParams sample_transform(const TransformRanges& r, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x7f0a));
  TransformParams p;
  p.brightness_shift = rng.uniform(r.brightness_lo, r.brightness_hi);
  p.contrast_gain = rng.uniform(r.contrast_lo, r.contrast_hi);
  p.noise_amplitude = rng.uniform(r.noise_lo, r.noise_hi);
  p.rotation_deg = rng.uniform(r.rotation_deg_lo, r.rotation_deg_hi);
  p.scale_jitter = rng.uniform(r.scale_lo, r.scale_hi);
  p.seed = derive_seed(seed, 0x7f0b);
  if (p.contrast_gain <= 0.0) throw std::invalid_argument("sample_transform: contrast_gain <= 0");
  if (p.noise_amplitude < 0.0) throw std::invalid_argument("sample_transform: noise < 0");
  return p;
}

// Photometric then geometric transform of a patch:
//   pixel' = clamp(gain*(p - 0.5) + 0.5 + shift + noise, 0, 1)
// followed by rotation/scale about the patch center (bilinear, clamp-to-edge).
// Identity parameters return the patch bit-for-bit.
inline ad::Var apply_transform(const ad::Var& patch, const TransformParams& tp) {
  if (patch.value().rank() != 3) throw std::invalid_argument("apply_transform: wants {C,H,W}");
  if (tp.contrast_gain <= 0.0) throw std::invalid_argument("apply_transform: contrast_gain <= 0");
  if (tp.noise_amplitude < 0.0) throw std::invalid_argument("apply_transform: noise < 0");

  ad::Var out = patch;
  bool photometric = tp.contrast_gain != 1.0 || tp.brightness_shift != 0.0 ||
                     tp.noise_amplitude > 0.0;
  if (photometric) {
    out = ad::add_scalar(ad::scale(out, tp.contrast_gain),
                         0.5 - tp.contrast_gain * 0.5 + tp.brightness_shift);
    if (tp.noise_amplitude > 0.0) {
      Rng rng(tp.seed);
      Tensor noise = rng.normal_tensor(patch.value().shape());
      out = ad::scale_add(1.0, out, tp.noise_amplitude, ad::Var::leaf(noise));
    }
    out = ad::clamp01(out);
  }

  if (tp.rotation_deg != 0.0 || tp.scale_jitter != 1.0) {
    if (tp.scale_jitter <= 0.0) throw std::invalid_argument("apply_transform: scale <= 0");
    // Inverse map: output pixel -> source location (rotate by -theta, scale by 1/s)
    double th = tp.rotation_deg * 3.141592653589793238462643383279502884 / 180.0;
    double c = std::cos(th), s = std::sin(th);
    double inv = 1.0 / tp.scale_jitter;
    double cx = 0.5 * (patch.value().dim(2) - 1);
    double cy = 0.5 * (patch.value().dim(1) - 1);
    // x_src = inv*( c*(x-cx) + s*(y-cy)) + cx ; y_src = inv*(-s*(x-cx) + c*(y-cy)) + cy
    std::array<double, 6> m{inv * c, inv * s, cx - inv * (c * cx + s * cy),
                            -inv * s, inv * c, cy - inv * (-s * cx + c * cy)};
    out = ad::affine_sample(out, m);
  }
  return out;
}

inline Tensor apply_transform(const Tensor& patch, const TransformParams& tp) {
  return apply_transform(ad::Var::leaf(patch), tp).value();
}

// Where on a person the patch lands: a width fraction of the box, centered
// horizontally, vertical center a fraction of the box height from its top.
struct PlacementPolicy {
  double width_fraction = 0.65;
  double anchor_x = 0.5;
  double anchor_y = 0.45;
};

namespace renderdetail {
struct PasteRect {
  int x0 = 0, y0 = 0, w = 0, h = 0;
  bool valid = false;
};

inline PasteRect paste_rect(const BoundingBox& box, int img_h, int img_w, int patch_h,
                            int patch_w, const PlacementPolicy& pol) {
  PasteRect r;
  double box_w_px = box.w * img_w;
  double box_h_px = box.h * img_h;
  if (box_w_px <= 0.0 || box_h_px <= 0.0) return r;
  int w = std::max(1, static_cast<int>(std::lround(pol.width_fraction * box_w_px)));
  int h = std::max(1, static_cast<int>(std::lround(
                          pol.width_fraction * box_w_px * patch_h / patch_w)));
  double center_x = (box.cx + (pol.anchor_x - 0.5) * box.w) * img_w;
  double center_y = (box.cy - 0.5 * box.h + pol.anchor_y * box.h) * img_h;
  r.x0 = static_cast<int>(std::lround(center_x - 0.5 * w));
  r.y0 = static_cast<int>(std::lround(center_y - 0.5 * h));
  r.w = w;
  r.h = h;
  r.valid = true;
  return r;
}
}  // namespace renderdetail

// Composites the (already transformed) patch onto every person box by
// overwrite; regions falling outside the image are clipped.  Differentiable
// w.r.t. patch pixels inside the pasted regions.
inline ad::Var place_patch(const SceneSample& scene, const ad::Var& patch,
                           const PlacementPolicy& pol = {}) {
  const Tensor& img = scene.image;
  if (img.rank() != 3 || patch.value().rank() != 3 || img.dim(0) != patch.value().dim(0))
    throw std::invalid_argument("place_patch: channel mismatch");
  int H = img.dim(1), W = img.dim(2);
  int ph = patch.value().dim(1), pw = patch.value().dim(2);

  ad::Var out = ad::Var::leaf(img);
  for (const BoundingBox& box : scene.person_boxes) {
    auto r = renderdetail::paste_rect(box, H, W, ph, pw, pol);
    if (!r.valid) continue;
    ad::Var scaled = (r.h == ph && r.w == pw) ? patch : ad::bilinear_resize(patch, r.h, r.w);
    out = ad::paste3(out, scaled, r.y0, r.x0);
  }
  return out;
}

inline SceneSample place_patch_plain(const SceneSample& scene, const Tensor& patch,
                                     const PlacementPolicy& pol = {}) {
  SceneSample out = scene;
  out.image = place_patch(scene, ad::Var::leaf(patch), pol).value();
  return out;
}

// Full per-scene rendering: draw transform parameters from the seed, apply
// them to the patch, composite.  One draw per scene per call, so a batch of
// scenes sees independent transform instantiations.
inline ad::Var render_scene(const SceneSample& scene, const ad::Var& patch,
                            const TransformRanges& ranges, std::uint64_t seed,
                            const PlacementPolicy& pol = {}) {
  TransformParams tp = sample_transform(ranges, seed);
  return place_patch(scene, apply_transform(patch, tp), pol);
}

inline SceneSample render_scene_plain(const SceneSample& scene, const Tensor& patch,
                                      const TransformRanges& ranges, std::uint64_t seed,
                                      const PlacementPolicy& pol = {}) {
  SceneSample out = scene;
  out.image = render_scene(scene, ad::Var::leaf(patch), ranges, seed, pol).value();
  return out;
}

}  // namespace patchsmith

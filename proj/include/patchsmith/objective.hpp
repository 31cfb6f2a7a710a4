#pragma once
// The attack objective: mean suppressed-person confidence over a scene batch
// plus a smoothness penalty, differentiable end to end from the patch latent
// through sampling, decoding, placement and detection.

#include <cmath>
#include <string>
#include <vector>

#include "patchsmith/autodiff.hpp"
#include "patchsmith/detector.hpp"
#include "patchsmith/diffusion.hpp"
#include "patchsmith/generator.hpp"
#include "patchsmith/renderer.hpp"

namespace patchsmith {

inline constexpr double kTvEpsilon = 1e-8;

// Total variation with interior-only terms: a pixel contributes only when
// both its right and its down neighbor exist, so single-row/-column patches
// have no terms at all and score exactly zero.  The epsilon inside the root
// keeps the gradient finite on flat regions.
inline ad::Var tv_loss(const ad::Var& patch) {
  const Tensor& v = patch.value();
  if (v.rank() != 3) throw std::invalid_argument("tv_loss: expected {C,H,W}");
  int H = v.dim(1), W = v.dim(2);
  if (H < 2 && W < 2) throw std::invalid_argument("tv_loss: patch smaller than 2x2");
  if (H < 2 || W < 2) return ad::Var::scalar(0.0);  // no position has both neighbors
  ad::Var base = ad::crop3(patch, 0, H - 1, 0, W - 1);
  ad::Var right = ad::crop3(patch, 0, H - 1, 1, W - 1);
  ad::Var down = ad::crop3(patch, 1, H - 1, 0, W - 1);
  ad::Var dr = ad::sub(right, base);
  ad::Var dd = ad::sub(down, base);
  return ad::sum(ad::sqrt_v(ad::add_scalar(ad::add(ad::square(dr), ad::square(dd)), kTvEpsilon)));
}

inline double tv_loss(const Tensor& patch) { return tv_loss(ad::Var::leaf(patch)).item(); }

// Everything the objective needs bound together; non-owning.
struct BoundStack {
  const NoisePredictor* predictor = nullptr;
  const GenerationCodec* codec = nullptr;
  std::vector<const DetectorContract*> detectors;
  const NoiseSchedule* schedule = nullptr;
  ConditionRef condition;
  std::string person_class = "person";
  TransformRanges ranges;
  PlacementPolicy placement;

  void validate() const {
    if (!predictor || !codec || !schedule)
      throw ConfigError("objective: predictor, codec and schedule must all be bound");
    if (detectors.empty()) throw ConfigError("objective: at least one detector required");
    for (const auto* d : detectors)
      if (!d) throw ConfigError("objective: null detector in stack");
  }
};

struct LossBreakdown {
  double det_term = 0.0;  // mean max-confidence across scenes and detectors
  double tv_term = 0.0;
  double lambda = 0.0;
  double total = 0.0;     // det_term + lambda * tv_term
};

namespace objdetail {

// Runs one pipeline stage, labeling any failure with where it happened while
// keeping the error type (the CLI maps types onto exit codes).
template <typename F>
auto stage(const char* label, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(label) + ": " + e.what());
  } catch (const MissingAsset& e) {
    throw MissingAsset(std::string(label) + ": " + e.what());
  } catch (const NumericFailure& e) {
    throw NumericFailure(std::string(label) + ": " + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string(label) + ": " + e.what());
  }
}

}  // namespace objdetail

// Mean detection confidence over scenes x detectors on images carrying the
// generated patch, plus lambda * smoothness.  Differentiable w.r.t. `latent`.
// Per-scene transform draws derive from sampler_cfg.seed, so one seed pins
// the entire stochastic pipeline.
inline ad::Var batch_objective(const std::vector<SceneSample>& scenes, const ad::Var& latent,
                               const SamplerConfig& sampler_cfg, const BoundStack& stack,
                               double lambda, LossBreakdown* breakdown = nullptr) {
  stack.validate();
  if (scenes.empty()) throw ConfigError("objective: scene batch is empty");
  if (lambda < 0.0) throw ConfigError("objective: lambda < 0");

  ad::Var pixels = objdetail::stage("sample", [&] {
    ad::Var z0 = aps_sample(latent, stack.condition, sampler_cfg, *stack.predictor,
                            *stack.schedule);
    return stack.codec->decode(z0);
  });

  ad::Var det_sum = ad::Var::scalar(0.0);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    ad::Var rendered = objdetail::stage("render", [&] {
      return render_scene(scenes[i], pixels, stack.ranges,
                          derive_seed(sampler_cfg.seed, 1000 + i), stack.placement);
    });
    for (const auto* det : stack.detectors) {
      const Tensor& img = rendered.value();
      if (img.dim(1) != det->input_size() || img.dim(2) != det->input_size())
        throw ConfigError("objective: scene size " + img.shape_string() +
                          " does not match detector input " +
                          std::to_string(det->input_size()));
      ad::Var loss = objdetail::stage("detect", [&] {
        return detector_loss(det->detect_var(rendered), stack.person_class);
      });
      det_sum = ad::add(det_sum, loss);
    }
  }
  double count = static_cast<double>(scenes.size() * stack.detectors.size());
  ad::Var det_mean = ad::scale(det_sum, 1.0 / count);
  ad::Var tv = tv_loss(pixels);
  ad::Var total = ad::add(det_mean, ad::scale(tv, lambda));

  if (!std::isfinite(total.item()))
    throw NumericFailure("objective: non-finite total (latent digest " +
                         hex64(tensor_digest(latent.value())) + ")");
  if (breakdown) {
    breakdown->det_term = det_mean.item();
    breakdown->tv_term = tv.item();
    breakdown->lambda = lambda;
    breakdown->total = total.item();
  }
  return total;
}

// Plain driver: evaluates the breakdown and, when grad_out is given, the
// gradient of total w.r.t. the latent value.
inline LossBreakdown batch_objective(const std::vector<SceneSample>& scenes,
                                     const LatentState& patch_latent,
                                     const SamplerConfig& sampler_cfg, const BoundStack& stack,
                                     double lambda, Tensor* grad_out = nullptr) {
  if (patch_latent.t != 0)
    throw std::invalid_argument("batch_objective: latent must be at t = 0");
  BoundStack bound = stack;
  if (bound.condition.unconditional()) bound.condition = patch_latent.condition;
  LossBreakdown out;
  if (grad_out) {
    ad::Var latent = ad::Var::param(patch_latent.value);
    ad::Var total = batch_objective(scenes, latent, sampler_cfg, bound, lambda, &out);
    ad::backward(total);
    *grad_out = latent.grad();
  } else {
    batch_objective(scenes, ad::Var::leaf(patch_latent.value), sampler_cfg, bound, lambda, &out);
  }
  return out;
}

}  // namespace patchsmith

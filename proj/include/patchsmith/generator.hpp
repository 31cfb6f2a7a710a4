#pragma once
// Generator-side interfaces: conditioning handles, the noise-predictor
// contract every sampler consumes, the latent<->pixel codec, and the
// analytically solvable point-mass predictor used as a test oracle.

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchsmith/autodiff.hpp"
#include "patchsmith/schedule.hpp"
#include "patchsmith/tensor.hpp"

namespace patchsmith {

// Opaque conditioning handle.  Toy predictors resolve `prompt` against their
// label vocabulary; `embedding_id` addresses a label directly.  Both unset
// means unconditional.
struct ConditionRef {
  std::string prompt;
  int embedding_id = -1;

  bool unconditional() const { return prompt.empty() && embedding_id < 0; }
};

inline ConditionRef unconditional_ref() { return {}; }

// A denoiser: predicts the noise component of x_t at timestep t (1..T).
// predict() runs on autodiff Vars so samplers built on it stay end-to-end
// differentiable; pass a plain leaf when no gradient is needed and the op
// graph short-circuits away.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;

  virtual std::vector<int> latent_shape() const = 0;
  virtual int timesteps() const = 0;
  // Whether an unconditional branch exists (needed for guidance weights != 1).
  virtual bool supports_unconditional() const = 0;

  virtual ad::Var predict(const ad::Var& x_t, int t, const ConditionRef& cond) const = 0;

  Tensor predict_plain(const Tensor& x_t, int t, const ConditionRef& cond = {}) const {
    return predict(ad::Var::leaf(x_t), t, cond).value();
  }

 protected:
  void check_input(const Tensor& x, int t) const {
    if (x.shape() != latent_shape())
      throw std::invalid_argument("predictor: latent shape mismatch, got " + x.shape_string());
    if (t < 1 || t > timesteps())
      throw std::invalid_argument("predictor: t out of range (expects 1..T)");
  }
};

// Latent <-> pixel mapping.  The pipeline optimizes latents; detectors and
// artifacts live in pixel space.
class GenerationCodec {
 public:
  virtual ~GenerationCodec() = default;
  virtual std::vector<int> latent_shape() const = 0;
  virtual std::vector<int> pixel_shape() const = 0;
  virtual ad::Var decode(const ad::Var& latent) const = 0;
  virtual Tensor encode(const Tensor& pixels) const = 0;

  Tensor decode_plain(const Tensor& latent) const { return decode(ad::Var::leaf(latent)).value(); }
};

// Latents are pixels: decode clamps to the displayable range, encode is the
// identity.  decode(encode(p)) == p exactly for p already in [0,1].
class IdentityCodec : public GenerationCodec {
 public:
  explicit IdentityCodec(std::vector<int> shape) : shape_(std::move(shape)) {
    if (shape_.size() != 3) throw std::invalid_argument("IdentityCodec: expects {C,H,W}");
  }
  std::vector<int> latent_shape() const override { return shape_; }
  std::vector<int> pixel_shape() const override { return shape_; }
  ad::Var decode(const ad::Var& latent) const override {
    if (latent.shape() != shape_)
      throw std::invalid_argument("IdentityCodec::decode: shape mismatch");
    return ad::clamp01(latent);
  }
  Tensor encode(const Tensor& pixels) const override {
    if (pixels.shape() != shape_)
      throw std::invalid_argument("IdentityCodec::encode: shape mismatch");
    return pixels;
  }

 private:
  std::vector<int> shape_;
};

// Oracle predictor for a data distribution concentrated at a single image.
// For q = delta(target), the exact posterior noise is
//   eps(x_t, t) = (x_t - sqrt(abar_t) * target) / sqrt(1 - abar_t),
// so any correct sampler must reproduce `target` exactly.  Rejects t = 0
// (the formula divides by sqrt(1 - abar_0) = 0).
class PointMassPredictor : public NoisePredictor {
 public:
  PointMassPredictor(Tensor target, NoiseSchedule schedule)
      : target_(std::move(target)), sched_(std::move(schedule)) {}

  std::vector<int> latent_shape() const override { return target_.shape(); }
  int timesteps() const override { return sched_.T; }
  bool supports_unconditional() const override { return true; }

  ad::Var predict(const ad::Var& x_t, int t, const ConditionRef&) const override {
    check_input(x_t.value(), t);
    double s1 = sched_.sqrt_abar(t);
    double s2 = sched_.sqrt_one_minus_abar(t);
    return ad::scale_add(1.0 / s2, x_t, -s1 / s2, ad::Var::leaf(target_));
  }

  const Tensor& target() const { return target_; }

 private:
  Tensor target_;
  NoiseSchedule sched_;
};

// Wraps another predictor and counts invocations; lets tests pin down how
// many denoiser evaluations a sampling configuration performs.
class CountingPredictor : public NoisePredictor {
 public:
  explicit CountingPredictor(const NoisePredictor& inner) : inner_(inner) {}

  std::vector<int> latent_shape() const override { return inner_.latent_shape(); }
  int timesteps() const override { return inner_.timesteps(); }
  bool supports_unconditional() const override { return inner_.supports_unconditional(); }

  ad::Var predict(const ad::Var& x_t, int t, const ConditionRef& cond) const override {
    ++calls_;
    called_at_.push_back(t);
    return inner_.predict(x_t, t, cond);
  }

  int calls() const { return calls_; }
  const std::vector<int>& called_at() const { return called_at_; }
  void reset() {
    calls_ = 0;
    called_at_.clear();
  }

 private:
  const NoisePredictor& inner_;
  mutable int calls_ = 0;
  mutable std::vector<int> called_at_;
};

}  // namespace patchsmith

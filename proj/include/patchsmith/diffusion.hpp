#pragma once
// Sampling machinery: forward diffusion, ancestral (DDPM) sampling, the
// deterministic DDIM update, classifier-free guidance, and the strided
// partial-denoise sampler the optimizer differentiates through.

#include <cstdint>
#include <optional>

#include "patchsmith/autodiff.hpp"
#include "patchsmith/generator.hpp"
#include "patchsmith/rng.hpp"
#include "patchsmith/schedule.hpp"

namespace patchsmith {

// A latent tensor tagged with its noise level; t = 0 means clean.
struct LatentState {
  Tensor value;
  int t = 0;
  ConditionRef condition;
};

struct SamplerConfig {
  int t_start = 500;       // noise level injected before re-denoising
  int s = 166;             // stride between denoising steps
  double sigma = 0.0;      // stochasticity of each update; 0 = deterministic
  double cfg_weight = 1.0; // guidance strength; 1 = conditional prediction only
  std::uint64_t seed = 0;  // all sampler randomness derives from this
};

// ---------------------------------------------------------------------------
// Forward diffusion q(x_t | x_0): x_t = sqrt(abar_t) x_0 + sqrt(1-abar_t) z
// ---------------------------------------------------------------------------

inline ad::Var forward_diffuse(const ad::Var& x0, int t, const Tensor& noise,
                               const NoiseSchedule& ns) {
  ns.check_t(t, 0);
  require_same_shape(x0.value(), noise, "forward_diffuse");
  if (t == 0) return x0;  // no noise injected at level zero
  return ad::scale_add(ns.sqrt_abar(t), x0, ns.sqrt_one_minus_abar(t),
                       ad::Var::leaf(noise));
}

inline Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& noise,
                              const NoiseSchedule& ns) {
  return forward_diffuse(ad::Var::leaf(x0), t, noise, ns).value();
}

inline LatentState forward_diffuse(const LatentState& x0, int t, const Tensor& noise,
                                   const NoiseSchedule& ns) {
  if (x0.t != 0) throw std::invalid_argument("forward_diffuse: input must be at t = 0");
  return LatentState{forward_diffuse(x0.value, t, noise, ns), t, x0.condition};
}

// ---------------------------------------------------------------------------
// Classifier-free guidance: eps = eps_u + w * (eps_c - eps_u)
// ---------------------------------------------------------------------------

// w == 1 or an unconditional request short-circuits to a single predictor
// call, so guidance-off configurations keep the bare call count.
inline ad::Var cfg_predict(const NoisePredictor& p, const ad::Var& x_t, int t,
                           const ConditionRef& cond, double w) {
  if (w == 1.0 || cond.unconditional()) return p.predict(x_t, t, cond);
  if (!p.supports_unconditional())
    throw ConfigError("cfg_predict: guidance weight != 1 needs an unconditional branch");
  ad::Var eps_c = p.predict(x_t, t, cond);
  ad::Var eps_u = p.predict(x_t, t, unconditional_ref());
  return ad::scale_add(1.0 - w, eps_u, w, eps_c);
}

inline Tensor cfg_predict(const NoisePredictor& p, const Tensor& x_t, int t,
                          const ConditionRef& cond, double w) {
  return cfg_predict(p, ad::Var::leaf(x_t), t, cond, w).value();
}

// ---------------------------------------------------------------------------
// DDIM update, generalized to an arbitrary earlier timestep t_prev < t:
//   x_hat0 = (x_t - sqrt(1-abar_t) eps) / sqrt(abar_t)
//   x_prev = sqrt(abar_prev) x_hat0 + sqrt(1-abar_prev-sigma^2) eps + sigma z
// t_prev = 0 collapses to the clean-image estimate x_hat0.
// ---------------------------------------------------------------------------

inline ad::Var ddim_step_to(const ad::Var& x_t, int t, int t_prev, const ad::Var& eps,
                            const NoiseSchedule& ns, double sigma = 0.0,
                            const Tensor* noise = nullptr) {
  ns.check_t(t, 1);
  if (t_prev < 0 || t_prev >= t) throw std::invalid_argument("ddim_step_to: need 0 <= t_prev < t");
  require_same_shape(x_t.value(), eps.value(), "ddim_step_to");
  if (sigma < 0.0) throw std::invalid_argument("ddim_step_to: sigma < 0");
  double var_prev = 1.0 - ns.abar(t_prev);
  if (sigma * sigma > var_prev + 1e-15)
    throw std::invalid_argument("ddim_step_to: sigma^2 exceeds 1 - abar(t_prev)");

  double sa_t = ns.sqrt_abar(t);
  double s1m_t = ns.sqrt_one_minus_abar(t);
  double sa_p = ns.sqrt_abar(t_prev);
  double dir = std::sqrt(std::max(0.0, var_prev - sigma * sigma));

  // sqrt(abar_prev) * x_hat0 expanded so the whole update is two fused axpys
  ad::Var out = ad::scale_add(sa_p / sa_t, x_t, dir - sa_p * s1m_t / sa_t, eps);
  if (sigma > 0.0) {
    if (!noise) throw std::invalid_argument("ddim_step_to: sigma > 0 needs a noise tensor");
    require_same_shape(x_t.value(), *noise, "ddim_step_to noise");
    out = ad::scale_add(1.0, out, sigma, ad::Var::leaf(*noise));
  }
  return out;
}

// Single-step form (t -> t-1), the textbook update.
inline Tensor ddim_step(const Tensor& x_t, int t, const Tensor& eps, const NoiseSchedule& ns,
                        double sigma = 0.0, const Tensor* noise = nullptr) {
  return ddim_step_to(ad::Var::leaf(x_t), t, t - 1, ad::Var::leaf(eps), ns, sigma, noise).value();
}

// ---------------------------------------------------------------------------
// Ancestral (DDPM) sampling from pure noise; small-variance choice
// sigma_t = sqrt(beta_t).  Inference only - no gradients.
// ---------------------------------------------------------------------------

inline LatentState ddpm_sample(const NoisePredictor& p, const NoiseSchedule& ns,
                               std::uint64_t seed, const ConditionRef& cond = {},
                               double cfg_weight = 1.0) {
  Rng rng(derive_seed(seed, 0xdd9e));
  Tensor x = rng.normal_tensor(p.latent_shape());
  for (int t = ns.T; t >= 1; --t) {
    Tensor eps = cfg_predict(p, x, t, cond, cfg_weight);
    double a = ns.alpha_at(t);
    double b = ns.beta_at(t);
    double k = b / ns.sqrt_one_minus_abar(t);
    for (std::int64_t i = 0; i < x.numel(); ++i)
      x[i] = (x[i] - k * eps[i]) / std::sqrt(a);
    if (t > 1) {
      double sig = std::sqrt(b);
      for (std::int64_t i = 0; i < x.numel(); ++i) x[i] += sig * rng.normal();
    }
  }
  return LatentState{std::move(x), 0, cond};
}

// ---------------------------------------------------------------------------
// Strided partial-denoise sampler.
//
// Starting from a clean latent x0 (or pure noise when absent), inject noise
// to level t_start, then walk down the schedule in strides of s with the
// deterministic update above, and finish with a direct jump to t = 0.  The
// jump costs one predictor call, so the total is floor over the strided
// ladder plus one; with guidance weight 1 that is exactly the number of
// denoiser evaluations.  The Var overload is differentiable w.r.t. x0.
// ---------------------------------------------------------------------------

namespace detail {
inline void check_sampler_config(const SamplerConfig& cfg, const NoiseSchedule& ns) {
  if (cfg.s < 1) throw std::invalid_argument("aps_sample: stride must be >= 1");
  if (cfg.t_start < 1 || cfg.t_start > ns.T)
    throw std::invalid_argument("aps_sample: t_start out of range (1..T)");
  if (cfg.sigma < 0.0) throw std::invalid_argument("aps_sample: sigma < 0");
}

// Strided walk down the schedule from (x, t_start), then a final jump to 0.
inline ad::Var aps_denoise(ad::Var x, const ConditionRef& cond, const SamplerConfig& cfg,
                           const NoisePredictor& p, const NoiseSchedule& ns, Rng& rng) {
  int t = cfg.t_start;
  while (t >= 2 * cfg.s) {
    ad::Var eps = cfg_predict(p, x, t, cond, cfg.cfg_weight);
    if (cfg.sigma > 0.0) {
      Tensor z = rng.normal_tensor(x.value().shape());
      x = ddim_step_to(x, t, t - cfg.s, eps, ns, cfg.sigma, &z);
    } else {
      x = ddim_step_to(x, t, t - cfg.s, eps, ns);
    }
    t -= cfg.s;
  }
  // Final clean estimate: one more prediction, deterministic jump to zero.
  ad::Var eps = cfg_predict(p, x, t, cond, cfg.cfg_weight);
  return ddim_step_to(x, t, 0, eps, ns);
}
}  // namespace detail

inline ad::Var aps_sample(const ad::Var& x0, const ConditionRef& cond,
                          const SamplerConfig& cfg, const NoisePredictor& p,
                          const NoiseSchedule& ns) {
  detail::check_sampler_config(cfg, ns);
  if (x0.value().shape() != p.latent_shape())
    throw std::invalid_argument("aps_sample: latent shape mismatch");
  Rng rng(derive_seed(cfg.seed, 0xa957));
  ad::Var x = forward_diffuse(x0, cfg.t_start, rng.normal_tensor(x0.value().shape()), ns);
  return detail::aps_denoise(std::move(x), cond, cfg, p, ns, rng);
}

// Sampling from scratch under a condition: the walk starts at exactly
// N(0, I), which is only well-posed when the configured noising level is the
// top of the chain.
inline LatentState aps_sample_from_noise(const ConditionRef& cond, const SamplerConfig& cfg,
                                         const NoisePredictor& p, const NoiseSchedule& ns) {
  detail::check_sampler_config(cfg, ns);
  if (cfg.t_start != ns.T)
    throw std::invalid_argument("aps_sample: sampling from scratch requires t_start = T");
  Rng rng(derive_seed(cfg.seed, 0xa957));
  ad::Var x = ad::Var::leaf(rng.normal_tensor(p.latent_shape()));
  Tensor out = detail::aps_denoise(std::move(x), cond, cfg, p, ns, rng).value();
  return LatentState{std::move(out), 0, cond};
}

// Plain driver used for artifact generation.  A missing x0 means "sample
// from scratch" without a condition.
inline LatentState aps_sample(const std::optional<LatentState>& x0, const SamplerConfig& cfg,
                              const NoisePredictor& p, const NoiseSchedule& ns) {
  if (!x0) return aps_sample_from_noise(ConditionRef{}, cfg, p, ns);
  detail::check_sampler_config(cfg, ns);
  if (x0->t != 0) throw std::invalid_argument("aps_sample: x0 must be at t = 0");
  Tensor out = aps_sample(ad::Var::leaf(x0->value), x0->condition, cfg, p, ns).value();
  return LatentState{std::move(out), 0, x0->condition};
}

}  // namespace patchsmith

#pragma once
// Outer optimization loop: initialize a patch latent from pure noise, descend
// the batch objective with Adam under a quiet-epoch learning-rate decay, keep
// the best latent by a fixed validation split, and emit checkpoints/traces.

#include <algorithm>
#include <chrono>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "patchsmith/adam.hpp"
#include "patchsmith/objective.hpp"
#include "patchsmith/png_io.hpp"
#include "patchsmith/weights_io.hpp"

namespace patchsmith {

struct OptimizeConfig {
  int max_iterations = 1000;
  int batch_size = 8;     // scenes per gradient step
  double lr = 0.005;
  // The decay rule's factor, window and floor are implementation choices
  // (config-exposed); the trigger threshold and initial rate are not.
  double lr_decay_factor = 0.5;
  int lr_patience = 10;   // consecutive quiet epochs before a decay
  double loss_delta_threshold = 1e-4;
  double lambda = 0.1;    // smoothness weight in the objective
  SamplerConfig sampler;  // per-iteration seeds derive from `seed`, not this one
  std::uint64_t seed = 0;

  double val_fraction = 0.1;        // held-out share for best-checkpoint selection
  int checkpoint_every = 0;         // iterations between artifact dumps; 0 = none
  std::filesystem::path out_dir;    // empty: no files are written

  void validate() const {
    if (max_iterations < 0) throw ConfigError("optimize: max_iterations < 0");
    if (batch_size < 1) throw ConfigError("optimize: batch_size < 1");
    if (!(lr > 0.0)) throw ConfigError("optimize: lr must be positive");
    if (!(lr_decay_factor > 0.0) || !(lr_decay_factor < 1.0))
      throw ConfigError("optimize: lr_decay_factor must lie in (0,1)");
    if (lr_patience < 1) throw ConfigError("optimize: lr_patience < 1");
    if (loss_delta_threshold < 0.0) throw ConfigError("optimize: loss_delta_threshold < 0");
    if (lambda < 0.0) throw ConfigError("optimize: lambda < 0");
    if (!(val_fraction >= 0.0) || !(val_fraction < 1.0))
      throw ConfigError("optimize: val_fraction must lie in [0,1)");
    if (checkpoint_every < 0) throw ConfigError("optimize: checkpoint_every < 0");
  }
};

struct TraceRow {
  int iteration = 0;
  LossBreakdown loss;
  double lr = 0.0;
  double seconds = 0.0;  // wall-clock spent on this iteration
};

struct CheckpointRef {
  int iteration = 0;
  std::uint64_t latent_digest = 0;
  double val_total = 0.0;
};

struct OptimizeTrace {
  std::vector<TraceRow> rows;
  std::vector<CheckpointRef> checkpoints;  // includes epoch-end evaluations
  double init_val_total = 0.0;
  double best_val_total = 0.0;
  int best_iteration = 0;
};

namespace optdetail {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

inline std::string checkpoint_stem(int iter) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%06d", iter);
  return buf;
}

}  // namespace optdetail

// Trace file with one row per iteration; stable column set, shortest
// round-trip doubles, no timing (wall-clock stays in the in-memory trace).
inline void write_trace_csv(const std::filesystem::path& path, const OptimizeTrace& trace) {
  std::string out = "iteration,det_term,tv_term,total,lr\n";
  for (const auto& r : trace.rows) {
    out += std::to_string(r.iteration);
    out += ',';
    out += optdetail::format_double(r.loss.det_term);
    out += ',';
    out += optdetail::format_double(r.loss.tv_term);
    out += ',';
    out += optdetail::format_double(r.loss.total);
    out += ',';
    out += optdetail::format_double(r.lr);
    out += '\n';
  }
  write_text_file(path, out);
}

// Fresh starting point: denoise pure noise under the patch condition at the
// top of the chain.  Requires the sampler to be configured for a full walk.
inline LatentState init_patch(const SamplerConfig& cfg, const ConditionRef& condition,
                              const NoisePredictor& predictor, const NoiseSchedule& schedule) {
  if (cfg.t_start != schedule.T)
    throw ConfigError("init_patch: a from-scratch walk requires t_start = T (got t_start " +
                      std::to_string(cfg.t_start) + ", T " + std::to_string(schedule.T) + ")");
  return aps_sample_from_noise(condition, cfg, predictor, schedule);
}

// The training-time patch realization for a latent: re-noise to t_start,
// denoise back, decode to pixels.  Exposed standalone so evaluation sees
// exactly what the optimizer saw.
inline Tensor resample_patch(const LatentState& latent, const SamplerConfig& cfg,
                             const NoisePredictor& predictor, const GenerationCodec& codec,
                             const NoiseSchedule& schedule) {
  if (latent.t != 0) throw std::invalid_argument("resample_patch: latent must be at t = 0");
  ad::Var z0 = aps_sample(ad::Var::leaf(latent.value), latent.condition, cfg, predictor, schedule);
  return codec.decode(z0).value();
}

// Adam descent on the latent with per-iteration sampler seeds, a quiet-epoch
// learning-rate decay, and best-latent selection on a held-out split.
inline std::pair<LatentState, OptimizeTrace> optimize_patch(const LatentState& init,
                                                            const std::vector<SceneSample>& scenes,
                                                            const OptimizeConfig& cfg,
                                                            const BoundStack& stack) {
  cfg.validate();
  stack.validate();
  if (scenes.empty()) throw ConfigError("optimize: scene corpus is empty");
  if (init.t != 0) throw std::invalid_argument("optimize: init latent must be at t = 0");

  BoundStack bound = stack;
  if (bound.condition.unconditional()) bound.condition = init.condition;

  // Fixed validation split: held-out scenes select the returned latent.
  std::vector<const SceneSample*> train_ptr, val_ptr;
  {
    Rng split_rng(derive_seed(cfg.seed, 0x5a117));
    std::vector<int> order = split_rng.permutation(static_cast<int>(scenes.size()));
    std::size_t n_val = static_cast<std::size_t>(cfg.val_fraction * scenes.size() + 0.5);
    if (scenes.size() >= 2 && cfg.val_fraction > 0.0 && n_val == 0) n_val = 1;
    n_val = std::min(n_val, scenes.size() - 1);
    for (std::size_t k = 0; k < order.size(); ++k)
      (k < n_val ? val_ptr : train_ptr).push_back(&scenes[order[k]]);
    if (val_ptr.empty()) val_ptr = train_ptr;  // tiny corpus: validate on train
  }
  std::vector<SceneSample> val_scenes;
  val_scenes.reserve(val_ptr.size());
  for (const auto* s : val_ptr) val_scenes.push_back(*s);

  const std::uint64_t val_seed = derive_seed(cfg.seed, 0x11a1);
  auto val_objective = [&](const Tensor& latent_value) {
    SamplerConfig vcfg = cfg.sampler;
    vcfg.seed = val_seed;
    LatentState probe{latent_value, 0, bound.condition};
    return batch_objective(val_scenes, probe, vcfg, bound, cfg.lambda).total;
  };

  ad::Var latent = ad::Var::param(init.value);
  Adam adam({latent}, {cfg.lr, 0.9, 0.999, 1e-8});

  OptimizeTrace trace;
  trace.init_val_total = val_objective(init.value);
  Tensor best = init.value;
  trace.best_val_total = trace.init_val_total;
  trace.best_iteration = 0;

  const bool writing = !cfg.out_dir.empty();
  if (writing) std::filesystem::create_directories(cfg.out_dir);

  auto consider = [&](int iter, double val_total) {
    if (val_total < trace.best_val_total) {
      trace.best_val_total = val_total;
      trace.best_iteration = iter;
      best = latent.value();
    }
  };

  auto checkpoint = [&](int iter, double val_total) {
    trace.checkpoints.push_back({iter, tensor_digest(latent.value()), val_total});
    if (!writing) return;
    std::string stem = optdetail::checkpoint_stem(iter);
    save_named_tensors(cfg.out_dir / (stem + ".psw"), {{"latent", latent.value()}});
    Tensor pixels = resample_patch({latent.value(), 0, bound.condition}, cfg.sampler,
                                   *bound.predictor, *bound.codec, *bound.schedule);
    write_png_tensor(cfg.out_dir / (stem + ".png"), pixels);
  };

  // Validation passes run on the post-step latent, so a divergence surfaces
  // here as readily as in the training step; label either with the iteration.
  auto val_at = [&](int iter) {
    try {
      return val_objective(latent.value());
    } catch (const NumericFailure& e) {
      throw NumericFailure("iteration " + std::to_string(iter) + ": " + e.what());
    }
  };

  Rng batch_rng(derive_seed(cfg.seed, 0xba7c4));
  const int iters_per_epoch = std::max(
      1, static_cast<int>((train_ptr.size() + cfg.batch_size - 1) /
                          static_cast<std::size_t>(cfg.batch_size)));

  double prev_epoch_mean = 0.0;
  bool have_prev_epoch = false;
  int quiet_epochs = 0;
  double epoch_accum = 0.0;
  int epoch_count = 0;

  for (int iter = 1; iter <= cfg.max_iterations; ++iter) {
    auto started = std::chrono::steady_clock::now();

    std::vector<SceneSample> batch;
    batch.reserve(cfg.batch_size);
    for (int k = 0; k < cfg.batch_size; ++k)
      batch.push_back(*train_ptr[batch_rng.next_u64() % train_ptr.size()]);

    SamplerConfig step_cfg = cfg.sampler;
    step_cfg.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(iter));

    LossBreakdown bd;
    adam.zero_grad();
    ad::Var total = [&] {
      try {
        return batch_objective(batch, latent, step_cfg, bound, cfg.lambda, &bd);
      } catch (const NumericFailure& e) {
        throw NumericFailure("iteration " + std::to_string(iter) + ": " + e.what());
      }
    }();
    ad::backward(total);
    adam.step();

    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    trace.rows.push_back({iter, bd, adam.lr(), secs});

    epoch_accum += bd.total;
    ++epoch_count;
    bool epoch_end = (iter % iters_per_epoch == 0) || iter == cfg.max_iterations;
    if (epoch_end) {
      double epoch_mean = epoch_accum / epoch_count;
      if (have_prev_epoch && std::abs(epoch_mean - prev_epoch_mean) < cfg.loss_delta_threshold) {
        if (++quiet_epochs >= cfg.lr_patience) {
          adam.set_lr(adam.lr() * cfg.lr_decay_factor);
          quiet_epochs = 0;
        }
      } else {
        quiet_epochs = 0;
      }
      prev_epoch_mean = epoch_mean;
      have_prev_epoch = true;
      epoch_accum = 0.0;
      epoch_count = 0;

      consider(iter, val_at(iter));
    }

    if (cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0) {
      double v = val_at(iter);
      consider(iter, v);
      checkpoint(iter, v);
    }
  }

  LatentState out{std::move(best), 0, bound.condition};
  if (writing) {
    Tensor pixels = resample_patch(out, cfg.sampler, *bound.predictor, *bound.codec,
                                   *bound.schedule);
    write_png_tensor(cfg.out_dir / "patch_final.png", pixels);
    save_named_tensors(cfg.out_dir / "patch_final.psw", {{"latent", out.value}});
    write_trace_csv(cfg.out_dir / "trace.csv", trace);
  }
  return {std::move(out), std::move(trace)};
}

}  // namespace patchsmith

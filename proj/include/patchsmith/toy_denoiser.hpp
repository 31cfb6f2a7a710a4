#pragma once
// Small trainable noise predictor for end-to-end tests.  The architecture is
// a per-timestep linear head over [x_t, class template] whose coefficient
// basis contains the exact single-image denoising solution, plus a
// zero-initialized convolutional correction for structure the template
// cannot carry.  A discrete label vocabulary stands in for text
// conditioning; label dropout during training fills in the unconditional
// branch that guidance weights != 1 require.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "patchsmith/adam.hpp"
#include "patchsmith/autodiff.hpp"
#include "patchsmith/common.hpp"
#include "patchsmith/diffusion.hpp"
#include "patchsmith/generator.hpp"
#include "patchsmith/rng.hpp"
#include "patchsmith/schedule.hpp"

namespace patchsmith {

struct LabeledImage {
  Tensor image;       // {C,H,W}, values in [0,1]
  std::string label;  // empty: contributes to the unconditional branch only
};

struct ToyDenoiserConfig {
  int train_steps = 1500;
  int batch_size = 4;
  double lr = 0.02;            // annealed to 1% of itself over the run
  double label_dropout = 0.1;  // share of draws trained as unconditional
  int hidden_channels = 8;
  // L2 penalty on the convolution weights only.  The correction must not
  // absorb structure the linear head and templates can represent: whatever it
  // soaks up on-distribution it extrapolates badly once a sampling walk
  // drifts, so it pays rent for every coefficient it keeps.
  double weight_decay = 1e-2;
  std::uint64_t seed = 0;

  void validate() const {
    if (train_steps < 0) throw ConfigError("toy denoiser: train_steps < 0");
    if (batch_size < 1) throw ConfigError("toy denoiser: batch_size < 1");
    if (!(lr > 0.0)) throw ConfigError("toy denoiser: lr must be positive");
    if (label_dropout < 0.0 || label_dropout > 1.0)
      throw ConfigError("toy denoiser: label_dropout outside [0,1]");
    if (hidden_channels < 1) throw ConfigError("toy denoiser: hidden_channels < 1");
    if (weight_decay < 0.0) throw ConfigError("toy denoiser: weight_decay < 0");
  }
};

struct ToyDenoiserMeta {
  int steps_run = 0;
  double last_step_loss = 0.0;  // training loss of the final step (0 if none ran)
  double final_loss = 0.0;      // noise-prediction MSE on a fixed probe batch
};

// The model predicts the clean image and converts to noise through the exact
// identity eps = (x_t - sqrt(abar) x0) / sqrt(1-abar):
//   x0_hat(x_t, t, label) = Template[label] + CNN(x_t, Template[label], t)
//   eps_hat = x_t / sqrt(1-abar_t) - x0_hat * sqrt(abar_t)/sqrt(1-abar_t).
// The conversion coefficients are a change of variables, not knowledge, so
// they stay fixed; everything learned lives in image space, where one unit
// means the same thing at every timestep.  With the template equal to a
// single training image and a silent correction, this is exactly that
// image's analytic noise predictor.
class ToyDenoiser : public NoisePredictor {
 public:
  ToyDenoiser(std::vector<int> latent_shape, NoiseSchedule schedule,
              std::vector<std::string> vocabulary, int hidden_channels, Rng& init_rng)
      : shape_(std::move(latent_shape)), sched_(std::move(schedule)), vocab_(std::move(vocabulary)) {
    if (shape_.size() != 3) throw ConfigError("toy denoiser: latent shape must be {C,H,W}");
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
      if (vocab_[i].empty()) throw ConfigError("toy denoiser: empty label in vocabulary");
      vocab_index_[vocab_[i]] = static_cast<int>(i) + 1;
    }
    if (vocab_index_.size() != vocab_.size())
      throw ConfigError("toy denoiser: duplicate label in vocabulary");

    for (std::size_t k = 0; k < vocab_.size() + 1; ++k)
      templates_.push_back(ad::Var::param(Tensor(shape_, 0.0)));

    const int c = shape_[0];
    const int in_ch = 2 * c + 4;
    double r1 = std::sqrt(1.0 / (in_ch * 9.0));
    Tensor w1({hidden_channels, in_ch, 3, 3}, 0.0);
    for (std::int64_t i = 0; i < w1.numel(); ++i) w1[i] = init_rng.uniform(-r1, r1);
    conv1_w_ = ad::Var::param(w1);
    conv1_b_ = ad::Var::param(Tensor({hidden_channels}, 0.0));
    // Zero-initialized output convolution: the correction starts silent and
    // only grows where the linear head leaves residual structure.
    conv2_w_ = ad::Var::param(Tensor({c, hidden_channels, 3, 3}, 0.0));
    conv2_b_ = ad::Var::param(Tensor({c}, 0.0));
  }

  std::vector<int> latent_shape() const override { return shape_; }
  int timesteps() const override { return sched_.T; }
  bool supports_unconditional() const override { return true; }
  const std::vector<std::string>& vocabulary() const { return vocab_; }
  const NoiseSchedule& schedule() const { return sched_; }
  const ToyDenoiserMeta& meta() const { return meta_; }

  ad::Var predict(const ad::Var& x_t, int t, const ConditionRef& cond) const override {
    check_input(x_t.value(), t);
    const ad::Var& tmpl = templates_[static_cast<std::size_t>(label_index(cond))];

    double sa = sched_.sqrt_abar(t);
    double s1 = sched_.sqrt_one_minus_abar(t);
    Tensor f({4}, 0.0);
    f[0] = sa;
    f[1] = s1;
    f[2] = 1.0 / s1;
    f[3] = sa / s1;

    Tensor fmap({4, shape_[1], shape_[2]}, 0.0);
    for (int k = 0; k < 4; ++k)
      for (int y = 0; y < shape_[1]; ++y)
        for (int x = 0; x < shape_[2]; ++x) fmap.at(k, y, x) = f[k];

    ad::Var input = ad::concat_channels({x_t, tmpl, ad::Var::leaf(fmap)});
    ad::Var hidden = ad::tanh_v(ad::conv2d(input, conv1_w_, conv1_b_, 1, 1));
    ad::Var correction = ad::conv2d(hidden, conv2_w_, conv2_b_, 1, 1);

    ad::Var x0_hat = ad::add(tmpl, correction);
    return ad::scale_add(1.0 / s1, x_t, -sa / s1, x0_hat);
  }

  std::vector<ad::Var> parameters() {
    std::vector<ad::Var> out = {conv1_w_, conv1_b_, conv2_w_, conv2_b_};
    for (auto& t : templates_) out.push_back(t);
    return out;
  }

  // Sum of squared convolution weights, the quantity weight decay taxes.
  ad::Var correction_penalty() const {
    return ad::add(ad::sum(ad::square(conv1_w_)), ad::sum(ad::square(conv2_w_)));
  }

  std::uint64_t params_digest() const {
    std::uint64_t d = 0xd1f0;
    auto fold = [&](const ad::Var& v) { d = derive_seed(d, tensor_digest(v.value())); };
    fold(conv1_w_);
    fold(conv1_b_);
    fold(conv2_w_);
    fold(conv2_b_);
    for (const auto& t : templates_) fold(t);
    return d;
  }

  void set_meta(const ToyDenoiserMeta& m) { meta_ = m; }

 private:
  int label_index(const ConditionRef& cond) const {
    if (cond.unconditional()) return 0;
    if (cond.embedding_id >= 0) {
      if (cond.embedding_id >= static_cast<int>(vocab_.size()))
        throw ConfigError("toy denoiser: embedding id " + std::to_string(cond.embedding_id) +
                          " outside vocabulary of size " + std::to_string(vocab_.size()));
      return cond.embedding_id + 1;
    }
    auto it = vocab_index_.find(cond.prompt);
    if (it == vocab_index_.end())
      throw ConfigError("toy denoiser: unknown label '" + cond.prompt + "'");
    return it->second;
  }

  std::vector<int> shape_;
  NoiseSchedule sched_;
  std::vector<std::string> vocab_;
  std::map<std::string, int> vocab_index_;
  std::vector<ad::Var> templates_;  // [0] = unconditional, then one per label
  ad::Var conv1_w_, conv1_b_, conv2_w_, conv2_b_;
  ToyDenoiserMeta meta_;
};

// Standard noise-prediction training: corrupt a training image to a random
// timestep, regress the injected noise.  The learning rate anneals
// exponentially to 1% of its initial value so the templates settle tightly
// instead of orbiting the optimum under minibatch noise.
inline ToyDenoiser train_toy_denoiser(const std::vector<LabeledImage>& train_set,
                                      const NoiseSchedule& sched,
                                      const ToyDenoiserConfig& cfg = {}) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("toy denoiser: empty training set");
  const Tensor& first = train_set.front().image;
  if (first.rank() != 3) throw ConfigError("toy denoiser: images must be {C,H,W}");
  for (const auto& item : train_set) {
    if (item.image.shape() != first.shape())
      throw ConfigError("toy denoiser: training images disagree on shape");
    for (std::int64_t i = 0; i < item.image.numel(); ++i)
      if (!std::isfinite(item.image[i]))
        throw ConfigError("toy denoiser: non-finite training image");
  }

  std::vector<std::string> vocab;
  for (const auto& item : train_set)
    if (!item.label.empty()) vocab.push_back(item.label);
  std::sort(vocab.begin(), vocab.end());
  vocab.erase(std::unique(vocab.begin(), vocab.end()), vocab.end());

  Rng init_rng(derive_seed(cfg.seed, 0xd202));
  ToyDenoiser model(first.shape(), sched, vocab, cfg.hidden_channels, init_rng);

  Adam adam(model.parameters(), {cfg.lr, 0.9, 0.999, 1e-8});
  Rng rng(derive_seed(cfg.seed, 0xd201));
  const int T = sched.T;

  ToyDenoiserMeta meta;
  for (int step = 1; step <= cfg.train_steps; ++step) {
    double frac = cfg.train_steps > 1
                      ? static_cast<double>(step - 1) / static_cast<double>(cfg.train_steps - 1)
                      : 0.0;
    adam.set_lr(cfg.lr * std::pow(0.01, frac));

    adam.zero_grad();
    ad::Var loss = ad::Var::scalar(0.0);
    for (int k = 0; k < cfg.batch_size; ++k) {
      const auto& item = train_set[rng.next_u64() % train_set.size()];
      int t = 1 + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(T));
      Tensor z = rng.normal_tensor(first.shape());
      Tensor x_t = forward_diffuse(item.image, t, z, sched);

      ConditionRef cond;
      if (!item.label.empty() && rng.uniform() >= cfg.label_dropout) cond.prompt = item.label;
      ad::Var eps_hat = model.predict(ad::Var::leaf(x_t), t, cond);
      loss = ad::add(loss, ad::mean(ad::square(ad::sub(eps_hat, ad::Var::leaf(z)))));
    }
    loss = ad::scale(loss, 1.0 / cfg.batch_size);
    if (cfg.weight_decay > 0.0)
      loss = ad::add(loss, ad::scale(model.correction_penalty(), cfg.weight_decay));

    double value = loss.item();
    if (!std::isfinite(value))
      throw NumericFailure("toy denoiser training: non-finite loss at step " +
                           std::to_string(step) + " (lr " + std::to_string(adam.lr()) + ")");
    ad::backward(loss);
    adam.step();
    meta.last_step_loss = value;
    meta.steps_run = step;
  }

  // Fixed probe batch: comparable across runs regardless of training length.
  Rng probe_rng(derive_seed(cfg.seed, 0xd203));
  double probe = 0.0;
  const int probes = 8;
  for (int k = 0; k < probes; ++k) {
    const auto& item = train_set[static_cast<std::size_t>(k) % train_set.size()];
    int t = 1 + (k * T) / probes;
    Tensor z = probe_rng.normal_tensor(first.shape());
    Tensor x_t = forward_diffuse(item.image, t, z, sched);
    ConditionRef cond;
    cond.prompt = item.label;
    Tensor eps_hat = model.predict_plain(x_t, t, cond);
    double acc = 0.0;
    for (std::int64_t i = 0; i < z.numel(); ++i) {
      double d = eps_hat[i] - z[i];
      acc += d * d;
    }
    probe += acc / static_cast<double>(z.numel());
  }
  meta.final_loss = probe / probes;
  model.set_meta(meta);
  return model;
}

}  // namespace patchsmith

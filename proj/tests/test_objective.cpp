// Attack objective: smoothness penalty, confidence-suppression loss, and the
// end-to-end differentiable batch objective over rendered scenes.
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "patchsmith/corpus.hpp"
#include "patchsmith/objective.hpp"

using namespace patchsmith;

namespace {

// Direct-formula smoothness computation, independent of the autodiff path.
double tv_reference(const Tensor& p) {
  double total = 0.0;
  for (int c = 0; c < p.dim(0); ++c)
    for (int y = 0; y + 1 < p.dim(1); ++y)
      for (int x = 0; x + 1 < p.dim(2); ++x) {
        double dr = p.at(c, y, x + 1) - p.at(c, y, x);
        double dd = p.at(c, y + 1, x) - p.at(c, y, x);
        total += std::sqrt(dr * dr + dd * dd + kTvEpsilon);
      }
  return total;
}

Detection make_det(double cx, double cy, double w, double h, double obj,
                   std::map<std::string, double> probs) {
  Detection d;
  d.box = {cx, cy, w, h};
  d.objectness = obj;
  d.class_probs = std::move(probs);
  return d;
}

// Input-dependent denoiser for gradient tests: mostly the analytic point-mass
// posterior plus a bounded nonlinear term, so the sampled output depends
// smoothly (and non-trivially) on the input latent.
class MixPredictor : public NoisePredictor {
 public:
  MixPredictor(Tensor target, NoiseSchedule schedule)
      : target_(std::move(target)), sched_(std::move(schedule)) {}

  std::vector<int> latent_shape() const override { return target_.shape(); }
  int timesteps() const override { return sched_.T; }
  bool supports_unconditional() const override { return true; }

  ad::Var predict(const ad::Var& x_t, int t, const ConditionRef&) const override {
    sched_.check_t(t, 1);
    double s1 = sched_.sqrt_abar(t);
    double s2 = sched_.sqrt_one_minus_abar(t);
    ad::Var point = ad::scale_add(1.0 / s2, x_t, -s1 / s2, ad::Var::leaf(target_));
    return ad::add(ad::scale(point, 0.9), ad::scale(ad::tanh_v(x_t), 0.1));
  }

 private:
  Tensor target_;
  NoiseSchedule sched_;
};

Tensor smooth_patch_target(const std::vector<int>& shape) {
  Tensor t(shape, 0.0);
  for (int c = 0; c < shape[0]; ++c)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[2]; ++x)
        t.at(c, y, x) = 0.35 + 0.25 * std::sin(0.9 * x + 0.7 * y + c) * 0.8;
  return t;
}

SceneSample pick_scene_with_person(std::uint64_t base, const SyntheticSceneConfig& cfg) {
  for (std::uint64_t k = 0; k < 64; ++k) {
    SceneSample s = make_synthetic_scene(derive_seed(base, k), cfg);
    if (!s.person_boxes.empty()) return s;
  }
  throw std::runtime_error("no scene with a person in 64 draws");
}

}  // namespace

TEST_CASE("smoothness penalty matches hand-computed values") {
  SECTION("2x2 vertical edge") {
    Tensor p({1, 2, 2}, 0.0);
    p.at(0, 0, 1) = 1.0;
    p.at(0, 1, 1) = 1.0;
    // single interior term: right-diff 1, down-diff 0
    double expect = std::sqrt(1.0 + kTvEpsilon);
    REQUIRE(tv_loss(p) == Catch::Approx(expect).margin(1e-12));
  }
  SECTION("constant patch is epsilon-level only") {
    Tensor p({3, 5, 4}, 0.7);
    int terms = 3 * 4 * 3;
    REQUIRE(tv_loss(p) == Catch::Approx(terms * std::sqrt(kTvEpsilon)).margin(1e-12));
    REQUIRE(tv_loss(p) <= terms * std::sqrt(kTvEpsilon) + 1e-12);
  }
  SECTION("two-row ramp") {
    Tensor p({1, 2, 4}, 0.0);
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 4; ++x) p.at(0, y, x) = x / 3.0;
    double expect = 3.0 * std::sqrt(1.0 / 9.0 + kTvEpsilon);
    REQUIRE(tv_loss(p) == Catch::Approx(expect).margin(1e-12));
  }
  SECTION("agreement with the direct formula on random data") {
    Rng rng(314159);
    Tensor p = rng.uniform_tensor({2, 6, 5});
    REQUIRE(tv_loss(p) == Catch::Approx(tv_reference(p)).margin(1e-12));
  }
  SECTION("single row or column has no interior terms") {
    Tensor row({1, 1, 4}, 0.0);
    for (int x = 0; x < 4; ++x) row.at(0, 0, x) = x / 3.0;
    REQUIRE(tv_loss(row) == 0.0);
    Tensor col({2, 4, 1}, 0.0);
    col.at(0, 2, 0) = 0.9;
    REQUIRE(tv_loss(col) == 0.0);
  }
  SECTION("degenerate shapes are rejected") {
    REQUIRE_THROWS_AS(tv_loss(Tensor({1, 1, 1}, 0.0)), std::invalid_argument);
    REQUIRE_THROWS_AS(tv_loss(ad::Var::leaf(Tensor({4, 4}, 0.0))), std::invalid_argument);
  }
}

TEST_CASE("smoothness penalty gradient matches finite differences") {
  Rng rng(77123);
  Tensor base = rng.uniform_tensor({2, 5, 6});
  ad::Var p = ad::Var::param(base);
  ad::backward(tv_loss(p));
  const Tensor& g = p.grad();

  std::mt19937_64 pick(9);
  for (int k = 0; k < 12; ++k) {
    std::int64_t i = static_cast<std::int64_t>(pick() % base.numel());
    double h = 1e-6;
    Tensor plus = base, minus = base;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    double fd = (tv_loss(plus) - tv_loss(minus)) / (2.0 * h);
    double got = g.data()[i];
    double denom = std::max({std::abs(fd), std::abs(got), 1e-10});
    REQUIRE(std::abs(fd - got) / denom < 1e-4);
  }
}

TEST_CASE("confidence suppression loss") {
  std::vector<Detection> dets = {
      make_det(0.3, 0.3, 0.2, 0.4, 0.9, {{"person", 0.8}}),
      make_det(0.7, 0.6, 0.2, 0.4, 0.5, {{"person", 0.99}}),
  };
  SECTION("max of objectness times class probability") {
    REQUIRE(detector_loss(dets, "person") == Catch::Approx(0.72).margin(1e-15));
  }
  SECTION("empty list scores exactly zero") {
    REQUIRE(detector_loss(std::vector<Detection>{}, "person") == 0.0);
  }
  SECTION("unknown class is a configuration error, not a silent zero") {
    REQUIRE_THROWS_AS(detector_loss(dets, "unicorn"), ConfigError);
  }
  SECTION("invariant under permutation") {
    std::vector<Detection> rev(dets.rbegin(), dets.rend());
    REQUIRE(detector_loss(rev, "person") == detector_loss(dets, "person"));
  }
  SECTION("suppressing any confidence never raises the loss") {
    double before = detector_loss(dets, "person");
    for (std::size_t i = 0; i < dets.size(); ++i) {
      auto lowered = dets;
      lowered[i].objectness *= 0.7;
      REQUIRE(detector_loss(lowered, "person") <= before + 1e-15);
    }
  }
  SECTION("differentiable overload agrees with the plain one") {
    std::vector<DetectionV> vdets;
    for (const auto& d : dets) {
      DetectionV v;
      v.box = d.box;
      v.objectness = ad::Var::scalar(d.objectness);
      for (const auto& [k, pr] : d.class_probs) v.class_probs.emplace(k, ad::Var::scalar(pr));
      vdets.push_back(std::move(v));
    }
    REQUIRE(detector_loss(vdets, "person").item() ==
            Catch::Approx(detector_loss(dets, "person")).margin(1e-15));
    REQUIRE_THROWS_AS(detector_loss(vdets, "unicorn"), ConfigError);
  }
}

TEST_CASE("box overlap and greedy suppression") {
  BoundingBox a{0.5, 0.5, 0.5, 0.5};
  REQUIRE(box_iou(a, a) == Catch::Approx(1.0).margin(1e-15));
  BoundingBox b{0.75, 0.5, 0.5, 0.5};  // half-width shift
  REQUIRE(box_iou(a, b) == Catch::Approx(1.0 / 3.0).margin(1e-12));
  BoundingBox far{0.1, 0.1, 0.1, 0.1};
  REQUIRE(box_iou(a, far) == 0.0);

  std::vector<Detection> dets = {
      make_det(0.5, 0.5, 0.5, 0.5, 0.9, {{"person", 1.0}}),
      make_det(0.52, 0.5, 0.5, 0.5, 0.8, {{"person", 1.0}}),  // heavy overlap, lower score
      make_det(0.1, 0.1, 0.1, 0.1, 0.7, {{"person", 1.0}}),   // disjoint
  };
  auto kept = nms(dets, "person", 0.5);
  REQUIRE(kept.size() == 2);
  REQUIRE(kept[0].objectness == 0.9);
  REQUIRE(kept[1].objectness == 0.7);
}

TEST_CASE("objective validates configuration") {
  NoiseSchedule ns = build_schedule(40);
  Tensor target = smooth_patch_target({3, 12, 12});
  MixPredictor pred(target, ns);
  IdentityCodec codec({3, 12, 12});
  auto det = testfix::shared_toy_detector();

  BoundStack stack;
  stack.predictor = &pred;
  stack.codec = &codec;
  stack.schedule = &ns;
  stack.detectors = {det.get()};

  SamplerConfig cfg;
  cfg.t_start = 20;
  cfg.s = 8;

  SyntheticSceneConfig scfg;
  std::vector<SceneSample> scenes = {pick_scene_with_person(11, scfg)};
  ad::Var latent = ad::Var::leaf(target);

  SECTION("empty scene batch") {
    REQUIRE_THROWS_AS(batch_objective({}, latent, cfg, stack, 0.1), ConfigError);
  }
  SECTION("negative smoothness weight") {
    REQUIRE_THROWS_AS(batch_objective(scenes, latent, cfg, stack, -0.5), ConfigError);
  }
  SECTION("unbound pipeline pieces") {
    BoundStack broken = stack;
    broken.predictor = nullptr;
    REQUIRE_THROWS_AS(batch_objective(scenes, latent, cfg, broken, 0.1), ConfigError);
    broken = stack;
    broken.detectors.clear();
    REQUIRE_THROWS_AS(batch_objective(scenes, latent, cfg, broken, 0.1), ConfigError);
    broken = stack;
    broken.detectors = {nullptr};
    REQUIRE_THROWS_AS(batch_objective(scenes, latent, cfg, broken, 0.1), ConfigError);
  }
  SECTION("scene size must match detector input") {
    SyntheticSceneConfig small = scfg;
    small.size = 32;
    std::vector<SceneSample> tiny = {pick_scene_with_person(13, small)};
    REQUIRE_THROWS_WITH(batch_objective(tiny, latent, cfg, stack, 0.1),
                        Catch::Matchers::ContainsSubstring("does not match"));
  }
  SECTION("latent state must be fully denoised") {
    LatentState mid{target, 5, {}};
    REQUIRE_THROWS_AS(batch_objective(scenes, mid, cfg, stack, 0.1), std::invalid_argument);
  }
}

TEST_CASE("pipeline failures carry their stage label") {
  NoiseSchedule ns = build_schedule(40);
  Tensor target = smooth_patch_target({3, 12, 12});
  MixPredictor pred(target, ns);
  IdentityCodec codec({3, 12, 12});
  auto det = testfix::shared_toy_detector();

  BoundStack stack;
  stack.predictor = &pred;
  stack.codec = &codec;
  stack.schedule = &ns;
  stack.detectors = {det.get()};

  SamplerConfig cfg;
  cfg.t_start = 20;
  cfg.s = 8;
  std::vector<SceneSample> scenes = {pick_scene_with_person(11, {})};

  SECTION("latent shape mismatch surfaces from the sampling stage") {
    ad::Var wrong = ad::Var::leaf(Tensor({3, 5, 5}, 0.4));
    REQUIRE_THROWS_WITH(batch_objective(scenes, wrong, cfg, stack, 0.1),
                        Catch::Matchers::StartsWith("sample: "));
  }
  SECTION("unknown person class surfaces from the detection stage") {
    BoundStack renamed = stack;
    renamed.person_class = "unicorn";
    ad::Var latent = ad::Var::leaf(target);
    REQUIRE_THROWS_AS(batch_objective(scenes, latent, cfg, renamed, 0.1), ConfigError);
    REQUIRE_THROWS_WITH(batch_objective(scenes, latent, cfg, renamed, 0.1),
                        Catch::Matchers::StartsWith("detect: "));
  }
}

TEST_CASE("objective is affine in the smoothness weight and decomposes exactly") {
  NoiseSchedule ns = build_schedule(40);
  Tensor target = smooth_patch_target({3, 12, 12});
  MixPredictor pred(target, ns);
  IdentityCodec codec({3, 12, 12});
  auto det = testfix::shared_toy_detector();

  BoundStack stack;
  stack.predictor = &pred;
  stack.codec = &codec;
  stack.schedule = &ns;
  stack.detectors = {det.get()};

  SamplerConfig cfg;
  cfg.t_start = 20;
  cfg.s = 8;
  cfg.seed = 99;

  std::vector<SceneSample> scenes;
  for (std::uint64_t k = 0; k < 3; ++k) scenes.push_back(pick_scene_with_person(300 + k, {}));

  ad::Var latent = ad::Var::leaf(target);
  LossBreakdown b0, b01, b1;
  double t0 = batch_objective(scenes, latent, cfg, stack, 0.0, &b0).item();
  double t01 = batch_objective(scenes, latent, cfg, stack, 0.1, &b01).item();
  double t1 = batch_objective(scenes, latent, cfg, stack, 1.0, &b1).item();

  SECTION("breakdown identity total = det + lambda * tv") {
    for (const auto& b : {b0, b01, b1})
      REQUIRE(b.total == Catch::Approx(b.det_term + b.lambda * b.tv_term).margin(1e-12));
    REQUIRE(b0.total == Catch::Approx(t0).margin(0.0));
  }
  SECTION("detection and smoothness terms do not depend on lambda") {
    REQUIRE(b01.det_term == Catch::Approx(b0.det_term).margin(1e-12));
    REQUIRE(b1.det_term == Catch::Approx(b0.det_term).margin(1e-12));
    REQUIRE(b01.tv_term == Catch::Approx(b1.tv_term).margin(1e-12));
    REQUIRE(b1.tv_term > 0.0);
  }
  SECTION("affinity across lambda values") {
    REQUIRE(t01 - t0 == Catch::Approx(0.1 * (t1 - t0)).margin(1e-10));
  }
  SECTION("zero-lambda total equals the manually recomposed detection mean") {
    ad::Var pixels = codec.decode(aps_sample(latent, stack.condition, cfg, pred, ns));
    double acc = 0.0;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      ad::Var rendered = render_scene(scenes[i], pixels, stack.ranges,
                                      derive_seed(cfg.seed, 1000 + i), stack.placement);
      acc += detector_loss(det->detect_var(rendered), "person").item();
    }
    REQUIRE(t0 == Catch::Approx(acc / scenes.size()).margin(1e-12));
    REQUIRE(b1.tv_term == Catch::Approx(tv_loss(pixels.value())).margin(1e-12));
  }
  SECTION("latent-state driver matches the raw-variable path") {
    LatentState state{target, 0, {}};
    LossBreakdown via_state = batch_objective(scenes, state, cfg, stack, 1.0);
    REQUIRE(via_state.total == Catch::Approx(b1.total).margin(1e-12));
    REQUIRE(via_state.det_term == Catch::Approx(b1.det_term).margin(1e-12));
  }
  SECTION("ensemble over duplicated detectors averages to the same value") {
    BoundStack two = stack;
    two.detectors = {det.get(), det.get()};
    LossBreakdown bd;
    batch_objective(scenes, latent, cfg, two, 0.0, &bd);
    REQUIRE(bd.det_term == Catch::Approx(b0.det_term).margin(1e-12));
  }
}

TEST_CASE("full-pipeline gradient matches finite differences") {
  NoiseSchedule ns = build_schedule(40);
  Tensor target = smooth_patch_target({3, 12, 12});
  MixPredictor pred(target, ns);
  IdentityCodec codec({3, 12, 12});
  auto det = testfix::shared_toy_detector();

  BoundStack stack;
  stack.predictor = &pred;
  stack.codec = &codec;
  stack.schedule = &ns;
  stack.detectors = {det.get()};
  stack.ranges = identity_ranges();  // keeps the composite clear of clamping kinks

  SamplerConfig cfg;
  cfg.t_start = 20;
  cfg.s = 8;
  cfg.seed = 7;

  std::vector<SceneSample> scenes;
  for (std::uint64_t k = 0; k < 2; ++k) scenes.push_back(pick_scene_with_person(500 + k, {}));

  const double lambda = 0.05;
  LatentState state{target, 0, {}};
  Tensor grad;
  LossBreakdown bd = batch_objective(scenes, state, cfg, stack, lambda, &grad);
  REQUIRE(std::isfinite(bd.total));
  REQUIRE(grad.shape() == target.shape());

  // the decoded patch must sit strictly inside (0,1): clamp kinks would
  // invalidate the finite-difference comparison
  Tensor pixels = codec.decode_plain(
      aps_sample(ad::Var::leaf(target), stack.condition, cfg, pred, ns).value());
  for (std::int64_t i = 0; i < pixels.numel(); ++i) {
    REQUIRE(pixels.data()[i] > 0.001);
    REQUIRE(pixels.data()[i] < 0.999);
  }

  auto eval = [&](const Tensor& v) {
    LatentState s{v, 0, {}};
    return batch_objective(scenes, s, cfg, stack, lambda).total;
  };

  std::mt19937_64 pick(4242);
  int checked = 0;
  for (int k = 0; k < 10; ++k) {
    std::int64_t i = static_cast<std::int64_t>(pick() % target.numel());
    double h = 1e-5;
    Tensor plus = target, minus = target;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    double fd = (eval(plus) - eval(minus)) / (2.0 * h);
    double got = grad.data()[i];
    double denom = std::max({std::abs(fd), std::abs(got), 1e-8});
    INFO("coord " << i << " fd " << fd << " grad " << got);
    REQUIRE(std::abs(fd - got) / denom < 1e-3);
    ++checked;
  }
  REQUIRE(checked == 10);
}

TEST_CASE("toy detector training is deterministic") {
  ToyDetectorConfig tiny;
  tiny.epochs = 2;
  tiny.train_scenes = 6;
  tiny.val_scenes = 2;
  tiny.require_ap = 0.0;
  tiny.seed = 5;
  auto a = make_toy_detector(tiny);
  auto b = make_toy_detector(tiny);
  REQUIRE(a->weights_digest() == b->weights_digest());

  SECTION("weights survive a save/load round trip") {
    auto dir = testfix::cache_dir();
    std::filesystem::create_directories(dir);
    auto path = dir / "roundtrip_probe.psw";
    a->save(path);
    ToyDetector c(tiny);
    REQUIRE(c.weights_digest() != a->weights_digest());
    c.load(path);
    REQUIRE(c.weights_digest() == a->weights_digest());
    std::filesystem::remove(path);
  }
  SECTION("a different seed trains different weights") {
    ToyDetectorConfig other = tiny;
    other.seed = 6;
    REQUIRE(make_toy_detector(other)->weights_digest() != a->weights_digest());
  }
}

TEST_CASE("trained fixture clears its quality bar") {
  auto det = testfix::shared_toy_detector();
  ToyDetectorConfig cfg;  // defaults, same as the fixture

  REQUIRE(det->input_size() == 64);
  REQUIRE(det->classes() == std::vector<std::string>{"person"});

  SECTION("held-out average precision") {
    REQUIRE(toy_fixture_ap(*det, toy_detector_val_corpus(cfg)) >= 0.95);
  }
  SECTION("average precision on an unrelated fresh corpus") {
    Corpus fresh;
    for (int i = 0; i < 60; ++i)
      fresh.scenes.push_back(make_synthetic_scene(derive_seed(424242, 0x3000 + i), cfg.scene));
    REQUIRE(toy_fixture_ap(*det, fresh) >= 0.9);
  }
  SECTION("featureless input yields no confident detection") {
    Tensor gray({3, 64, 64}, 0.35);
    for (const auto& d : det->detect(gray)) REQUIRE(d.confidence("person") < 0.5);
  }
  SECTION("a present person is found with localized overlap") {
    SceneSample s = pick_scene_with_person(90125, cfg.scene);
    bool hit = false;
    for (const auto& d : det->detect(s.image))
      for (const auto& g : s.person_boxes)
        if (d.confidence("person") >= 0.5 && box_iou(d.box, g) >= 0.5) hit = true;
    REQUIRE(hit);
  }
}

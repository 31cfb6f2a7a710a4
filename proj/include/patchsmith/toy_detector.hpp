#pragma once
// Trainable desk-scale person detector.
//
// Architecture: three stride-2 tanh conv stages (3->8->12->16 channels)
// shrink the input by 8x, one stride-1 conv widens the receptive field past a
// whole person, then a 1x1 head emits 6 channels per grid cell:
//   [objectness logit, person-class logit, tx, ty, tw, th].
// A cell (gy,gx) decodes to a normalized box centered at
//   cx=(gx+0.5+R*tanh(tx))/G, cy=(gy+0.5+R*tanh(ty))/G (R: reach in cells),
// with w=sigmoid(tw), h=sigmoid(th).  The tanh reach lets every cell a person
// covers point at the person's true center, so near-center duplicates rank
// below (and get suppressed against) well-localized boxes.
//
// Target assignment: the cell holding a box center is the positive; other
// cells the box covers are excluded from the objectness loss but still train
// class and geometry toward that box; everything else is background.
//
// Training data is the synthetic scene generator, augmented with benign
// occluders (noise / solid / gradient textures) pasted at the same body
// anchor the attack uses, so the fixture does not fold to arbitrary pasted
// content — only to content optimized against it.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "patchsmith/adam.hpp"
#include "patchsmith/autodiff.hpp"
#include "patchsmith/corpus.hpp"
#include "patchsmith/detector.hpp"
#include "patchsmith/renderer.hpp"
#include "patchsmith/ap.hpp"
#include "patchsmith/weights_io.hpp"

namespace patchsmith {

struct ToyDetectorConfig {
  int input_size = 64;
  std::uint64_t seed = 7;  // weight init, data generation, augmentation
  int train_scenes = 400;
  int val_scenes = 40;
  int epochs = 40;
  int batch_size = 8;
  double lr = 0.01;
  double noobj_weight = 0.5;      // BCE weight on empty cells
  double box_weight = 8.0;        // MSE weight on assigned-cell geometry
  double occluder_probability = 0.5;  // benign-texture paste chance per person
  double require_ap = 0.95;       // held-out bar; <= 0 disables the check
  double detect_threshold = 1e-3; // reporting floor for detect()
  double nms_iou = 0.45;
  SyntheticSceneConfig scene{64, 1, 2, 0.2, 4};
};

class ToyDetector : public DetectorContract {
 public:
  static constexpr int kHeadChannels = 6;
  static constexpr double kOffsetReach = 2.5;  // max center shift, in cells

  explicit ToyDetector(const ToyDetectorConfig& cfg) : cfg_(cfg) {
    if (cfg.input_size % 8 != 0 || cfg.input_size < 32)
      throw ConfigError("ToyDetector: input_size must be a multiple of 8, >= 32");
    grid_ = cfg.input_size / 8;
    Rng rng(derive_seed(cfg.seed, 0x70d1));
    auto conv_init = [&](int oc, int ic, int k) {
      Tensor w = rng.normal_tensor({oc, ic, k, k});
      double s = 1.0 / std::sqrt(static_cast<double>(ic) * k * k);
      for (std::int64_t i = 0; i < w.numel(); ++i) w[i] *= s;
      return ad::Var::param(std::move(w));
    };
    w1_ = conv_init(8, 3, 3);
    b1_ = ad::Var::param(Tensor({8}, 0.0));
    w2_ = conv_init(12, 8, 3);
    b2_ = ad::Var::param(Tensor({12}, 0.0));
    w3_ = conv_init(16, 12, 3);
    b3_ = ad::Var::param(Tensor({16}, 0.0));
    w4_ = conv_init(16, 16, 3);
    b4_ = ad::Var::param(Tensor({16}, 0.0));
    w5_ = conv_init(16, 16, 3);
    b5_ = ad::Var::param(Tensor({16}, 0.0));
    wh_ = conv_init(kHeadChannels, 16, 1);
    Tensor bh({kHeadChannels}, 0.0);
    bh[0] = -2.0;  // start pessimistic about objectness: most cells are empty
    bh_ = ad::Var::param(std::move(bh));
    params_ = {w1_, b1_, w2_, b2_, w3_, b3_, w4_, b4_, w5_, b5_, wh_, bh_};
    set_trainable(false);
  }

  std::string id() const override {
    return "toy" + std::to_string(cfg_.input_size) + "_s" + std::to_string(cfg_.seed);
  }
  int input_size() const override { return cfg_.input_size; }
  std::vector<std::string> classes() const override { return {"person"}; }
  int grid() const { return grid_; }
  const ToyDetectorConfig& config() const { return cfg_; }

  // Raw head maps {6,G,G}; the training loss and detect paths share this.
  ad::Var forward(const ad::Var& image) const {
    const Tensor& v = image.value();
    if (v.rank() != 3 || v.dim(0) != 3 || v.dim(1) != cfg_.input_size ||
        v.dim(2) != cfg_.input_size)
      throw ConfigError("ToyDetector: expected image {3," + std::to_string(cfg_.input_size) +
                        "," + std::to_string(cfg_.input_size) + "}, got " + v.shape_string());
    ad::Var h1 = ad::tanh_v(ad::conv2d(image, w1_, b1_, 2, 1));
    ad::Var h2 = ad::tanh_v(ad::conv2d(h1, w2_, b2_, 2, 1));
    ad::Var h3 = ad::tanh_v(ad::conv2d(h2, w3_, b3_, 2, 1));
    ad::Var h4 = ad::tanh_v(ad::conv2d(h3, w4_, b4_, 1, 1));
    ad::Var h5 = ad::tanh_v(ad::conv2d(h4, w5_, b5_, 1, 1));
    return ad::conv2d(h5, wh_, bh_, 1, 0);
  }

  BoundingBox decode_box(const Tensor& maps, int gy, int gx) const {
    BoundingBox b;
    b.cx = (gx + 0.5 + kOffsetReach * std::tanh(maps.at(2, gy, gx))) / grid_;
    b.cy = (gy + 0.5 + kOffsetReach * std::tanh(maps.at(3, gy, gx))) / grid_;
    b.w = ad::sigmoid_val(maps.at(4, gy, gx));
    b.h = ad::sigmoid_val(maps.at(5, gy, gx));
    return b;
  }

  // Evaluation view: decoded cells above the reporting floor, NMS'd.
  std::vector<Detection> detect(const Tensor& image) const override {
    Tensor maps = forward(ad::Var::leaf(image)).value();
    std::vector<Detection> dets;
    for (int gy = 0; gy < grid_; ++gy)
      for (int gx = 0; gx < grid_; ++gx) {
        double obj = ad::sigmoid_val(maps.at(0, gy, gx));
        double cls = ad::sigmoid_val(maps.at(1, gy, gx));
        if (obj * cls < cfg_.detect_threshold) continue;
        Detection d;
        d.box = decode_box(maps, gy, gx);
        d.objectness = obj;
        d.class_probs["person"] = cls;
        dets.push_back(std::move(d));
      }
    return nms(std::move(dets), "person", cfg_.nms_iou);
  }

  // Attack view: every cell, no floor, no NMS; scores stay on the tape.
  std::vector<DetectionV> detect_var(const ad::Var& image) const override {
    ad::Var maps = forward(image);
    std::vector<DetectionV> dets;
    dets.reserve(static_cast<std::size_t>(grid_) * grid_);
    for (int gy = 0; gy < grid_; ++gy)
      for (int gx = 0; gx < grid_; ++gx) {
        DetectionV d;
        d.box = decode_box(maps.value(), gy, gx);
        d.objectness = ad::sigmoid(ad::element3(maps, 0, gy, gx));
        d.class_probs.emplace("person", ad::sigmoid(ad::element3(maps, 1, gy, gx)));
        dets.push_back(std::move(d));
      }
    return dets;
  }

  std::vector<ad::Var>& params() { return params_; }

  void set_trainable(bool on) {
    for (auto& p : params_) p.node()->requires_grad = on;
  }

  NamedTensors snapshot() const {
    NamedTensors t;
    const char* names[] = {"w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4", "w5", "b5", "wh", "bh"};
    for (std::size_t k = 0; k < params_.size(); ++k) t.emplace_back(names[k], params_[k].value());
    return t;
  }

  void restore(const NamedTensors& t) {
    const char* names[] = {"w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4", "w5", "b5", "wh", "bh"};
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const Tensor& src = find_tensor(t, names[k]);
      require_same_shape(params_[k].value(), src, "ToyDetector::restore");
      params_[k].mutable_value() = src;
    }
  }

  void save(const std::filesystem::path& path) const { save_named_tensors(path, snapshot()); }
  void load(const std::filesystem::path& path) { restore(load_named_tensors(path)); }
  std::uint64_t weights_digest() const { return named_tensors_digest(snapshot()); }

 private:
  ToyDetectorConfig cfg_;
  int grid_ = 8;
  ad::Var w1_, b1_, w2_, b2_, w3_, b3_, w4_, b4_, w5_, b5_, wh_, bh_;
  std::vector<ad::Var> params_;
};

namespace toydetail {

// Benign occluder texture: what a non-adversarial pasted object looks like.
inline Tensor make_occluder_texture(Rng& rng, int size = 24) {
  int kind = static_cast<int>(rng.uniform() * 3.0);
  Tensor t({3, size, size});
  if (kind == 0) {
    t = rng.uniform_tensor({3, size, size});
  } else if (kind == 1) {
    double c[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) t.at(ch, y, x) = c[ch];
  } else {
    double c0[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    double c1[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    bool horizontal = rng.uniform() < 0.5;
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          double a = horizontal ? x / double(size - 1) : y / double(size - 1);
          t.at(ch, y, x) = (1.0 - a) * c0[ch] + a * c1[ch];
        }
  }
  return t;
}

// Pastes benign occluders onto a random subset of persons, through the exact
// placement-plus-transform path the attack itself uses.
inline SceneSample augment_with_occluders(const SceneSample& scene, double probability,
                                          const TransformRanges& ranges,
                                          const PlacementPolicy& pol, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x0cc1));
  SceneSample out = scene;
  for (std::size_t b = 0; b < scene.person_boxes.size(); ++b) {
    if (rng.uniform() >= probability) continue;
    Tensor tex = make_occluder_texture(rng);
    SceneSample view;
    view.image = std::move(out.image);
    view.person_boxes = {scene.person_boxes[b]};
    out.image = render_scene_plain(view, tex, ranges, rng.next_u64(), pol).image;
  }
  return out;
}

// Grid targets for one scene.  Every cell a box covers trains class and
// geometry toward that box; its objectness target is filled in later with the
// IoU of the cell's currently decoded box, so confidence learns to rank by
// localization quality.  Cells covering nothing are background.
struct GridTargets {
  Tensor mask;      // {1,G,G}: 1 on assigned cells, noobj_weight on background
  Tensor assigned;  // {1,G,G}: 1 on assigned cells, 0 elsewhere
  struct Cell {
    int gy, gx;
    double off_x, off_y;  // box center in cell units, relative to cell center
    BoundingBox gt;       // the box this cell is responsible for
  };
  std::vector<Cell> cells;
};

inline GridTargets make_targets(const SceneSample& scene, int grid, double noobj_weight) {
  GridTargets t;
  t.mask = Tensor({1, grid, grid}, noobj_weight);
  t.assigned = Tensor({1, grid, grid}, 0.0);
  std::vector<char> owned(static_cast<std::size_t>(grid) * grid, 0);
  auto clamp_cell = [grid](double v) {
    return std::min(grid - 1, std::max(0, static_cast<int>(v)));
  };
  for (const auto& b : scene.person_boxes) {
    int cgx = clamp_cell(b.cx * grid);
    int cgy = clamp_cell(b.cy * grid);
    int gx0 = clamp_cell(std::floor((b.cx - b.w / 2) * grid));
    int gx1 = clamp_cell(std::ceil((b.cx + b.w / 2) * grid) - 1);
    int gy0 = clamp_cell(std::floor((b.cy - b.h / 2) * grid));
    int gy1 = clamp_cell(std::ceil((b.cy + b.h / 2) * grid) - 1);
    for (int gy = gy0; gy <= gy1; ++gy)
      for (int gx = gx0; gx <= gx1; ++gx) {
        bool center = gy == cgy && gx == cgx;
        bool covered = std::abs((gx + 0.5) / grid - b.cx) <= b.w / 2 &&
                       std::abs((gy + 0.5) / grid - b.cy) <= b.h / 2;
        bool near = std::abs(gy - cgy) <= 1 && std::abs(gx - cgx) <= 1;
        if (!center && !(covered && near)) continue;
        if (owned[static_cast<std::size_t>(gy) * grid + gx]) continue;
        owned[static_cast<std::size_t>(gy) * grid + gx] = 1;
        t.mask.at(0, gy, gx) = 1.0;
        t.assigned.at(0, gy, gx) = 1.0;
        t.cells.push_back(
            {gy, gx, b.cx * grid - (gx + 0.5), b.cy * grid - (gy + 0.5), b});
      }
  }
  return t;
}

// Weighted binary cross-entropy with logits plus box regression in decoded
// coordinate space.  The objectness target of EVERY cell is the IoU of that
// cell's currently decoded box with the best-matching ground-truth box (a
// stop-gradient quantity).  Confidence therefore learns to estimate
// localization quality: a well-localized cell earns a high score, a sloppy
// neighbor a mediocre one, and a cell hallucinating a merged box between two
// objects is pushed down to the (sub-threshold) overlap it actually achieves.
inline ad::Var scene_training_loss(ToyDetector& det, const SceneSample& scene,
                                   const ToyDetectorConfig& cfg) {
  GridTargets tg = make_targets(scene, det.grid(), cfg.noobj_weight);
  ad::Var maps = det.forward(ad::Var::leaf(scene.image));

  Tensor obj_t({1, det.grid(), det.grid()}, 0.0);
  for (const auto& c : tg.cells)
    obj_t.at(0, c.gy, c.gx) = box_iou(det.decode_box(maps.value(), c.gy, c.gx), c.gt);

  ad::Var obj_z = ad::slice_channels(maps, 0, 1);
  ad::Var targets = ad::Var::leaf(obj_t);
  ad::Var weights = ad::Var::leaf(tg.mask);
  ad::Var bce = ad::sum(ad::mul(weights, ad::sub(ad::softplus(obj_z), ad::mul(targets, obj_z))));

  if (tg.cells.empty()) return bce;

  // Per-cell class and geometry terms, averaged so scenes with many covered
  // cells do not drown the objectness signal.  Offsets are compared in
  // reach-normalized units so their scale matches the sigmoid-space sizes.
  ad::Var cell_sum = ad::Var::scalar(0.0);
  for (const auto& c : tg.cells) {
    ad::Var cls_z = ad::element3(maps, 1, c.gy, c.gx);
    cell_sum = ad::add(cell_sum, ad::sub(ad::softplus(cls_z), cls_z));
    for (int k = 0; k < 2; ++k) {
      ad::Var off = ad::tanh_v(ad::element3(maps, 2 + k, c.gy, c.gx));
      double target = (k == 0 ? c.off_x : c.off_y) / ToyDetector::kOffsetReach;
      cell_sum =
          ad::add(cell_sum, ad::scale(ad::square(ad::add_scalar(off, -target)), cfg.box_weight));
    }
    for (int k = 0; k < 2; ++k) {
      ad::Var size = ad::sigmoid(ad::element3(maps, 4 + k, c.gy, c.gx));
      double target = k == 0 ? c.gt.w : c.gt.h;
      cell_sum =
          ad::add(cell_sum, ad::scale(ad::square(ad::add_scalar(size, -target)), cfg.box_weight));
    }
  }
  return ad::add(bce, ad::scale(cell_sum, 1.0 / static_cast<double>(tg.cells.size())));
}

}  // namespace toydetail

// Held-out quality gate: AP@0.5 of detect() against ground-truth boxes.
inline double toy_fixture_ap(const DetectorContract& det, const Corpus& corpus,
                             double iou_threshold = 0.5) {
  std::vector<ScoredBox> dets;
  std::map<std::string, std::vector<BoundingBox>> refs;
  for (const auto& s : corpus.scenes) {
    refs[s.id] = s.person_boxes;
    for (const auto& d : det.detect(s.image))
      dets.push_back({s.id, d.box, d.confidence("person")});
  }
  return average_precision(dets, refs, iou_threshold);
}

// Training and held-out splits; separate seed streams keep them disjoint.
inline Corpus toy_detector_train_corpus(const ToyDetectorConfig& cfg) {
  ToyDetectorConfig c = cfg;
  c.scene.size = c.input_size;
  Corpus out;
  out.scenes.reserve(static_cast<std::size_t>(c.train_scenes));
  for (int i = 0; i < c.train_scenes; ++i)
    out.scenes.push_back(make_synthetic_scene(derive_seed(c.seed, 0x7a000 + i), c.scene));
  return out;
}

inline Corpus toy_detector_val_corpus(const ToyDetectorConfig& cfg) {
  ToyDetectorConfig c = cfg;
  c.scene.size = c.input_size;
  Corpus out;
  out.scenes.reserve(static_cast<std::size_t>(c.val_scenes));
  for (int i = 0; i < c.val_scenes; ++i)
    out.scenes.push_back(make_synthetic_scene(derive_seed(c.seed, 0xb1000 + i), c.scene));
  return out;
}

// Trains a fresh detector on synthetic scenes and verifies it clears the
// held-out bar before handing it out as a fixture.
inline std::shared_ptr<ToyDetector> make_toy_detector(const ToyDetectorConfig& cfg = {}) {
  ToyDetectorConfig c = cfg;
  c.scene.size = c.input_size;
  auto det = std::make_shared<ToyDetector>(c);

  Corpus train = toy_detector_train_corpus(c);
  Corpus val = toy_detector_val_corpus(c);

  det->set_trainable(true);
  Adam opt(det->params(), {c.lr, 0.9, 0.999, 1e-8});
  TransformRanges ranges;  // attack-default photometric/geometric jitter
  PlacementPolicy pol;

  for (int epoch = 0; epoch < c.epochs; ++epoch) {
    if (epoch == (c.epochs * 3) / 5 || epoch == (c.epochs * 17) / 20)
      opt.set_lr(opt.lr() * 0.2);
    Rng shuffle_rng(derive_seed(c.seed, 0xe90c + epoch));
    std::vector<int> order = shuffle_rng.permutation(c.train_scenes);
    int in_batch = 0;
    for (int idx : order) {
      SceneSample s = toydetail::augment_with_occluders(
          train.scenes[static_cast<std::size_t>(idx)], c.occluder_probability, ranges, pol,
          derive_seed(c.seed, (static_cast<std::uint64_t>(epoch) << 20) + idx));
      ad::Var loss = toydetail::scene_training_loss(*det, s, c);
      ad::backward(ad::scale(loss, 1.0 / c.batch_size));
      if (++in_batch == c.batch_size) {
        opt.step();
        in_batch = 0;
      }
    }
    if (in_batch > 0) opt.step();
  }
  det->set_trainable(false);

  if (c.require_ap > 0.0) {
    double ap = toy_fixture_ap(*det, val);
    if (ap < c.require_ap)
      throw NumericFailure("toy detector below fixture bar: held-out AP " + format_double(ap) +
                           " < " + format_double(c.require_ap));
  }
  return det;
}

// Stable fingerprint of everything that influences training.
inline std::uint64_t toy_detector_config_digest(const ToyDetectorConfig& c) {
  std::string s = std::to_string(c.input_size) + "|" + std::to_string(c.seed) + "|" +
                  std::to_string(c.train_scenes) + "|" + std::to_string(c.val_scenes) + "|" +
                  std::to_string(c.epochs) + "|" + std::to_string(c.batch_size) + "|" +
                  format_double(c.lr) + "|" + format_double(c.noobj_weight) + "|" +
                  format_double(c.box_weight) + "|" + format_double(c.occluder_probability) + "|" +
                  format_double(c.require_ap) + "|" + format_double(c.detect_threshold) + "|" +
                  format_double(c.nms_iou) + "|" + std::to_string(c.scene.size) + "|" +
                  std::to_string(c.scene.min_persons) + "|" + std::to_string(c.scene.max_persons) +
                  "|" + format_double(c.scene.empty_probability) + "|" +
                  std::to_string(c.scene.clutter);
  return fnv1a64(s);
}

// Loads trained weights from `cache_dir` when a checkpoint for this exact
// config exists; otherwise trains and saves one.  Keeps repeated test runs
// and CLI invocations from paying the training cost more than once.
inline std::shared_ptr<ToyDetector> load_or_train_toy_detector(
    const ToyDetectorConfig& cfg, const std::filesystem::path& cache_dir) {
  ToyDetectorConfig c = cfg;
  c.scene.size = c.input_size;
  auto path = cache_dir / ("toy_detector_" + hex64(toy_detector_config_digest(c)) + ".psw");
  if (std::filesystem::exists(path)) {
    auto det = std::make_shared<ToyDetector>(c);
    det->load(path);
    return det;
  }
  auto det = make_toy_detector(c);
  det->save(path);
  return det;
}

}  // namespace patchsmith

#pragma once
// Attack-strength evaluation.  The detector's own predictions on clean images
// become the reference labels, which normalizes every detector/corpus pair to
// a score of exactly 100; a patched evaluation re-renders the patch onto each
// reference person box and measures how much average precision survives.
// Also: an embedding-similarity proxy for patch naturalness drift, the
// noise-level/step-size sweep, and the patches-by-detectors matrix.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "patchsmith/ap.hpp"
#include "patchsmith/corpus.hpp"
#include "patchsmith/detector.hpp"
#include "patchsmith/optimizer.hpp"
#include "patchsmith/renderer.hpp"

namespace patchsmith {

// ---------------------------------------------------------------------------
// Detections sidecar: one JSON object per image, bit-exact round-trip.
// ---------------------------------------------------------------------------

struct LabeledBox {
  BoundingBox box;
  double score = 0.0;
  std::string cls;
};

struct ImageDetections {
  std::string image_id;
  std::vector<LabeledBox> boxes;
};

struct DetectionsFile {
  std::vector<ImageDetections> images;
};

inline std::string detections_to_jsonl(const DetectionsFile& file) {
  std::string out;
  for (const auto& img : file.images) {
    nlohmann::json j;
    j["image_id"] = img.image_id;
    auto boxes = nlohmann::json::array();
    for (const auto& b : img.boxes)
      boxes.push_back({{"cx", b.box.cx},
                       {"cy", b.box.cy},
                       {"w", b.box.w},
                       {"h", b.box.h},
                       {"score", b.score},
                       {"class", b.cls}});
    j["boxes"] = boxes;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline DetectionsFile parse_detections_jsonl(const std::string& text) {
  DetectionsFile file;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw ConfigError("detections sidecar line is not JSON: " + line);
    ImageDetections img;
    img.image_id = j.at("image_id").get<std::string>();
    for (const auto& b : j.at("boxes")) {
      LabeledBox lb;
      lb.box.cx = b.at("cx").get<double>();
      lb.box.cy = b.at("cy").get<double>();
      lb.box.w = b.at("w").get<double>();
      lb.box.h = b.at("h").get<double>();
      lb.score = b.at("score").get<double>();
      lb.cls = b.at("class").get<std::string>();
      img.boxes.push_back(std::move(lb));
    }
    file.images.push_back(std::move(img));
  }
  return file;
}

inline void write_detections_jsonl(const std::filesystem::path& path,
                                   const DetectionsFile& file) {
  write_text_file(path, detections_to_jsonl(file));
}

inline DetectionsFile load_detections_jsonl(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw MissingAsset("detections sidecar not found: " + path.string());
  return parse_detections_jsonl(read_text_file(path));
}

// ---------------------------------------------------------------------------
// Reference labels and normalized mAP
// ---------------------------------------------------------------------------

struct EvalConfig {
  double iou_threshold = 0.5;   // match acceptance for scoring
  double conf_threshold = 0.5;  // reference-label keep threshold
  std::string person_class = "person";
  std::string dataset_id = "corpus";
  PlacementPolicy placement;

  void validate() const {
    if (!(iou_threshold > 0.0) || !(iou_threshold <= 1.0))
      throw ConfigError("eval: iou_threshold must lie in (0,1]");
    if (!(conf_threshold >= 0.0) || !(conf_threshold <= 1.0))
      throw ConfigError("eval: conf_threshold must lie in [0,1]");
    if (person_class.empty()) throw ConfigError("eval: person_class is empty");
  }
};

struct EvalReport {
  std::string detector_id;
  std::string dataset_id;
  double map_percent = 0.0;  // in [0,100]
  int n_images = 0;
  double iou_threshold = 0.0;
  double conf_threshold = 0.0;
};

namespace evaldetail {

inline bool image_readable(const SceneSample& s) {
  if (s.image.rank() != 3 || s.image.numel() == 0) return false;
  for (std::int64_t i = 0; i < s.image.numel(); ++i)
    if (!std::isfinite(s.image[i])) return false;
  return true;
}

// Transform draws for evaluation rendering live in their own stream so
// report numbers never depend on what the optimizer consumed.
inline std::uint64_t eval_render_seed(std::uint64_t seed, std::size_t image_index) {
  return derive_seed(derive_seed(seed, 0xe7a1), image_index);
}

}  // namespace evaldetail

// Runs the detector on clean images and keeps person boxes at or above the
// confidence threshold.  Unreadable images are skipped with a warning and
// excluded entirely (they appear in neither the sidecar nor the image count).
inline DetectionsFile generate_reference_labels(const DetectorContract& detector,
                                                const Corpus& corpus,
                                                const EvalConfig& cfg = {}) {
  cfg.validate();
  DetectionsFile file;
  for (const auto& scene : corpus.scenes) {
    if (!evaldetail::image_readable(scene)) {
      std::fprintf(stderr, "warning: skipping unreadable image '%s'\n", scene.id.c_str());
      continue;
    }
    ImageDetections img;
    img.image_id = scene.id;
    for (const auto& d : detector.detect(scene.image)) {
      double conf = d.confidence(cfg.person_class);
      if (conf >= cfg.conf_threshold)
        img.boxes.push_back({d.box, conf, cfg.person_class});
    }
    file.images.push_back(std::move(img));
  }
  return file;
}

// Average precision of the detector against its own clean-image reference,
// with the patch (when given) rendered onto every reference person box first.
// A null patch evaluates the clean images themselves and returns exactly
// 100.0 — the detections reproduce the reference, extra sub-threshold
// reports rank strictly below every true positive, and 11-point
// interpolation at full recall then sees precision 1.
inline EvalReport evaluate_map(const DetectorContract& detector, const Corpus& corpus,
                               const DetectionsFile& reference, const Tensor* patch,
                               const TransformRanges& ranges, std::uint64_t seed,
                               const EvalConfig& cfg = {}) {
  cfg.validate();
  if (reference.images.size() != corpus.scenes.size())
    throw ConfigError("evaluate_map: reference covers " +
                      std::to_string(reference.images.size()) + " images, corpus has " +
                      std::to_string(corpus.scenes.size()));
  for (std::size_t i = 0; i < corpus.scenes.size(); ++i)
    if (reference.images[i].image_id != corpus.scenes[i].id)
      throw ConfigError("evaluate_map: image id mismatch at index " + std::to_string(i) +
                        ": reference '" + reference.images[i].image_id + "' vs corpus '" +
                        corpus.scenes[i].id + "'");

  std::map<std::string, std::vector<BoundingBox>> ref_boxes;
  for (const auto& img : reference.images) {
    auto& lst = ref_boxes[img.image_id];
    for (const auto& b : img.boxes)
      if (b.cls == cfg.person_class) lst.push_back(b.box);
  }

  std::vector<ScoredBox> detections;
  for (std::size_t i = 0; i < corpus.scenes.size(); ++i) {
    const SceneSample& scene = corpus.scenes[i];
    Tensor image = scene.image;
    if (patch) {
      SceneSample anchored = scene;  // patch lands on the *reference* boxes
      anchored.person_boxes = ref_boxes[scene.id];
      image = render_scene_plain(anchored, *patch, ranges,
                                 evaldetail::eval_render_seed(seed, i), cfg.placement)
                  .image;
    }
    for (const auto& d : detector.detect(image)) {
      if (d.class_probs.find(cfg.person_class) == d.class_probs.end()) continue;
      detections.push_back({scene.id, d.box, d.confidence(cfg.person_class)});
    }
  }

  EvalReport report;
  report.detector_id = detector.id();
  report.dataset_id = cfg.dataset_id;
  report.map_percent = 100.0 * average_precision(detections, ref_boxes, cfg.iou_threshold);
  report.n_images = corpus.size();
  report.iou_threshold = cfg.iou_threshold;
  report.conf_threshold = cfg.conf_threshold;
  return report;
}

// ---------------------------------------------------------------------------
// Embedding similarity (patch naturalness-drift proxy)
// ---------------------------------------------------------------------------

class FeatureEmbedder {
 public:
  virtual ~FeatureEmbedder() = default;
  virtual std::string id() const = 0;
  virtual Tensor embed(const Tensor& image) const = 0;  // rank-1 feature vector
};

// Desk-scale default: per-channel adaptive 8x8 mean pooling followed by a
// fixed seeded Gaussian projection.  Deliberately linear (no bias, no
// nonlinearity): negating an image negates its embedding, and rescaling an
// image rescales it, so cosine similarity behaves like a proper angle.  A
// proxy for a pretrained image embedder — rank orders are meaningful,
// absolute values are not comparable across embedders.
class RandomProjectionEmbedder : public FeatureEmbedder {
 public:
  explicit RandomProjectionEmbedder(int channels = 3, int out_dim = 64,
                                    std::uint64_t seed = 0)
      : channels_(channels), out_dim_(out_dim), seed_(seed) {
    if (channels < 1) throw ConfigError("embedder: channels < 1");
    if (out_dim < 1) throw ConfigError("embedder: out_dim < 1");
    Rng rng(derive_seed(seed, 0xe3bed));
    projection_ = rng.normal_tensor({out_dim, channels * kPool * kPool});
  }

  std::string id() const override {
    return "randproj_" + std::to_string(out_dim_) + "_" + hex64(seed_);
  }

  Tensor embed(const Tensor& image) const override {
    if (image.rank() != 3 || image.dim(0) != channels_)
      throw std::invalid_argument("embedder: expected {" + std::to_string(channels_) +
                                  ",H,W}, got " + image.shape_string());
    int H = image.dim(1), W = image.dim(2);
    Tensor pooled({channels_ * kPool * kPool});
    for (int c = 0; c < channels_; ++c)
      for (int py = 0; py < kPool; ++py)
        for (int px = 0; px < kPool; ++px) {
          int y0 = py * H / kPool, y1 = std::max(y0 + 1, (py + 1) * H / kPool);
          int x0 = px * W / kPool, x1 = std::max(x0 + 1, (px + 1) * W / kPool);
          y1 = std::min(y1, H);
          x1 = std::min(x1, W);
          if (y0 >= y1) y0 = y1 - 1;
          if (x0 >= x1) x0 = x1 - 1;
          double sum = 0.0;
          for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) sum += image.at(c, y, x);
          pooled[(c * kPool + py) * kPool + px] = sum / ((y1 - y0) * (x1 - x0));
        }
    Tensor out({out_dim_});
    for (int k = 0; k < out_dim_; ++k) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < pooled.numel(); ++j)
        acc += projection_[k * pooled.numel() + j] * pooled[j];
      out[k] = acc;
    }
    return out;
  }

 private:
  static constexpr int kPool = 8;
  int channels_;
  int out_dim_;
  std::uint64_t seed_;
  Tensor projection_;
};

// Cosine similarity of the two images' embeddings, clamped into [-1,1].
// A zero embedding has no direction; similarity against it is defined as 0.
inline double embedding_similarity(const Tensor& img_a, const Tensor& img_b,
                                   const FeatureEmbedder& embedder) {
  if (img_a.shape() != img_b.shape())
    throw std::invalid_argument("embedding_similarity: image shapes differ: " +
                                img_a.shape_string() + " vs " + img_b.shape_string());
  Tensor ea = embedder.embed(img_a);
  Tensor eb = embedder.embed(img_b);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::int64_t i = 0; i < ea.numel(); ++i) {
    dot += ea[i] * eb[i];
    na += ea[i] * ea[i];
    nb += eb[i] * eb[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Noise-level / step-size / guidance-weight sweep
// ---------------------------------------------------------------------------

inline std::string sanitize_status(std::string s) {
  for (char& c : s) {
    if (c == ',') c = ';';
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

struct SweepGridSpec {
  std::vector<int> t_start_values;
  std::vector<int> s_values;
  std::vector<double> cfg_weights = {1.0};
  OptimizeConfig optimize;     // per-cell budget; its sampler t/s/w are overridden
  SamplerConfig init_sampler;  // full from-scratch walk for the shared init patch
  std::uint64_t eval_seed = 0;
  EvalConfig eval;

  void validate() const {
    if (t_start_values.empty()) throw ConfigError("sweep: no t_start values");
    if (s_values.empty()) throw ConfigError("sweep: no s values");
    if (cfg_weights.empty()) throw ConfigError("sweep: no guidance weights");
    optimize.validate();
    eval.validate();
  }
};

struct SweepRow {
  int t_start = 0;
  int s = 0;
  double cfg_w = 1.0;
  double map_percent = std::numeric_limits<double>::quiet_NaN();
  double clip_sim = std::numeric_limits<double>::quiet_NaN();
  std::string status = "ok";
};

struct SweepResult {
  std::vector<SweepRow> rows;
};

// One short-budget optimization per grid cell; every cell yields exactly one
// row.  A failing cell records its error in the status column (commas
// sanitized) and the sweep continues.  The init patch is shared across cells
// so similarity differences come from the per-cell resampling alone.
inline SweepResult sweep_noise_step(const SweepGridSpec& grid, const BoundStack& stack,
                                    const Corpus& corpus, const FeatureEmbedder& embedder) {
  grid.validate();
  stack.validate();
  if (corpus.empty()) throw ConfigError("sweep: corpus is empty");

  LatentState init =
      init_patch(grid.init_sampler, stack.condition, *stack.predictor, *stack.schedule);
  Tensor p_init = stack.codec->decode(ad::Var::leaf(init.value)).value();
  DetectionsFile reference =
      generate_reference_labels(*stack.detectors.front(), corpus, grid.eval);

  SweepResult result;
  for (int t : grid.t_start_values)
    for (int s : grid.s_values)
      for (double w : grid.cfg_weights) {
        SweepRow row;
        row.t_start = t;
        row.s = s;
        row.cfg_w = w;
        try {
          OptimizeConfig cfg = grid.optimize;
          cfg.sampler.t_start = t;
          cfg.sampler.s = s;
          cfg.sampler.cfg_weight = w;
          auto [best, trace] = optimize_patch(init, corpus.scenes, cfg, stack);
          Tensor p_final = stack.codec->decode(ad::Var::leaf(best.value)).value();
          row.map_percent = evaluate_map(*stack.detectors.front(), corpus, reference,
                                         &p_final, stack.ranges, grid.eval_seed, grid.eval)
                                .map_percent;
          row.clip_sim = embedding_similarity(p_init, p_final, embedder);
        } catch (const std::exception& e) {
          row.status = sanitize_status(e.what());
        }
        result.rows.push_back(std::move(row));
      }
  return result;
}

inline void write_sweep_csv(const std::filesystem::path& path, const SweepResult& result) {
  std::string out = "t_start,s,cfg_w,mAP,clip_sim,status\n";
  for (const auto& r : result.rows) {
    out += std::to_string(r.t_start);
    out += ',';
    out += std::to_string(r.s);
    out += ',';
    out += format_double(r.cfg_w);
    out += ',';
    out += format_double(r.map_percent);
    out += ',';
    out += format_double(r.clip_sim);
    out += ',';
    out += r.status;
    out += '\n';
  }
  write_text_file(path, out);
}

// ---------------------------------------------------------------------------
// Patches-by-detectors matrix
// ---------------------------------------------------------------------------

struct NamedPatch {
  std::string name;
  Tensor pixels;
};

struct CrossMatrix {
  std::vector<std::string> patch_names;
  std::vector<std::string> detector_names;
  std::vector<std::vector<EvalReport>> cells;   // [patch][detector]
  std::vector<std::vector<std::string>> status;  // "ok" or the cell's error
};

// Evaluates every patch against every detector on one corpus.  Reference
// labels are generated per detector; a failing cell is isolated (NaN score,
// error recorded) and the rest of the matrix still fills in.  Each cell
// depends only on its own patch, detector, the corpus and the seed.
inline CrossMatrix cross_model_matrix(const std::vector<NamedPatch>& patches,
                                      const std::vector<const DetectorContract*>& detectors,
                                      const Corpus& corpus, const TransformRanges& ranges,
                                      std::uint64_t seed, const EvalConfig& cfg = {}) {
  cfg.validate();
  if (patches.empty()) throw ConfigError("matrix: no patches");
  if (detectors.empty()) throw ConfigError("matrix: no detectors");
  for (const auto* d : detectors)
    if (!d) throw ConfigError("matrix: null detector");

  CrossMatrix m;
  for (const auto& p : patches) m.patch_names.push_back(p.name);

  std::vector<DetectionsFile> references(detectors.size());
  std::vector<std::string> reference_errors(detectors.size());
  for (std::size_t j = 0; j < detectors.size(); ++j) {
    m.detector_names.push_back(detectors[j]->id());
    try {
      references[j] = generate_reference_labels(*detectors[j], corpus, cfg);
    } catch (const std::exception& e) {
      reference_errors[j] = sanitize_status(e.what());
    }
  }

  for (const auto& p : patches) {
    std::vector<EvalReport> row(detectors.size());
    std::vector<std::string> row_status(detectors.size(), "ok");
    for (std::size_t j = 0; j < detectors.size(); ++j) {
      if (!reference_errors[j].empty()) {
        row[j].map_percent = std::numeric_limits<double>::quiet_NaN();
        row_status[j] = reference_errors[j];
        continue;
      }
      try {
        row[j] = evaluate_map(*detectors[j], corpus, references[j], &p.pixels, ranges,
                              seed, cfg);
      } catch (const std::exception& e) {
        row[j].map_percent = std::numeric_limits<double>::quiet_NaN();
        row_status[j] = sanitize_status(e.what());
      }
    }
    m.cells.push_back(std::move(row));
    m.status.push_back(std::move(row_status));
  }
  return m;
}

namespace evaldetail {

inline double finite_mean(const std::vector<double>& values) {
  double sum = 0.0;
  int n = 0;
  for (double v : values)
    if (std::isfinite(v)) {
      sum += v;
      ++n;
    }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / n;
}

}  // namespace evaldetail

// Detectors as columns, patches as rows, trailing Avg. column; a final Avg.
// row carries the column averages.  Averages ignore failed (NaN) cells.
inline void write_matrix_csv(const std::filesystem::path& path, const CrossMatrix& m) {
  std::string out = "patch";
  for (const auto& d : m.detector_names) out += "," + sanitize_status(d);
  out += ",Avg.\n";

  std::vector<std::vector<double>> columns(m.detector_names.size());
  std::vector<double> all;
  for (std::size_t i = 0; i < m.cells.size(); ++i) {
    out += sanitize_status(m.patch_names[i]);
    std::vector<double> row_vals;
    for (std::size_t j = 0; j < m.cells[i].size(); ++j) {
      double v = m.cells[i][j].map_percent;
      out += "," + format_double(v);
      row_vals.push_back(v);
      columns[j].push_back(v);
      all.push_back(v);
    }
    out += "," + format_double(evaldetail::finite_mean(row_vals));
    out += '\n';
  }
  out += "Avg.";
  for (const auto& col : columns) out += "," + format_double(evaldetail::finite_mean(col));
  out += "," + format_double(evaldetail::finite_mean(all));
  out += '\n';
  write_text_file(path, out);
}

}  // namespace patchsmith

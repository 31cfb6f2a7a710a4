#pragma once
// Synthetic desk-scale scenes and corpus persistence.
//
// A scene is a textured outdoor-ish background (greens/browns, mild clutter)
// with zero or more "person" figures — a distinctive magenta/red blob family
// (head + torso + legs) a small detector can learn reliably.  Ground-truth
// boxes come from the generating geometry, so fixture quality is measurable.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "patchsmith/common.hpp"
#include "patchsmith/png_io.hpp"
#include "patchsmith/renderer.hpp"
#include "patchsmith/rng.hpp"

namespace patchsmith {

struct SyntheticSceneConfig {
  int size = 64;
  int min_persons = 1;
  int max_persons = 2;
  double empty_probability = 0.0;  // chance of a background-only scene
  int clutter = 4;                 // count of benign near-background blobs
};

struct Corpus {
  std::vector<SceneSample> scenes;
  bool empty() const { return scenes.empty(); }
  int size() const { return static_cast<int>(scenes.size()); }
};

namespace scenedetail {

inline void fill_background(Tensor& img, Rng& rng) {
  int H = img.dim(1), W = img.dim(2);
  bool brown = rng.uniform() < 0.35;
  double base[3];
  if (brown) {
    base[0] = rng.uniform(0.40, 0.55);
    base[1] = rng.uniform(0.28, 0.40);
    base[2] = rng.uniform(0.15, 0.25);
  } else {
    base[0] = rng.uniform(0.15, 0.35);
    base[1] = rng.uniform(0.40, 0.60);
    base[2] = rng.uniform(0.10, 0.25);
  }
  double fx = rng.uniform(0.5, 2.5), fy = rng.uniform(0.5, 2.5);
  double phase = rng.uniform(0.0, 6.283185307179586);
  double amp = rng.uniform(0.02, 0.06);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double tex = amp * std::sin(6.283185307179586 * (fx * x / W + fy * y / H) + phase);
      double jitter = rng.uniform(-0.03, 0.03);
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = std::clamp(base[c] + tex + jitter, 0.0, 1.0);
    }
}

inline void fill_ellipse(Tensor& img, double cx, double cy, double rx, double ry,
                         const double color[3]) {
  int H = img.dim(1), W = img.dim(2);
  int y0 = std::max(0, static_cast<int>(std::floor(cy - ry)));
  int y1 = std::min(H - 1, static_cast<int>(std::ceil(cy + ry)));
  int x0 = std::max(0, static_cast<int>(std::floor(cx - rx)));
  int x1 = std::min(W - 1, static_cast<int>(std::ceil(cx + rx)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      double dx = (x - cx) / rx, dy = (y - cy) / ry;
      if (dx * dx + dy * dy <= 1.0)
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[c];
    }
}

inline void fill_rect(Tensor& img, int x0, int y0, int x1, int y1, const double color[3]) {
  int H = img.dim(1), W = img.dim(2);
  for (int y = std::max(0, y0); y <= std::min(H - 1, y1); ++y)
    for (int x = std::max(0, x0); x <= std::min(W - 1, x1); ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[c];
}

// Draws one person; returns its tight bounding box in pixels.
inline void draw_person(Tensor& img, Rng& rng, double px, double py, double hp, double wp,
                        double& bx0, double& by0, double& bx1, double& by1) {
  // color family: strong red/magenta, unmistakably non-background
  double color[3] = {rng.uniform(0.75, 0.95), rng.uniform(0.05, 0.22),
                     rng.uniform(0.35, 0.80)};

  double head_r = 0.16 * hp;
  double head_cy = py - 0.34 * hp;
  double torso_ry = 0.26 * hp;
  double torso_cy = py - 0.02 * hp;
  double leg_w = std::max(1.0, 0.17 * wp * 2.0);

  fill_ellipse(img, px, head_cy, head_r, head_r, color);
  fill_ellipse(img, px, torso_cy, 0.5 * wp, torso_ry, color);
  int leg_top = static_cast<int>(std::lround(torso_cy + torso_ry * 0.6));
  int leg_bot = static_cast<int>(std::lround(py + 0.5 * hp));
  int lx = static_cast<int>(std::lround(px - 0.30 * wp));
  int rx = static_cast<int>(std::lround(px + 0.30 * wp));
  int half_leg = std::max(1, static_cast<int>(std::lround(leg_w * 0.5)));
  fill_rect(img, lx - half_leg, leg_top, lx + half_leg, leg_bot, color);
  fill_rect(img, rx - half_leg, leg_top, rx + half_leg, leg_bot, color);

  bx0 = px - 0.5 * wp;
  bx1 = px + 0.5 * wp;
  by0 = head_cy - head_r;
  by1 = py + 0.5 * hp;
}

}  // namespace scenedetail

inline SceneSample make_synthetic_scene(std::uint64_t seed, const SyntheticSceneConfig& cfg = {}) {
  if (cfg.size < 32) throw std::invalid_argument("make_synthetic_scene: size too small");
  Rng rng(derive_seed(seed, 0x5ce7e));
  SceneSample scene;
  scene.id = "scene_" + hex64(seed);
  scene.image = Tensor({3, cfg.size, cfg.size});
  scenedetail::fill_background(scene.image, rng);

  // benign clutter: dim blobs in background-adjacent colors
  for (int i = 0; i < cfg.clutter; ++i) {
    double color[3] = {rng.uniform(0.1, 0.5), rng.uniform(0.2, 0.55), rng.uniform(0.05, 0.3)};
    scenedetail::fill_ellipse(scene.image, rng.uniform(4, cfg.size - 4),
                              rng.uniform(4, cfg.size - 4), rng.uniform(2, 6),
                              rng.uniform(2, 6), color);
  }

  int n_persons = 0;
  if (rng.uniform() >= cfg.empty_probability)
    n_persons = cfg.min_persons +
                static_cast<int>(rng.next_u64() %
                                 static_cast<std::uint64_t>(cfg.max_persons - cfg.min_persons + 1));

  // Rejection sampling keeps persons apart: a painted-over figure leaves a
  // ground-truth box no detector could recover, and near-touching figures are
  // ambiguous at desk-scale resolution.  Boxes inflated by `gap` pixels per
  // side must stay disjoint.
  const double gap = 2.0;
  auto overlaps = [&](double x0, double y0, double x1, double y1) {
    for (const auto& b : scene.person_boxes) {
      double ox0 = (b.cx - b.w / 2) * cfg.size, ox1 = (b.cx + b.w / 2) * cfg.size;
      double oy0 = (b.cy - b.h / 2) * cfg.size, oy1 = (b.cy + b.h / 2) * cfg.size;
      double ix = std::min(x1 + gap, ox1 + gap) - std::max(x0 - gap, ox0 - gap);
      double iy = std::min(y1 + gap, oy1 + gap) - std::max(y0 - gap, oy0 - gap);
      if (ix > 0.0 && iy > 0.0) return true;
    }
    return false;
  };

  for (int i = 0; i < n_persons; ++i) {
    double hp = rng.uniform(0.36, 0.54) * cfg.size;
    double wp = hp * rng.uniform(0.42, 0.54);
    double margin = 0.55 * hp;
    bool placed = false;
    double px = 0.0, py = 0.0;
    for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
      px = rng.uniform(margin, cfg.size - margin);
      py = rng.uniform(margin, cfg.size - margin);
      placed = !overlaps(px - 0.5 * wp, py - 0.5 * hp, px + 0.5 * wp, py + 0.5 * hp);
    }
    if (!placed) continue;  // crowded scene: draw fewer persons
    double bx0, by0, bx1, by1;
    scenedetail::draw_person(scene.image, rng, px, py, hp, wp, bx0, by0, bx1, by1);
    BoundingBox box;
    box.cx = 0.5 * (bx0 + bx1) / cfg.size;
    box.cy = 0.5 * (by0 + by1) / cfg.size;
    box.w = (bx1 - bx0) / cfg.size;
    box.h = (by1 - by0) / cfg.size;
    scene.person_boxes.push_back(box);
  }
  return scene;
}

inline Corpus make_synthetic_corpus(int n, std::uint64_t seed,
                                    const SyntheticSceneConfig& cfg = {}) {
  Corpus corpus;
  corpus.scenes.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    SceneSample s = make_synthetic_scene(derive_seed(seed, static_cast<std::uint64_t>(i)), cfg);
    char id[32];
    std::snprintf(id, sizeof id, "scene_%04d", i);
    s.id = id;
    corpus.scenes.push_back(std::move(s));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Persistence: images/<id>.png + index.jsonl with one record per scene.
// ---------------------------------------------------------------------------

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::string index;
  for (const auto& s : corpus.scenes) {
    write_png_tensor(dir / "images" / (s.id + ".png"), s.image);
    nlohmann::json j;
    j["id"] = s.id;
    j["image"] = "images/" + s.id + ".png";
    auto boxes = nlohmann::json::array();
    for (const auto& b : s.person_boxes)
      boxes.push_back({{"cx", b.cx}, {"cy", b.cy}, {"h", b.h}, {"w", b.w}});
    j["boxes"] = boxes;
    index += j.dump() + "\n";
  }
  write_text_file(dir / "index.jsonl", index);
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  auto index_path = dir / "index.jsonl";
  if (!std::filesystem::exists(index_path))
    throw MissingAsset("corpus index not found: " + index_path.string());
  std::string text = read_text_file(index_path);
  Corpus corpus;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw MissingAsset("corpus index line is not JSON: " + line);
    SceneSample s;
    s.id = j.at("id").get<std::string>();
    s.image = read_png_tensor(dir / j.at("image").get<std::string>());
    for (const auto& b : j.at("boxes")) {
      BoundingBox box;
      box.cx = b.at("cx").get<double>();
      box.cy = b.at("cy").get<double>();
      box.w = b.at("w").get<double>();
      box.h = b.at("h").get<double>();
      s.person_boxes.push_back(box);
    }
    corpus.scenes.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace patchsmith

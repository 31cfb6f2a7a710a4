#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "patchsmith/corpus.hpp"
#include "patchsmith/png_io.hpp"
#include "patchsmith/renderer.hpp"

using namespace patchsmith;
namespace adf = patchsmith::ad;

TEST_CASE("png round trip is exact") {
  Rng r(3);
  ImageU8 img;
  img.width = 13;
  img.height = 7;
  img.rgb.resize(13 * 7 * 3);
  for (auto& b : img.rgb) b = static_cast<unsigned char>(r.next_u64() & 0xff);

  auto bytes = encode_png_rgb8(img);
  auto back = decode_png_rgb8(bytes);
  REQUIRE(back.width == img.width);
  REQUIRE(back.height == img.height);
  REQUIRE(back.rgb == img.rgb);

  // byte-stable encoding
  REQUIRE(encode_png_rgb8(img) == bytes);
}

TEST_CASE("png tensor conversion quantizes to 8 bits") {
  Rng r(5);
  Tensor t = r.uniform_tensor({3, 6, 6}, 0.0, 1.0);
  Tensor back = image_to_tensor(tensor_to_image(t));
  REQUIRE(max_abs_diff(back, t) <= 0.5 / 255.0 + 1e-12);
  // quantized values are fixed points of the round trip
  Tensor twice = image_to_tensor(tensor_to_image(back));
  REQUIRE(max_abs_diff(twice, back) == 0.0);
}

TEST_CASE("png decoder handles filtered scanlines") {
  // hand-build a stream using filter types 1 and 2, check exact recovery
  ImageU8 img;
  img.width = 4;
  img.height = 2;
  img.rgb = {10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120,
             5,  15, 25, 35, 45, 55, 65, 75, 85, 95,  105, 115};
  std::vector<unsigned char> raw;
  raw.push_back(1);  // sub filter
  for (int x = 0; x < 12; ++x) {
    int a = x >= 3 ? img.rgb[static_cast<std::size_t>(x - 3)] : 0;
    raw.push_back(static_cast<unsigned char>((img.rgb[static_cast<std::size_t>(x)] - a) & 0xff));
  }
  raw.push_back(2);  // up filter
  for (int x = 0; x < 12; ++x)
    raw.push_back(static_cast<unsigned char>(
        (img.rgb[static_cast<std::size_t>(12 + x)] - img.rgb[static_cast<std::size_t>(x)]) & 0xff));

  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(bound);
  REQUIRE(compress2(comp.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) == Z_OK);
  comp.resize(bound);

  std::vector<unsigned char> stream = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<unsigned char> ihdr;
  pngdetail::put_u32(ihdr, 4);
  pngdetail::put_u32(ihdr, 2);
  for (unsigned char b : {8, 2, 0, 0, 0}) ihdr.push_back(b);
  pngdetail::put_chunk(stream, "IHDR", ihdr);
  pngdetail::put_chunk(stream, "IDAT", comp);
  pngdetail::put_chunk(stream, "IEND", {});

  auto back = decode_png_rgb8(stream);
  REQUIRE(back.rgb == img.rgb);
}

TEST_CASE("transform sampling respects ranges and determinism") {
  TransformRanges r;
  for (std::uint64_t seed : {1ull, 2ull, 99ull}) {
    auto p = sample_transform(r, seed);
    REQUIRE(p.brightness_shift >= r.brightness_lo);
    REQUIRE(p.brightness_shift <= r.brightness_hi);
    REQUIRE(p.contrast_gain >= r.contrast_lo);
    REQUIRE(p.contrast_gain <= r.contrast_hi);
    REQUIRE(p.noise_amplitude >= r.noise_lo);
    REQUIRE(p.noise_amplitude <= r.noise_hi);
    REQUIRE(p.rotation_deg >= r.rotation_deg_lo);
    REQUIRE(p.rotation_deg <= r.rotation_deg_hi);
    REQUIRE(p.scale_jitter >= r.scale_lo);
    REQUIRE(p.scale_jitter <= r.scale_hi);
  }
  auto a = sample_transform(r, 7);
  auto b = sample_transform(r, 7);
  REQUIRE(a.brightness_shift == b.brightness_shift);
  REQUIRE(a.seed == b.seed);
}

TEST_CASE("contrast draws center on 1 over a symmetric range") {
  TransformRanges r;
  r.contrast_lo = 0.8;
  r.contrast_hi = 1.2;
  double acc = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) acc += sample_transform(r, 1000 + static_cast<std::uint64_t>(i)).contrast_gain;
  REQUIRE(std::abs(acc / n - 1.0) < 0.005);
}

TEST_CASE("identity transform returns the patch unchanged") {
  Rng r(11);
  Tensor patch = r.uniform_tensor({3, 9, 9}, 0.0, 1.0);
  TransformParams tp;  // all defaults are the identity
  Tensor out = apply_transform(patch, tp);
  REQUIRE(max_abs_diff(out, patch) == 0.0);
}

TEST_CASE("photometric transform formula") {
  Tensor patch({1, 2, 2}, 0.0);
  patch.at(0, 0, 0) = 0.2;
  patch.at(0, 0, 1) = 0.5;
  patch.at(0, 1, 0) = 0.8;
  patch.at(0, 1, 1) = 1.0;
  TransformParams tp;
  tp.contrast_gain = 1.2;
  tp.brightness_shift = 0.05;
  Tensor out = apply_transform(patch, tp);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      double expect = std::clamp(1.2 * (patch.at(0, y, x) - 0.5) + 0.5 + 0.05, 0.0, 1.0);
      REQUIRE(std::abs(out.at(0, y, x) - expect) < 1e-15);
    }
}

TEST_CASE("two 180-degree rotations approximate the identity") {
  Rng r(13);
  Tensor patch = r.uniform_tensor({3, 12, 12}, 0.2, 0.8);
  TransformParams tp;
  tp.rotation_deg = 180.0;
  Tensor once = apply_transform(patch, tp);
  Tensor twice = apply_transform(once, tp);
  REQUIRE(max_abs_diff(twice, patch) <= 1e-2);
}

TEST_CASE("transforms are differentiable w.r.t. the patch") {
  Rng r(17);
  auto patch = adf::Var::param(r.uniform_tensor({2, 5, 5}, 0.15, 0.85));
  TransformParams tp;
  tp.contrast_gain = 1.1;
  tp.brightness_shift = -0.04;
  tp.noise_amplitude = 0.02;
  tp.rotation_deg = 9.0;
  tp.scale_jitter = 1.05;
  tp.seed = 99;

  auto run = [&] { return adf::sum(adf::square(apply_transform(patch, tp))); };
  auto out = run();
  adf::backward(out);
  Tensor analytic = patch.grad();
  double eps = 1e-6;
  for (std::int64_t i = 0; i < patch.value().numel(); i += 7) {
    double orig = patch.value()[i];
    patch.mutable_value()[i] = orig + eps;
    double fp = run().item();
    patch.mutable_value()[i] = orig - eps;
    double fm = run().item();
    patch.mutable_value()[i] = orig;
    double num = (fp - fm) / (2 * eps);
    REQUIRE(std::abs(analytic[i] - num) <= 1e-4 * std::max(1.0, std::abs(num)));
  }
}

TEST_CASE("patch placement covers the configured torso fraction") {
  SceneSample scene;
  scene.id = "s";
  scene.image = Tensor({3, 64, 64}, 0.3);
  BoundingBox box{0.5, 0.5, 0.4, 0.6};  // 25.6 x 38.4 px box centered at 32
  scene.person_boxes.push_back(box);

  Tensor patch({3, 8, 8}, 0.9);
  auto out = place_patch_plain(scene, patch);

  // expected geometry: width round(0.65*25.6) = 17, square patch -> height 17
  // center x = 32, center y = top + 0.45*38.4 = 12.8 + 17.28 = 30.08
  int x0 = static_cast<int>(std::lround(32.0 - 8.5));
  int y0 = static_cast<int>(std::lround(30.08 - 8.5));
  // resizing a constant patch keeps it constant up to 1-ulp rounding
  auto is_patch = [&](int y, int x) {
    return std::abs(out.image.at(0, y, x) - 0.9) < 1e-9 &&
           std::abs(out.image.at(1, y, x) - 0.9) < 1e-9;
  };
  int count = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      if (is_patch(y, x)) ++count;
  REQUIRE(count == 17 * 17);
  REQUIRE(is_patch(y0, x0));
  REQUIRE(!is_patch(y0 - 1, x0 - 1));
  REQUIRE(is_patch(y0 + 16, x0 + 16));
  REQUIRE(!is_patch(y0 + 17, x0 + 17));
}

TEST_CASE("patch placement clips at scene edges and stays in range") {
  SceneSample scene;
  scene.id = "edge";
  scene.image = Tensor({3, 32, 32}, 0.4);
  scene.person_boxes.push_back({0.02, 0.5, 0.3, 0.8});  // mostly off-canvas to the left

  Rng r(19);
  Tensor patch = r.uniform_tensor({3, 6, 6}, 0.0, 1.0);
  auto out = place_patch_plain(scene, patch);
  REQUIRE(out.image.all_finite());
  for (std::int64_t i = 0; i < out.image.numel(); ++i) {
    REQUIRE(out.image[i] >= 0.0);
    REQUIRE(out.image[i] <= 1.0);
  }
  // something was pasted at the left edge
  bool changed = false;
  for (int y = 0; y < 32 && !changed; ++y) changed = out.image.at(0, y, 0) != 0.4;
  REQUIRE(changed);
}

TEST_CASE("render_scene draws per-seed transforms and is deterministic") {
  auto scene = make_synthetic_scene(77);
  Rng r(23);
  Tensor patch = r.uniform_tensor({3, 8, 8}, 0.0, 1.0);
  TransformRanges ranges;

  auto a = render_scene_plain(scene, patch, ranges, 5);
  auto b = render_scene_plain(scene, patch, ranges, 5);
  auto c = render_scene_plain(scene, patch, ranges, 6);
  REQUIRE(max_abs_diff(a.image, b.image) == 0.0);
  REQUIRE(max_abs_diff(a.image, c.image) > 0.0);
}

TEST_CASE("synthetic scenes carry persons inside their boxes") {
  SyntheticSceneConfig cfg;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    auto s = make_synthetic_scene(seed, cfg);
    REQUIRE(s.image.all_finite());
    REQUIRE(!s.person_boxes.empty());
    for (const auto& b : s.person_boxes) {
      REQUIRE(b.w > 0.05);
      REQUIRE(b.h > 0.1);
      // the box interior contains person-colored pixels (red channel high,
      // green low) - the signature of the figure family
      int hits = 0;
      int x0 = static_cast<int>((b.cx - b.w / 2) * cfg.size);
      int x1 = static_cast<int>((b.cx + b.w / 2) * cfg.size);
      int y0 = static_cast<int>((b.cy - b.h / 2) * cfg.size);
      int y1 = static_cast<int>((b.cy + b.h / 2) * cfg.size);
      for (int y = std::max(0, y0); y < std::min(cfg.size, y1); ++y)
        for (int x = std::max(0, x0); x < std::min(cfg.size, x1); ++x)
          if (s.image.at(0, y, x) > 0.7 && s.image.at(1, y, x) < 0.3) ++hits;
      REQUIRE(hits > 10);
    }
  }
}

TEST_CASE("corpus round trip preserves ids, boxes and quantized pixels") {
  auto dir = std::filesystem::temp_directory_path() / "patchsmith_corpus_test";
  std::filesystem::remove_all(dir);
  Corpus corpus = make_synthetic_corpus(5, 42);
  write_corpus(corpus, dir);
  Corpus back = load_corpus(dir);
  REQUIRE(back.size() == corpus.size());
  for (int i = 0; i < corpus.size(); ++i) {
    REQUIRE(back.scenes[static_cast<std::size_t>(i)].id ==
            corpus.scenes[static_cast<std::size_t>(i)].id);
    REQUIRE(back.scenes[static_cast<std::size_t>(i)].person_boxes.size() ==
            corpus.scenes[static_cast<std::size_t>(i)].person_boxes.size());
    REQUIRE(max_abs_diff(back.scenes[static_cast<std::size_t>(i)].image,
                         corpus.scenes[static_cast<std::size_t>(i)].image) <=
            0.5 / 255.0 + 1e-12);
  }
  REQUIRE_THROWS_AS(load_corpus(dir / "nope"), MissingAsset);
  std::filesystem::remove_all(dir);
}

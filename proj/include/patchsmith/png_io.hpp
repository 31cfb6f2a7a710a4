#pragma once
// Minimal PNG reader/writer (8-bit RGB/RGBA, non-interlaced) on top of zlib.
// The writer always emits the same byte stream for the same pixels: fixed
// zlib level, filter 0 on every scanline, no ancillary chunks.  Rerunning a
// pipeline therefore reproduces artifacts bit-for-bit, which is part of the
// reproducibility contract.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "patchsmith/common.hpp"
#include "patchsmith/tensor.hpp"

namespace patchsmith {

struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> rgb;  // 3 bytes per pixel, row-major
};

namespace pngdetail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void put_chunk(std::vector<unsigned char>& out, const char type[4],
                      const std::vector<unsigned char>& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  std::uint32_t crc = static_cast<std::uint32_t>(
      ::crc32(0L, out.data() + start, static_cast<uInt>(4 + data.size())));
  put_u32(out, crc);
}

inline int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace pngdetail

inline std::vector<unsigned char> encode_png_rgb8(const ImageU8& img) {
  if (img.width <= 0 || img.height <= 0 ||
      img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3)
    throw std::invalid_argument("encode_png_rgb8: bad image");

  std::vector<unsigned char> raw;
  raw.reserve((static_cast<std::size_t>(img.width) * 3 + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter type 0 for every scanline
    const unsigned char* row = img.rgb.data() + static_cast<std::size_t>(y) * img.width * 3;
    raw.insert(raw.end(), row, row + static_cast<std::size_t>(img.width) * 3);
  }

  uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> compressed(bound);
  if (::compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw NumericFailure("encode_png_rgb8: deflate failed");
  compressed.resize(bound);

  std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<unsigned char> ihdr;
  pngdetail::put_u32(ihdr, static_cast<std::uint32_t>(img.width));
  pngdetail::put_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type: truecolor RGB
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter method
  ihdr.push_back(0);  // no interlace
  pngdetail::put_chunk(out, "IHDR", ihdr);
  pngdetail::put_chunk(out, "IDAT", compressed);
  pngdetail::put_chunk(out, "IEND", {});
  return out;
}

inline ImageU8 decode_png_rgb8(const std::vector<unsigned char>& bytes) {
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw MissingAsset("decode_png_rgb8: not a PNG stream");

  int width = 0, height = 0, color_type = -1;
  std::vector<unsigned char> idat;
  std::size_t pos = 8;
  while (pos + 12 <= bytes.size()) {
    std::uint32_t len = pngdetail::get_u32(bytes.data() + pos);
    if (pos + 12 + len > bytes.size()) throw MissingAsset("decode_png_rgb8: truncated chunk");
    std::string type(reinterpret_cast<const char*>(bytes.data() + pos + 4), 4);
    const unsigned char* data = bytes.data() + pos + 8;
    std::uint32_t crc_want = pngdetail::get_u32(data + len);
    std::uint32_t crc_have = static_cast<std::uint32_t>(
        ::crc32(0L, bytes.data() + pos + 4, static_cast<uInt>(4 + len)));
    if (crc_want != crc_have) throw MissingAsset("decode_png_rgb8: chunk CRC mismatch");

    if (type == "IHDR") {
      if (len != 13) throw MissingAsset("decode_png_rgb8: bad IHDR");
      width = static_cast<int>(pngdetail::get_u32(data));
      height = static_cast<int>(pngdetail::get_u32(data + 4));
      int bit_depth = data[8];
      color_type = data[9];
      if (bit_depth != 8 || (color_type != 2 && color_type != 6) || data[12] != 0)
        throw MissingAsset("decode_png_rgb8: only 8-bit RGB/RGBA non-interlaced supported");
    } else if (type == "IDAT") {
      idat.insert(idat.end(), data, data + len);
    } else if (type == "IEND") {
      break;
    }
    pos += 12 + len;
  }
  if (width <= 0 || height <= 0 || idat.empty())
    throw MissingAsset("decode_png_rgb8: missing IHDR or IDAT");

  int bpp = (color_type == 6) ? 4 : 3;
  std::size_t stride = static_cast<std::size_t>(width) * bpp;
  std::vector<unsigned char> raw((stride + 1) * height);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (::uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw MissingAsset("decode_png_rgb8: inflate failed");

  // Undo per-scanline filters.
  std::vector<unsigned char> flat(stride * height);
  for (int y = 0; y < height; ++y) {
    unsigned char filter = raw[(stride + 1) * y];
    const unsigned char* src = raw.data() + (stride + 1) * y + 1;
    unsigned char* dst = flat.data() + stride * y;
    const unsigned char* up = (y > 0) ? flat.data() + stride * (y - 1) : nullptr;
    for (std::size_t x = 0; x < stride; ++x) {
      int a = (x >= static_cast<std::size_t>(bpp)) ? dst[x - bpp] : 0;
      int b = up ? up[x] : 0;
      int c = (up && x >= static_cast<std::size_t>(bpp)) ? up[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += pngdetail::paeth(a, b, c); break;
        default: throw MissingAsset("decode_png_rgb8: unknown filter type");
      }
      dst[x] = static_cast<unsigned char>(v & 0xff);
    }
  }

  ImageU8 img;
  img.width = width;
  img.height = height;
  img.rgb.resize(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t p = 0; p < static_cast<std::size_t>(width) * height; ++p)
    for (int ch = 0; ch < 3; ++ch)
      img.rgb[p * 3 + ch] = flat[p * static_cast<std::size_t>(bpp) + ch];
  return img;
}

inline void write_png_rgb8(const std::filesystem::path& path, const ImageU8& img) {
  write_binary_file(path, encode_png_rgb8(img));
}

inline ImageU8 read_png_rgb8(const std::filesystem::path& path) {
  return decode_png_rgb8(read_binary_file(path));
}

// ---------------------------------------------------------------------------
// Tensor {3,H,W} in [0,1]  <->  8-bit image
// ---------------------------------------------------------------------------

inline ImageU8 tensor_to_image(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw std::invalid_argument("tensor_to_image: wants {3,H,W}");
  ImageU8 img;
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(t.at(c, y, x), 0.0, 1.0);
        img.rgb[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
  return img;
}

inline Tensor image_to_tensor(const ImageU8& img) {
  Tensor t({3, img.height, img.width});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        t.at(c, y, x) =
            img.rgb[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] / 255.0;
  return t;
}

inline void write_png_tensor(const std::filesystem::path& path, const Tensor& t) {
  write_png_rgb8(path, tensor_to_image(t));
}

inline Tensor read_png_tensor(const std::filesystem::path& path) {
  return image_to_tensor(read_png_rgb8(path));
}

}  // namespace patchsmith

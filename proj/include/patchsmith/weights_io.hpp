#pragma once
// Named-tensor checkpoint files for the toy models.  Little-endian binary:
//   "PSW1" | u32 count | per tensor: u16 name_len, name, u8 rank, u32 dims…,
//   f64 payload.

#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "patchsmith/common.hpp"
#include "patchsmith/tensor.hpp"

namespace patchsmith {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void save_named_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::vector<unsigned char> out = {'P', 'S', 'W', '1'};
  auto put_u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  };
  put_u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    out.push_back(static_cast<unsigned char>(name.size() & 0xff));
    out.push_back(static_cast<unsigned char>((name.size() >> 8) & 0xff));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<unsigned char>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) put_u32(static_cast<std::uint32_t>(t.dim(d)));
    std::size_t bytes = static_cast<std::size_t>(t.numel()) * sizeof(double);
    std::size_t at = out.size();
    out.resize(at + bytes);
    std::memcpy(out.data() + at, t.data(), bytes);
  }
  write_binary_file(path, out);
}

inline NamedTensors load_named_tensors(const std::filesystem::path& path) {
  auto bytes = read_binary_file(path);
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw MissingAsset("checkpoint truncated: " + path.string());
  };
  need(8);
  if (std::memcmp(bytes.data(), "PSW1", 4) != 0)
    throw MissingAsset("not a checkpoint file: " + path.string());
  pos = 4;
  auto get_u32 = [&]() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  };
  std::uint32_t count = get_u32();
  NamedTensors tensors;
  for (std::uint32_t k = 0; k < count; ++k) {
    need(2);
    std::size_t name_len = bytes[pos] | (static_cast<std::size_t>(bytes[pos + 1]) << 8);
    pos += 2;
    need(name_len);
    std::string name(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
    pos += name_len;
    need(1);
    int rank = bytes[pos++];
    std::vector<int> shape;
    for (int d = 0; d < rank; ++d) shape.push_back(static_cast<int>(get_u32()));
    Tensor t(shape);
    std::size_t payload = static_cast<std::size_t>(t.numel()) * sizeof(double);
    need(payload);
    std::memcpy(t.data(), bytes.data() + pos, payload);
    pos += payload;
    tensors.emplace_back(std::move(name), std::move(t));
  }
  return tensors;
}

inline const Tensor& find_tensor(const NamedTensors& tensors, const std::string& name) {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw MissingAsset("checkpoint tensor missing: " + name);
}

inline std::uint64_t named_tensors_digest(const NamedTensors& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : tensors) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(t.shape().data(), t.shape().size() * sizeof(int), h);
    h = fnv1a64(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(double), h);
  }
  return h;
}

}  // namespace patchsmith

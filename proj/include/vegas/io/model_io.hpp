#pragma once

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "vegas/io/config_io.hpp"
#include "vegas/weights.hpp"

namespace vegas::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline constexpr std::array<char, 8> kModelMagic = {'V', 'E', 'G', 'A', 'S', 'W', 'T', '\0'};
inline constexpr std::uint32_t kModelVersion = 1;
inline constexpr const char* kModelManifestSchema = "vegas.model/1";

namespace detail {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(std::istream& in, const std::string& path, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  require(static_cast<bool>(in), path + ": truncated while reading " + what);
  return v;
}

}  // namespace detail

/// Layout (all little-endian):
///   magic "VEGASWT\0" | u32 version | u32 num_layers, num_heads, head_dim,
///   vocab_size, num_visual_tokens, ve_num_heads | u64 seed |
///   f32 arrays (embedding, per layer wq wk wv wo, unembedding) |
///   u64 FNV-1a checksum of the array bytes
inline void write_model(std::ostream& out, const ModelWeights& w) {
  out.write(kModelMagic.data(), kModelMagic.size());
  detail::put<std::uint32_t>(out, kModelVersion);
  const auto& c = w.config;
  for (std::size_t v : {c.num_layers, c.num_heads, c.head_dim, c.vocab_size, c.num_visual_tokens, c.ve_num_heads}) {
    require(v <= 0xffffffffu, "model dimension does not fit the container header");
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  detail::put<std::uint64_t>(out, c.seed);
  w.for_each_array([&](const std::vector<float>& data) {
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  });
  detail::put<std::uint64_t>(out, weights_checksum(w));
}

inline ModelWeights read_model(std::istream& in, const std::string& path = "model") {
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  require(static_cast<bool>(in) && magic == kModelMagic, path + ": not a vegas model file (bad magic)");
  const auto version = detail::take<std::uint32_t>(in, path, "version");
  require(version == kModelVersion, path + ": unsupported model version " + std::to_string(version));
  ModelConfig c;
  c.num_layers = detail::take<std::uint32_t>(in, path, "header");
  c.num_heads = detail::take<std::uint32_t>(in, path, "header");
  c.head_dim = detail::take<std::uint32_t>(in, path, "header");
  c.vocab_size = detail::take<std::uint32_t>(in, path, "header");
  c.num_visual_tokens = detail::take<std::uint32_t>(in, path, "header");
  c.ve_num_heads = detail::take<std::uint32_t>(in, path, "header");
  c.seed = detail::take<std::uint64_t>(in, path, "header");
  ModelWeights w = empty_weights(c);
  w.for_each_array([&](std::vector<float>& data) {
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    require(static_cast<bool>(in), path + ": truncated weight arrays");
  });
  const auto checksum = detail::take<std::uint64_t>(in, path, "checksum");
  require(checksum == weights_checksum(w), path + ": checksum mismatch");
  in.peek();
  require(in.eof(), path + ": trailing bytes after the checksum");
  return w;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

inline json model_manifest(const ModelWeights& w, const std::string& weights_file) {
  const auto& c = w.config;
  const std::size_t d = c.model_dim();
  json arrays = json::array();
  arrays.push_back({{"name", "embedding"}, {"shape", {c.vocab_size, d}}});
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    for (const char* p : {"wq", "wk", "wv", "wo"}) {
      arrays.push_back({{"name", "layers." + std::to_string(l) + "." + p}, {"shape", {d, d}}});
    }
  }
  arrays.push_back({{"name", "unembedding"}, {"shape", {c.vocab_size, d}}});
  return {{"schema", kModelManifestSchema},
          {"weights_file", weights_file},
          {"format_version", kModelVersion},
          {"dtype", "f32"},
          {"byte_order", "little"},
          {"config", model_config_to_json(c)},
          {"checksum_fnv1a64", hex64(weights_checksum(w))},
          {"arrays", arrays}};
}

inline ModelWeights load_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open model file " + path);
  return read_model(in, path);
}

inline void save_model_file(const std::string& path, const ModelWeights& w) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), "cannot write " + path);
  write_model(out, w);
  require(static_cast<bool>(out), "write failed for " + path);
}

}  // namespace vegas::io

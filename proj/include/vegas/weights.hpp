#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

#include "vegas/model_config.hpp"
#include "vegas/random.hpp"

namespace vegas {

/// Square projection stored row-major as [out][in].
struct Projection {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Projection() = default;
  Projection(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

struct LayerWeights {
  Projection wq;
  Projection wk;
  Projection wv;
  Projection wo;
};

/// Immutable after construction; safe to share across threads.
struct ModelWeights {
  ModelConfig config;
  Projection embedding;    // [vocab][d_model]
  std::vector<LayerWeights> layers;
  Projection unembedding;  // [vocab][d_model]

  /// Visits every float array in serialization order.
  template <typename F>
  void for_each_array(F&& f) const {
    f(embedding.data);
    for (const auto& layer : layers) {
      f(layer.wq.data);
      f(layer.wk.data);
      f(layer.wv.data);
      f(layer.wo.data);
    }
    f(unembedding.data);
  }
  template <typename F>
  void for_each_array(F&& f) {
    f(embedding.data);
    for (auto& layer : layers) {
      f(layer.wq.data);
      f(layer.wk.data);
      f(layer.wv.data);
      f(layer.wo.data);
    }
    f(unembedding.data);
  }
};

/// Zero-filled weights with the shapes implied by config.
inline ModelWeights empty_weights(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.model_dim();
  ModelWeights w;
  w.config = config;
  w.embedding = Projection(config.vocab_size, d);
  w.layers.resize(config.num_layers);
  for (auto& layer : w.layers) {
    layer.wq = Projection(d, d);
    layer.wk = Projection(d, d);
    layer.wv = Projection(d, d);
    layer.wo = Projection(d, d);
  }
  w.unembedding = Projection(config.vocab_size, d);
  return w;
}

/// Scaled-uniform weights in [-scale/sqrt(d), scale/sqrt(d)], fully determined
/// by config.seed. Each array draws from its own derived stream.
inline ModelWeights synthesize_weights(const ModelConfig& config, double scale = 1.0) {
  ModelWeights w = empty_weights(config);
  const double bound = scale / std::sqrt(static_cast<double>(config.model_dim()));
  std::uint64_t stream = 0;
  w.for_each_array([&](std::vector<float>& data) {
    Rng rng(mix_seed(config.seed, stream++));
    for (auto& v : data) v = static_cast<float>(rng.uniform(-bound, bound));
  });
  return w;
}

/// FNV-1a over the raw float bytes of every array.
inline std::uint64_t weights_checksum(const ModelWeights& w) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  w.for_each_array([&](const std::vector<float>& data) {
    for (float v : data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 4; ++b) {
        h ^= (bits >> (8 * b)) & 0xffu;
        h *= 0x100000001b3ULL;
      }
    }
  });
  return h;
}

}  // namespace vegas

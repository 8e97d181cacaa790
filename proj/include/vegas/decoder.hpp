#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vegas/attention.hpp"
#include "vegas/weights.hpp"

namespace vegas {

/// Keys and values for every processed token, per layer, stored as
/// [position][head][head_dim] so one append writes a contiguous d_model row.
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t num_layers, std::size_t num_heads, std::size_t head_dim)
      : num_heads_(num_heads), head_dim_(head_dim), keys_(num_layers), values_(num_layers) {}

  std::size_t num_layers() const { return keys_.size(); }
  std::size_t length(std::size_t layer) const { return keys_[layer].size() / model_dim(); }
  std::size_t model_dim() const { return num_heads_ * head_dim_; }

  void append(std::size_t layer, std::span<const float> key_row, std::span<const float> value_row) {
    keys_[layer].insert(keys_[layer].end(), key_row.begin(), key_row.end());
    values_[layer].insert(values_[layer].end(), value_row.begin(), value_row.end());
  }

  RowsView<float> keys(std::size_t layer, std::size_t head) const {
    return {keys_[layer].data() + head * head_dim_, length(layer), head_dim_, model_dim()};
  }
  RowsView<float> values(std::size_t layer, std::size_t head) const {
    return {values_[layer].data() + head * head_dim_, length(layer), head_dim_, model_dim()};
  }
  std::span<const float> key(std::size_t layer, std::size_t head, std::size_t pos) const {
    return keys(layer, head).row(pos);
  }
  std::span<const float> value(std::size_t layer, std::size_t head, std::size_t pos) const {
    return values(layer, head).row(pos);
  }

 private:
  std::size_t num_heads_ = 0;
  std::size_t head_dim_ = 0;
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
};

struct DecoderState {
  std::vector<TokenId> history;
  KVCache cache;
  PromptLayout layout;

  DecoderState() = default;
  DecoderState(const ModelConfig& config, PromptLayout prompt_layout)
      : cache(config.num_layers, config.num_heads, config.head_dim), layout(std::move(prompt_layout)) {}
};

/// Captured attention for one (layer, head) and the current query token.
struct AttentionTensor {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<double> pre_softmax_row;   // after any hook rewrite
  std::vector<double> post_softmax_row;
};

struct HookContext {
  std::size_t layer;
  std::size_t head;
  std::size_t query_position;
  const PromptLayout& layout;
  std::span<const double> pre_softmax_row;
};

/// Returns a full replacement pre-softmax row (same length) or nullopt to keep it.
using RowHook = std::function<std::optional<std::vector<double>>(const HookContext&)>;

class AttentionHookSet {
 public:
  AttentionHookSet() = default;
  explicit AttentionHookSet(std::size_t num_layers) : hooks_(num_layers) {}

  void set(std::size_t layer, RowHook hook) {
    if (layer >= hooks_.size()) hooks_.resize(layer + 1);
    hooks_[layer] = std::move(hook);
  }
  const RowHook* at(std::size_t layer) const {
    return layer < hooks_.size() && hooks_[layer] ? &hooks_[layer] : nullptr;
  }
  bool empty() const {
    for (const auto& h : hooks_) {
      if (h) return false;
    }
    return true;
  }

 private:
  std::vector<RowHook> hooks_;
};

struct StepOutput {
  std::vector<double> logits;
  std::vector<AttentionTensor> attention;  // layer-major, num_layers * num_heads entries

  const AttentionTensor& at(std::size_t layer, std::size_t head, std::size_t num_heads) const {
    return attention[layer * num_heads + head];
  }
};

namespace detail {

/// y = W x with single-precision accumulation.
inline void project(const Projection& w, std::span<const float> x, std::span<float> y) {
  for (std::size_t r = 0; r < w.rows; ++r) y[r] = dot(w.row(r), x);
}

inline std::vector<double> unembed(const ModelWeights& w, std::span<const float> residual) {
  std::vector<double> logits(w.config.vocab_size);
  for (std::size_t t = 0; t < logits.size(); ++t) {
    logits[t] = static_cast<double>(dot(w.unembedding.row(t), residual));
  }
  return logits;
}

inline void check_token(const ModelWeights& w, TokenId token) {
  require(token >= 0 && static_cast<std::size_t>(token) < w.config.vocab_size,
          "token id " + std::to_string(token) + " outside the vocabulary");
}

}  // namespace detail

/// Processes one token: appends its K/V to every layer, returns next-token
/// logits and (when capture is set) the attention rows of this query.
inline StepOutput forward_step(const ModelWeights& w, DecoderState& state, TokenId token,
                               const AttentionHookSet* hooks = nullptr, bool capture = true) {
  const auto& cfg = w.config;
  detail::check_token(w, token);
  const std::size_t d = cfg.model_dim();
  const std::size_t dk = cfg.head_dim;
  const std::size_t position = state.history.size();
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    require(state.cache.length(l) == position, "decoder state cache is out of sync with its history");
  }

  std::vector<float> x(w.embedding.row(static_cast<std::size_t>(token)).begin(),
                       w.embedding.row(static_cast<std::size_t>(token)).end());
  std::vector<float> q(d), k(d), v(d), heads_out(d), delta(d);

  StepOutput out;
  if (capture) out.attention.reserve(cfg.num_layers * cfg.num_heads);

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& lw = w.layers[l];
    detail::project(lw.wq, x, q);
    detail::project(lw.wk, x, k);
    detail::project(lw.wv, x, v);
    state.cache.append(l, k, v);
    const RowHook* hook = hooks ? hooks->at(l) : nullptr;

    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      std::span<const float> qh(q.data() + h * dk, dk);
      std::vector<double> scores = attention_scores<float>(qh, state.cache.keys(l, h));
      if (hook) {
        HookContext ctx{l, h, position, state.layout, scores};
        if (auto replaced = (*hook)(ctx)) {
          require(replaced->size() == scores.size(),
                  "attention hook at layer " + std::to_string(l) + " returned a row of length " +
                      std::to_string(replaced->size()) + ", expected " + std::to_string(scores.size()));
          scores = std::move(*replaced);
        }
      }
      std::vector<double> probs = softmax(scores);
      std::vector<double> o = weighted_values<float>(probs, state.cache.values(l, h));
      for (std::size_t c = 0; c < dk; ++c) heads_out[h * dk + c] = static_cast<float>(o[c]);
      if (capture) out.attention.push_back({l, h, std::move(scores), std::move(probs)});
    }
    detail::project(lw.wo, heads_out, delta);
    for (std::size_t i = 0; i < d; ++i) x[i] += delta[i];
  }
  state.history.push_back(token);
  out.logits = detail::unembed(w, x);
  return out;
}

/// Hook-free, capture-free processing of a token run; returns the logits after
/// the last token (empty when tokens is empty).
inline std::vector<double> prefill(const ModelWeights& w, DecoderState& state,
                                   std::span<const TokenId> tokens) {
  std::vector<double> logits;
  for (TokenId t : tokens) logits = forward_step(w, state, t, nullptr, false).logits;
  return logits;
}

struct FullForward {
  std::vector<std::vector<double>> logits;              // per position
  std::vector<std::vector<std::vector<double>>> probs;  // [layer*H + head][query][key]
};

/// Non-cached recomputation over a whole sequence with an explicit causal mask.
inline FullForward forward_full(const ModelWeights& w, std::span<const TokenId> tokens) {
  const auto& cfg = w.config;
  const std::size_t n = tokens.size();
  const std::size_t d = cfg.model_dim();
  const std::size_t dk = cfg.head_dim;
  require(n > 0, "forward_full: empty sequence");

  std::vector<std::vector<float>> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    detail::check_token(w, tokens[i]);
    auto row = w.embedding.row(static_cast<std::size_t>(tokens[i]));
    x[i].assign(row.begin(), row.end());
  }

  FullForward out;
  out.probs.resize(cfg.num_layers * cfg.num_heads);
  std::vector<float> qs(n * d), ks(n * d), vs(n * d), heads_out(d), delta(d);
  std::unique_ptr<bool[]> mask(new bool[n]);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& lw = w.layers[l];
    for (std::size_t i = 0; i < n; ++i) {
      detail::project(lw.wq, x[i], std::span<float>(qs.data() + i * d, d));
      detail::project(lw.wk, x[i], std::span<float>(ks.data() + i * d, d));
      detail::project(lw.wv, x[i], std::span<float>(vs.data() + i * d, d));
    }
    std::vector<std::vector<float>> next = x;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) mask[j] = j <= i;
      for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        std::span<const float> qh(qs.data() + i * d + h * dk, dk);
        RowsView<float> keys(ks.data() + h * dk, n, dk, d);
        RowsView<float> values(vs.data() + h * dk, n, dk, d);
        auto scores = attention_scores<float>(qh, keys, std::span<const bool>(mask.get(), n));
        auto probs = softmax(scores);
        auto o = weighted_values<float>(probs, values);
        for (std::size_t c = 0; c < dk; ++c) heads_out[h * dk + c] = static_cast<float>(o[c]);
        out.probs[l * cfg.num_heads + h].push_back(std::move(probs));
      }
      detail::project(lw.wo, heads_out, delta);
      for (std::size_t c = 0; c < d; ++c) next[i][c] += delta[c];
    }
    x = std::move(next);
  }
  for (std::size_t i = 0; i < n; ++i) out.logits.push_back(detail::unembed(w, x[i]));
  return out;
}

}  // namespace vegas

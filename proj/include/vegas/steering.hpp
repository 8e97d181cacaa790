#pragma once

#include <algorithm>
#include <chrono>
#include <future>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "vegas/decoder.hpp"
#include "vegas/injection.hpp"
#include "vegas/metrics.hpp"

namespace vegas {

enum class IndicatorKind { vabe, shannon };

struct SteeringConfig {
  bool enabled = true;
  std::vector<std::size_t> replaced_layers;  // kept sorted and unique
  double alpha_high = 1.0;                   // used when the indicator exceeds eta
  double alpha_low = 0.8;
  double eta = 0.31;
  std::size_t indicator_layer = 0;
  std::size_t block_size = 4;
  IndicatorKind indicator_kind = IndicatorKind::vabe;
  ClampPolicy clamp;
  HeadAlignment alignment;
  double gamma = 0.5;
  bool parallel = false;  // run the two forward paths on separate threads

  /// Default settings resolved for a model: the middle layer pair, and
  /// the second of them as the indicator layer.
  static SteeringConfig defaults_for(const ModelConfig& model) {
    SteeringConfig c;
    c.replaced_layers = middle_layers(model.num_layers);
    c.indicator_layer = c.replaced_layers.back();
    return c;
  }

  void normalize() {
    std::sort(replaced_layers.begin(), replaced_layers.end());
    replaced_layers.erase(std::unique(replaced_layers.begin(), replaced_layers.end()), replaced_layers.end());
  }

  void validate(const ModelConfig& model) const {
    require(std::isfinite(alpha_high) && std::isfinite(alpha_low) && 0.0 <= alpha_low &&
                alpha_low <= alpha_high && alpha_high <= 1.0,
            "steering.alpha_low/alpha_high must satisfy 0 <= alpha_low <= alpha_high <= 1");
    require(!std::isnan(eta), "steering.eta must not be NaN");
    for (auto l : replaced_layers) {
      require(l < model.num_layers, "steering.replaced_layers contains layer " + std::to_string(l) +
                                        " outside [0, " + std::to_string(model.num_layers) + ")");
    }
    require(indicator_layer < model.num_layers, "steering.indicator_layer outside the model");
    require(block_size > 0 && model.grid_side() % block_size == 0,
            "steering.block_size must divide the visual grid side " + std::to_string(model.grid_side()));
    require(std::isfinite(gamma) && gamma >= 0.0, "steering.gamma must be finite and >= 0");
    clamp.validate();
  }

  bool replaces(std::size_t layer) const {
    return std::binary_search(replaced_layers.begin(), replaced_layers.end(), layer);
  }

  friend bool operator==(const SteeringConfig&, const SteeringConfig&) = default;
};

/// alpha_high when the indicator strictly exceeds eta, alpha_low otherwise.
inline double choose_alpha(double indicator, const SteeringConfig& config) {
  return indicator > config.eta ? config.alpha_high : config.alpha_low;
}

/// (1 - alpha) * vanilla + alpha * replaced, evaluated as v + alpha * (r - v)
/// so identical paths blend back to the vanilla logits bit for bit. Exact at
/// alpha = 0 and alpha = 1.
inline std::vector<double> blend_logits(std::span<const double> vanilla, std::span<const double> replaced,
                                        double alpha) {
  require(vanilla.size() == replaced.size(), "blend_logits: logit vectors differ in length");
  require(alpha >= 0.0 && alpha <= 1.0, "blend_logits: alpha must lie in [0, 1]");
  if (alpha == 0.0) return {vanilla.begin(), vanilla.end()};
  if (alpha == 1.0) return {replaced.begin(), replaced.end()};
  std::vector<double> out(vanilla.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vanilla[i] + alpha * (replaced[i] - vanilla[i]);
  return out;
}

/// Index of the largest logit; ties go to the lowest token id.
inline TokenId argmax_token(std::span<const double> logits) {
  require(!logits.empty(), "argmax of empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

/// Per-layer VAR, TVER and VABE for the current query from captured attention.
inline std::vector<LayerStats> layer_stats(const StepOutput& step, const ModelConfig& model,
                                           const PromptLayout& layout, std::size_t block_size) {
  std::vector<LayerStats> stats;
  const bool blocks_ok = block_size > 0 && model.grid_side() % block_size == 0;
  for (std::size_t l = 0; l < model.num_layers; ++l) {
    std::vector<std::vector<double>> post, segments;
    for (std::size_t h = 0; h < model.num_heads; ++h) {
      const auto& t = step.at(l, h, model.num_heads);
      post.push_back(t.post_softmax_row);
      segments.push_back(visual_segment(t.pre_softmax_row, layout));
    }
    LayerStats s;
    s.layer = l;
    s.var = vision_attention_ratio(post, layout);
    try {
      s.tver = text_visual_entropy_ratio(post, layout);
    } catch (const DegenerateInput&) {
      s.tver.reset();
    }
    if (blocks_ok) s.vabe = vision_attention_block_entropy(segments, block_size);
    stats.push_back(s);
  }
  return stats;
}

/// Hallucination indicator at one layer of a captured step.
inline double indicator_value(const StepOutput& step, const ModelConfig& model, const PromptLayout& layout,
                              std::size_t layer, IndicatorKind kind, std::size_t block_size) {
  std::vector<std::vector<double>> rows;
  for (std::size_t h = 0; h < model.num_heads; ++h) {
    const auto& t = step.at(layer, h, model.num_heads);
    rows.push_back(kind == IndicatorKind::vabe ? visual_segment(t.pre_softmax_row, layout) : t.post_softmax_row);
  }
  if (kind == IndicatorKind::vabe) return vision_attention_block_entropy(rows, block_size);
  return visual_attention_entropy(rows, layout);
}

struct SteeringDecision {
  double indicator_value = 0.0;          // replaced path, drives alpha
  double vanilla_indicator_value = 0.0;  // same statistic on the vanilla path, for audit
  double alpha_used = 0.0;
  TokenId vanilla_argmax = 0;
  TokenId replaced_argmax = 0;
  TokenId blended_argmax = 0;
  std::size_t alignment_fallbacks = 0;
};

/// Wall-clock interval of one forward path, nanoseconds since an arbitrary epoch.
struct PathTiming {
  std::int64_t start_ns = 0;
  std::int64_t end_ns = 0;
};

struct SteeredStep {
  std::vector<double> logits;  // blended (or vanilla when steering is off)
  std::vector<double> vanilla_logits;
  std::vector<double> replaced_logits;
  std::optional<SteeringDecision> decision;
  std::vector<LayerStats> stats;  // vanilla path
  std::vector<AttentionTensor> vanilla_attention;   // kept on request
  std::vector<AttentionTensor> replaced_attention;
  PathTiming vanilla_timing;
  PathTiming replaced_timing;
};

/// The dual-path decision layer. Holds only immutable data, so one Steerer
/// may serve several decoding states; each call mutates only the states passed in.
class Steerer {
 public:
  Steerer(const ModelWeights& weights, SteeringConfig config, VEAttentionSet ve)
      : weights_(&weights),
        config_(normalized(std::move(config))),
        injection_(std::move(ve), weights.config.num_heads, {config_.clamp, config_.alignment, config_.gamma}) {
    config_.validate(weights.config);
    injection_.ve().validate(weights.config.num_visual_tokens);
  }

  const SteeringConfig& config() const { return config_; }
  const ModelWeights& weights() const { return *weights_; }

  /// Feeds `token` to both paths. With steering disabled only the vanilla
  /// path runs and `replaced` is left untouched.
  SteeredStep step(DecoderState& vanilla, DecoderState& replaced, TokenId token, bool with_stats = true,
                   bool keep_attention = false) const {
    const auto& model = weights_->config;
    SteeredStep out;
    if (!config_.enabled) {
      out.vanilla_timing.start_ns = now_ns();
      StepOutput v = forward_step(*weights_, vanilla, token, nullptr, with_stats || keep_attention);
      out.vanilla_timing.end_ns = now_ns();
      if (with_stats) out.stats = layer_stats(v, model, vanilla.layout, config_.block_size);
      if (keep_attention) out.vanilla_attention = std::move(v.attention);
      out.vanilla_logits = v.logits;
      out.logits = std::move(v.logits);
      return out;
    }
    require(vanilla.history == replaced.history, "steered step: vanilla and replaced states are out of sync");

    InjectionLog log;
    AttentionHookSet hooks(model.num_layers);
    for (auto l : config_.replaced_layers) hooks.set(l, injection_.hook(&log));

    auto run_replaced = [&]() {
      PathTiming t;
      t.start_ns = now_ns();
      StepOutput r = forward_step(*weights_, replaced, token, &hooks, true);
      t.end_ns = now_ns();
      return std::make_pair(std::move(r), t);
    };
    auto run_vanilla = [&]() {
      PathTiming t;
      t.start_ns = now_ns();
      StepOutput v = forward_step(*weights_, vanilla, token, nullptr, true);
      t.end_ns = now_ns();
      return std::make_pair(std::move(v), t);
    };

    std::pair<StepOutput, PathTiming> rv, vv;
    if (config_.parallel) {
      auto pending = std::async(std::launch::async, run_replaced);
      vv = run_vanilla();
      rv = pending.get();
    } else {
      vv = run_vanilla();
      rv = run_replaced();
    }
    const StepOutput& v = vv.first;
    const StepOutput& r = rv.first;
    out.vanilla_timing = vv.second;
    out.replaced_timing = rv.second;

    SteeringDecision d;
    d.indicator_value = indicator_value(r, model, replaced.layout, config_.indicator_layer,
                                        config_.indicator_kind, config_.block_size);
    d.vanilla_indicator_value = indicator_value(v, model, vanilla.layout, config_.indicator_layer,
                                                config_.indicator_kind, config_.block_size);
    d.alpha_used = choose_alpha(d.indicator_value, config_);
    d.vanilla_argmax = argmax_token(v.logits);
    d.replaced_argmax = argmax_token(r.logits);
    d.alignment_fallbacks = log.alignment_fallbacks;
    out.logits = blend_logits(v.logits, r.logits, d.alpha_used);
    d.blended_argmax = argmax_token(out.logits);
    out.decision = d;
    if (with_stats) out.stats = layer_stats(v, model, vanilla.layout, config_.block_size);
    out.vanilla_logits = v.logits;
    out.replaced_logits = r.logits;
    if (keep_attention) {
      out.vanilla_attention = std::move(vv.first.attention);
      out.replaced_attention = std::move(rv.first.attention);
    }
    return out;
  }

 private:
  static SteeringConfig normalized(SteeringConfig c) {
    c.normalize();
    return c;
  }
  static std::int64_t now_ns() {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
  }

  const ModelWeights* weights_;
  SteeringConfig config_;
  PreparedInjection injection_;
};

}  // namespace vegas

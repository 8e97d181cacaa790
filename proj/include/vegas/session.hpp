#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <vector>

#include "vegas/steering.hpp"

namespace vegas {

struct Prompt {
  std::vector<TokenId> tokens;
  PromptLayout layout;
};

struct TraceRecord {
  std::size_t step = 0;  // 1-based generation step
  TokenId token = 0;
  std::vector<LayerStats> layers;
  std::optional<SteeringDecision> decision;  // empty when steering is disabled
  double step_logprob = 0.0;
  double cumulative_logprob = 0.0;
  std::vector<AttentionTensor> vanilla_attention;  // only with keep_attention
  std::vector<AttentionTensor> replaced_attention;
};

enum class DecodeMode { greedy, beam };

struct DecodeOptions {
  std::size_t max_new_tokens = 32;
  bool stop_on_eos = true;
  bool trace_stats = true;  // per-layer VAR/TVER/VABE in every record
  bool keep_attention = false;
};

struct DecodeResult {
  std::vector<TokenId> tokens;  // generated tokens, including a final EOS
  std::vector<TraceRecord> trace;
  double logprob = 0.0;
  double normalized_score = 0.0;  // logprob / token count
};

/// Both decoding paths, synchronized on the same history, plus the token that
/// the next step will feed (the last prompt token, then each chosen token).
struct PathPair {
  DecoderState vanilla;
  DecoderState replaced;
  TokenId pending = 0;
};

inline std::vector<double> log_softmax(std::span<const double> logits) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - peak);
  const double lse = peak + std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

/// Greedy and beam decoding over the dual-path engine. Steering touches only
/// generation steps; every prompt token but the last is prefilled hook-free.
class DecoderSession {
 public:
  DecoderSession(const ModelWeights& weights, SteeringConfig config, VEAttentionSet ve)
      : steerer_(weights, std::move(config), std::move(ve)) {}

  const Steerer& steerer() const { return steerer_; }

  PathPair start(const Prompt& prompt) const {
    require(!prompt.tokens.empty(), "decode: empty prompt");
    const auto& model = steerer_.weights().config;
    prompt.layout.validate(model.num_visual_tokens);
    require(prompt.layout.total_prompt_len == prompt.tokens.size(), "decode: layout length differs from the prompt");
    PathPair p;
    p.vanilla = DecoderState(model, prompt.layout);
    prefill(steerer_.weights(), p.vanilla,
            std::span<const TokenId>(prompt.tokens.data(), prompt.tokens.size() - 1));
    p.replaced = p.vanilla;
    p.pending = prompt.tokens.back();
    return p;
  }

  DecodeResult greedy(const Prompt& prompt, const DecodeOptions& options) const {
    return greedy_from(start(prompt), options);
  }

  DecodeResult greedy_from(PathPair paths, const DecodeOptions& options) const {
    require(options.max_new_tokens >= 1, "decode: max_new_tokens must be >= 1");
    DecodeResult result;
    for (std::size_t k = 1; k <= options.max_new_tokens; ++k) {
      SteeredStep s =
          steerer_.step(paths.vanilla, paths.replaced, paths.pending, options.trace_stats, options.keep_attention);
      const TokenId chosen = argmax_token(s.logits);
      const double lp = log_softmax(s.logits)[static_cast<std::size_t>(chosen)];
      result.logprob += lp;
      result.tokens.push_back(chosen);
      result.trace.push_back({k, chosen, std::move(s.stats), s.decision, lp, result.logprob,
                              std::move(s.vanilla_attention), std::move(s.replaced_attention)});
      paths.pending = chosen;
      if (options.stop_on_eos && chosen == kEosToken) break;
    }
    result.normalized_score = result.logprob / static_cast<double>(result.tokens.size());
    return result;
  }

  DecodeResult beam(const Prompt& prompt, std::size_t beam_width, const DecodeOptions& options) const {
    return beam_from(start(prompt), beam_width, options);
  }

  /// Length-normalized beam search. Each hypothesis owns its pair of states,
  /// so alpha is chosen per beam from that beam's own indicator.
  DecodeResult beam_from(PathPair paths, std::size_t beam_width, const DecodeOptions& options) const {
    require(beam_width >= 1, "decode: beam_width must be >= 1");
    require(options.max_new_tokens >= 1, "decode: max_new_tokens must be >= 1");

    struct Hypothesis {
      PathPair paths;
      DecodeResult result;
    };
    struct Candidate {
      double score;
      double logit;
      std::size_t parent;
      TokenId token;
      double step_logprob;
    };

    std::vector<Hypothesis> live;
    live.push_back({std::move(paths), {}});
    std::vector<DecodeResult> finished;

    for (std::size_t k = 1; k <= options.max_new_tokens && !live.empty(); ++k) {
      std::vector<SteeredStep> steps;
      std::vector<Candidate> candidates;
      for (std::size_t b = 0; b < live.size(); ++b) {
        auto& hyp = live[b];
        steps.push_back(steerer_.step(hyp.paths.vanilla, hyp.paths.replaced, hyp.paths.pending, options.trace_stats,
                                      options.keep_attention));
        const auto& logits = steps.back().logits;
        const auto lp = log_softmax(logits);
        for (std::size_t t = 0; t < lp.size(); ++t) {
          candidates.push_back({hyp.result.logprob + lp[t], logits[t], b, static_cast<TokenId>(t), lp[t]});
        }
      }
      std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.parent != b.parent) return a.parent < b.parent;
        if (a.logit != b.logit) return a.logit > b.logit;
        return a.token < b.token;
      });

      std::vector<Hypothesis> next;
      const std::size_t keep = std::min(beam_width, candidates.size());
      for (std::size_t i = 0; i < keep; ++i) {
        const auto& c = candidates[i];
        const auto& parent = live[c.parent];
        DecodeResult r = parent.result;
        r.tokens.push_back(c.token);
        r.logprob = c.score;
        const auto& st = steps[c.parent];
        r.trace.push_back({k, c.token, st.stats, st.decision, c.step_logprob, c.score, st.vanilla_attention,
                           st.replaced_attention});
        if (options.stop_on_eos && c.token == kEosToken) {
          r.normalized_score = r.logprob / static_cast<double>(r.tokens.size());
          finished.push_back(std::move(r));
          continue;
        }
        next.push_back({parent.paths, std::move(r)});
        next.back().paths.pending = c.token;
      }
      live = std::move(next);
    }
    for (auto& hyp : live) {
      hyp.result.normalized_score = hyp.result.logprob / static_cast<double>(hyp.result.tokens.size());
      finished.push_back(std::move(hyp.result));
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < finished.size(); ++i) {
      if (finished[i].normalized_score > finished[best].normalized_score) best = i;
    }
    return std::move(finished[best]);
  }

 private:
  Steerer steerer_;
};

struct ThroughputReport {
  double vanilla_tokens_per_second = 0.0;
  double steered_tokens_per_second = 0.0;
  std::vector<double> vanilla_runs;  // tokens/second per repeat
  std::vector<double> steered_runs;
};

/// Wall-clock tokens/second for vanilla (steering disabled) and steered
/// greedy decoding of the same prompt; each mode gets `warmup` untimed runs
/// and reports the median of `repeats` timed runs.
inline ThroughputReport measure_throughput(const ModelWeights& weights, const Prompt& prompt,
                                           const VEAttentionSet& ve, const SteeringConfig& config,
                                           std::size_t max_new_tokens, std::size_t repeats = 3,
                                           std::size_t warmup = 1) {
  require(repeats >= 1, "throughput: repeats must be >= 1");
  DecodeOptions options;
  options.max_new_tokens = max_new_tokens;
  options.stop_on_eos = false;

  auto run_mode = [&](bool steering) {
    SteeringConfig c = config;
    c.enabled = steering;
    DecoderSession session(weights, c, ve);
    std::vector<double> rates;
    for (std::size_t i = 0; i < warmup + repeats; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto r = session.greedy(prompt, options);
      const auto t1 = std::chrono::steady_clock::now();
      const double secs = std::chrono::duration<double>(t1 - t0).count();
      if (i >= warmup) rates.push_back(static_cast<double>(r.tokens.size()) / secs);
    }
    return rates;
  };
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  };

  ThroughputReport report;
  report.vanilla_runs = run_mode(false);
  report.steered_runs = run_mode(true);
  report.vanilla_tokens_per_second = median(report.vanilla_runs);
  report.steered_tokens_per_second = median(report.steered_runs);
  return report;
}

}  // namespace vegas

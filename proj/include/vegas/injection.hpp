#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "vegas/decoder.hpp"
#include "vegas/metrics.hpp"
#include "vegas/random.hpp"

namespace vegas {

enum class VESourceKind { cls_row, query_aggregate };

/// The vision encoder's attention over image tokens, one map per encoder head.
struct VEAttentionSet {
  std::vector<std::vector<double>> heads;
  VESourceKind source_kind = VESourceKind::cls_row;

  std::size_t num_heads() const { return heads.size(); }

  void validate(std::size_t num_visual_tokens) const {
    require(!heads.empty(), "VE attention set has no heads");
    for (const auto& map : heads) {
      require(map.size() == num_visual_tokens, "VE attention map length " + std::to_string(map.size()) +
                                                   " does not match num_visual_tokens " +
                                                   std::to_string(num_visual_tokens));
      require(all_finite(std::span<const double>(map)), "VE attention map has non-finite entries");
    }
  }
  friend bool operator==(const VEAttentionSet&, const VEAttentionSet&) = default;
};

struct ClampPolicy {
  bool enabled = true;
  double quantile = 0.98;

  void validate() const {
    require(quantile > 0.0 && quantile <= 1.0, "steering.clamp.quantile must lie in (0, 1]");
  }
  friend bool operator==(const ClampPolicy&, const ClampPolicy&) = default;
};

enum class AlignmentMode { broadcast, random, similarity };

struct HeadAlignment {
  AlignmentMode mode = AlignmentMode::broadcast;
  std::uint64_t rng_seed = 0;
  friend bool operator==(const HeadAlignment&, const HeadAlignment&) = default;
};

/// Linear-interpolation quantile (the "type 7" estimator) of a nonempty vector.
inline double quantile_of(std::span<const double> values, double q) {
  require(!values.empty(), "quantile of an empty vector");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Entries strictly above the policy quantile become the pre-clamp mean.
inline std::vector<double> clamp_ve_map(std::span<const double> map, const ClampPolicy& policy) {
  require(!map.empty(), "clamp: empty map");
  std::vector<double> out(map.begin(), map.end());
  if (!policy.enabled) return out;
  policy.validate();
  const double cut = quantile_of(map, policy.quantile);
  const double mean = mean_of(map);
  for (auto& v : out) {
    if (v > cut) v = mean;
  }
  return out;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

/// Seeded per-LLM-head choice of a VE head for the random strategy.
inline std::vector<std::size_t> random_head_assignment(std::size_t llm_heads, std::size_t ve_heads,
                                                       std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x51));
  std::vector<std::size_t> out(llm_heads);
  for (auto& a : out) a = static_cast<std::size_t>(rng.below(ve_heads));
  return out;
}

/// VE head with the highest cosine similarity to `original`; ties go to the
/// lowest index. Returns nullopt when `original` has zero norm.
inline std::optional<std::size_t> most_similar_ve_head(const VEAttentionSet& ve,
                                                       std::span<const double> original) {
  double norm = 0.0;
  for (double v : original) norm += v * v;
  if (norm == 0.0) return std::nullopt;
  std::size_t best = 0;
  double best_sim = -2.0;
  for (std::size_t i = 0; i < ve.heads.size(); ++i) {
    const double s = cosine_similarity(original, ve.heads[i]);
    if (s > best_sim) {
      best_sim = s;
      best = i;
    }
  }
  return best;
}

struct AlignedHeads {
  std::vector<std::size_t> assignment;      // VE head index per LLM head
  std::vector<std::vector<double>> maps;    // the assigned VE maps
  std::vector<std::size_t> fallback_heads;  // similarity heads that fell back to broadcast
};

inline std::size_t select_ve_head(const VEAttentionSet& ve, std::size_t llm_head,
                                  std::span<const double> original_segment, const HeadAlignment& alignment,
                                  const std::vector<std::size_t>& random_assignment, bool* fell_back) {
  if (fell_back) *fell_back = false;
  switch (alignment.mode) {
    case AlignmentMode::broadcast:
      return llm_head % ve.num_heads();
    case AlignmentMode::random:
      return random_assignment[llm_head];
    case AlignmentMode::similarity:
      if (auto best = most_similar_ve_head(ve, original_segment)) return *best;
      if (fell_back) *fell_back = true;
      return llm_head % ve.num_heads();
  }
  return 0;
}

/// Maps the VE heads onto `llm_heads` LLM heads.
inline AlignedHeads align_heads(const VEAttentionSet& ve, std::size_t llm_heads,
                                std::span<const std::vector<double>> original_segments,
                                const HeadAlignment& alignment) {
  require(llm_heads >= 1, "align_heads: need at least one LLM head");
  require(!ve.heads.empty(), "align_heads: empty VE attention set");
  if (alignment.mode == AlignmentMode::similarity) {
    require(original_segments.size() == llm_heads, "align_heads: one original segment per LLM head required");
  }
  const auto random = alignment.mode == AlignmentMode::random
                          ? random_head_assignment(llm_heads, ve.num_heads(), alignment.rng_seed)
                          : std::vector<std::size_t>{};
  AlignedHeads out;
  for (std::size_t h = 0; h < llm_heads; ++h) {
    bool fell_back = false;
    std::span<const double> original =
        h < original_segments.size() ? std::span<const double>(original_segments[h]) : std::span<const double>{};
    const std::size_t pick = select_ve_head(ve, h, original, alignment, random, &fell_back);
    out.assignment.push_back(pick);
    out.maps.push_back(ve.heads[pick]);
    if (fell_back) out.fallback_heads.push_back(h);
  }
  return out;
}

/// Writes ve_map into the visual slice, shifted so the slice keeps its
/// original mean. Positions outside the slice are copied untouched.
inline std::vector<double> replace_segment(std::span<const double> original_row, const PromptLayout& layout,
                                           std::span<const double> ve_map) {
  const IndexRange span = layout.visual_span;
  require(span.end <= original_row.size(), "replace_segment: visual span lies outside the row");
  require(ve_map.size() == span.size(), "replace_segment: VE map length " + std::to_string(ve_map.size()) +
                                            " does not match the visual span length " +
                                            std::to_string(span.size()));
  std::vector<double> row(original_row.begin(), original_row.end());
  const double slice_mean = mean_of(original_row.subspan(span.begin, span.size()));
  const double ve_mean = mean_of(ve_map);
  for (std::size_t i = 0; i < span.size(); ++i) row[span.begin + i] = ve_map[i] - ve_mean + slice_mean;
  return row;
}

/// Mean-preserving contrast amplification of the visual slice:
/// x <- x + gamma * (x - mean). gamma = 0 is the identity.
inline std::vector<double> enhance_visual_attention(std::span<const double> row, const PromptLayout& layout,
                                                    double gamma) {
  require(std::isfinite(gamma), "enhancement factor must be finite");
  std::vector<double> out(row.begin(), row.end());
  if (gamma == 0.0) return out;
  const IndexRange span = layout.visual_span;
  require(span.end <= row.size(), "enhance: visual span lies outside the row");
  const double mean = mean_of(row.subspan(span.begin, span.size()));
  for (std::size_t i = span.begin; i < span.end; ++i) out[i] = row[i] + gamma * (row[i] - mean);
  return out;
}

struct InjectionSettings {
  ClampPolicy clamp;
  HeadAlignment alignment;
  double gamma = 0.5;
};

/// Per-path counters written by the injection hook.
struct InjectionLog {
  std::size_t rewrites = 0;
  std::size_t alignment_fallbacks = 0;
};

/// VE maps prepared for injection: clamped once per VE head, with the random
/// head assignment drawn once per session.
class PreparedInjection {
 public:
  PreparedInjection(VEAttentionSet ve, std::size_t llm_heads, InjectionSettings settings)
      : ve_(std::move(ve)), settings_(settings) {
    require(!ve_.heads.empty(), "injection: empty VE attention set");
    settings_.clamp.validate();
    for (const auto& map : ve_.heads) clamped_.push_back(clamp_ve_map(map, settings_.clamp));
    random_ = random_head_assignment(llm_heads, ve_.num_heads(), settings_.alignment.rng_seed);
  }

  const VEAttentionSet& ve() const { return ve_; }
  const InjectionSettings& settings() const { return settings_; }

  /// Applies align -> clamp -> replace -> enhance to one head's row.
  std::vector<double> rewrite(const HookContext& ctx, InjectionLog* log) const {
    const auto& span = ctx.layout.visual_span;
    require(span.end <= ctx.pre_softmax_row.size(), "injection: visual span lies outside the attention row");
    std::span<const double> original = ctx.pre_softmax_row.subspan(span.begin, span.size());
    bool fell_back = false;
    const std::size_t pick = select_ve_head(ve_, ctx.head, original, settings_.alignment, random_, &fell_back);
    auto row = replace_segment(ctx.pre_softmax_row, ctx.layout, clamped_[pick]);
    row = enhance_visual_attention(row, ctx.layout, settings_.gamma);
    if (log) {
      ++log->rewrites;
      if (fell_back) ++log->alignment_fallbacks;
    }
    return row;
  }

  /// Hook bound to this object, which must outlive every forward pass using it.
  RowHook hook(InjectionLog* log) const {
    return [this, log](const HookContext& ctx) -> std::optional<std::vector<double>> { return rewrite(ctx, log); };
  }

 private:
  VEAttentionSet ve_;
  InjectionSettings settings_;
  std::vector<std::vector<double>> clamped_;
  std::vector<std::size_t> random_;
};

}  // namespace vegas

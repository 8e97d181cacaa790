#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "vegas/common.hpp"

namespace vegas {

struct ModelConfig {
  std::size_t num_layers = 8;
  std::size_t num_heads = 4;
  std::size_t head_dim = 16;
  std::size_t vocab_size = 256;
  std::size_t num_visual_tokens = 64;
  std::size_t ve_num_heads = 2;
  std::uint64_t seed = 7;

  std::size_t model_dim() const { return num_heads * head_dim; }
  std::size_t grid_side() const { return exact_sqrt(num_visual_tokens); }

  void validate() const {
    require(num_layers >= 2, "model.num_layers must be >= 2");
    require(num_heads >= 1, "model.num_heads must be >= 1");
    require(head_dim >= 1, "model.head_dim must be >= 1");
    require(vocab_size >= 2, "model.vocab_size must be >= 2");
    require(ve_num_heads >= 1, "model.ve_num_heads must be >= 1");
    const std::size_t side = grid_side();
    require(side >= 2, "model.num_visual_tokens must be a perfect square g*g with g >= 2");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// The pair of middle layers used by default for injection: floor(7L/16) and
/// the one after it, which is {14, 15} for a 32-layer model and {3, 4} for 8.
inline std::vector<std::size_t> middle_layers(std::size_t num_layers) {
  const std::size_t first = std::min(num_layers - 2, (7 * num_layers) / 16);
  return {first, first + 1};
}

/// Where each modality sits inside the prompt. The visual span covers exactly
/// num_visual_tokens positions; everything at or after total_prompt_len is a
/// generated token.
struct PromptLayout {
  IndexRange visual_span;
  std::vector<IndexRange> text_spans;
  std::size_t total_prompt_len = 0;

  std::size_t visual_start() const { return visual_span.begin; }
  /// Inclusive end index of the image tokens.
  std::size_t visual_end() const { return visual_span.end - 1; }

  void validate(std::size_t num_visual_tokens) const {
    require(visual_span.size() == num_visual_tokens,
            "layout.visual_span must cover exactly num_visual_tokens positions");
    require(visual_span.end <= total_prompt_len, "layout.visual_span exceeds the prompt");
    for (std::size_t i = 0; i < text_spans.size(); ++i) {
      const auto& span = text_spans[i];
      require(!span.empty(), "layout.text_spans contains an empty span");
      require(span.end <= total_prompt_len, "layout.text_spans exceeds the prompt");
      require(!span.overlaps(visual_span), "layout.text_spans overlaps the visual span");
      for (std::size_t j = 0; j < i; ++j) {
        require(!span.overlaps(text_spans[j]), "layout.text_spans are not disjoint");
      }
    }
  }

  /// Text-modality key positions for a row of length n: the prompt's text spans
  /// followed by every generated token already in the sequence.
  std::vector<std::size_t> text_positions(std::size_t row_len) const {
    std::vector<std::size_t> out;
    for (const auto& span : text_spans) {
      for (std::size_t i = span.begin; i < std::min(span.end, row_len); ++i) out.push_back(i);
    }
    for (std::size_t i = total_prompt_len; i < row_len; ++i) out.push_back(i);
    return out;
  }

  friend bool operator==(const PromptLayout&, const PromptLayout&) = default;
};

/// A layout with one leading text block, the image tokens, and one trailing
/// text block: [text_before][visual][text_after].
inline PromptLayout make_layout(std::size_t text_before, std::size_t num_visual,
                                std::size_t text_after) {
  PromptLayout layout;
  layout.visual_span = {text_before, text_before + num_visual};
  if (text_before > 0) layout.text_spans.push_back({0, text_before});
  if (text_after > 0) {
    layout.text_spans.push_back({text_before + num_visual, text_before + num_visual + text_after});
  }
  layout.total_prompt_len = text_before + num_visual + text_after;
  return layout;
}

}  // namespace vegas

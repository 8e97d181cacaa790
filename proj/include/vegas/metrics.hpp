#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vegas/attention.hpp"
#include "vegas/model_config.hpp"

namespace vegas {

/// A visual-attention segment laid out row-major on its M x M image grid.
struct GridMap {
  std::size_t side = 0;
  std::vector<double> values;

  GridMap() = default;
  GridMap(std::size_t m, std::vector<double> v) : side(m), values(std::move(v)) {
    require(side * side == values.size(), "grid map: side^2 does not match the value count");
  }

  /// Reshapes a segment whose length is a perfect square.
  static GridMap from_segment(std::span<const double> segment) {
    const std::size_t side = exact_sqrt(segment.size());
    require(side > 0, "grid map: segment length " + std::to_string(segment.size()) +
                          " is not a perfect square");
    return GridMap(side, std::vector<double>(segment.begin(), segment.end()));
  }

  double at(std::size_t row, std::size_t col) const { return values[row * side + col]; }
};

/// -sum p log p over a probability vector (natural log, 0 log 0 = 0).
inline double entropy_of_distribution(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

/// Sums of the (M/m)^2 non-overlapping m x m blocks, in row-major block order.
inline std::vector<double> block_sums(const GridMap& map, std::size_t block_size) {
  require(block_size > 0, "block size must be positive");
  require(map.side % block_size == 0, "block size " + std::to_string(block_size) +
                                          " does not divide grid side " + std::to_string(map.side));
  const std::size_t blocks = map.side / block_size;
  std::vector<double> sums(blocks * blocks, 0.0);
  for (std::size_t r = 0; r < map.side; ++r) {
    for (std::size_t c = 0; c < map.side; ++c) {
      sums[(r / block_size) * blocks + c / block_size] += map.at(r, c);
    }
  }
  return sums;
}

/// Block Entropy: Shannon entropy of softmax over the blockwise sums.
inline double block_entropy(const GridMap& map, std::size_t block_size) {
  require(all_finite(std::span<const double>(map.values)), "block entropy: non-finite map entries");
  const auto sums = block_sums(map, block_size);
  const auto p = softmax(sums);
  return entropy_of_distribution(p);
}

inline double block_entropy(const GridMap& map, int block_size) {
  require(block_size > 0, "block size must be positive");
  return block_entropy(map, static_cast<std::size_t>(block_size));
}

/// Entropy of a nonnegative weight vector after normalization.
inline double shannon_entropy(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    require(w >= 0.0 && std::isfinite(w), "shannon entropy: weights must be finite and nonnegative");
    total += w;
  }
  require(total > 0.0, "shannon entropy: weights sum to zero");
  double h = 0.0;
  for (double w : weights) {
    if (w > 0.0) {
      const double p = w / total;
      h -= p * std::log(p);
    }
  }
  return h;
}

namespace detail {

inline void check_rows(std::span<const std::vector<double>> rows, const PromptLayout& layout) {
  require(!rows.empty(), "attention statistics need at least one head");
  for (const auto& row : rows) {
    require(layout.visual_span.end <= row.size(), "layout visual span lies outside the attention row");
    for (const auto& span : layout.text_spans) {
      require(span.end <= row.size(), "layout text span lies outside the attention row");
    }
  }
}

/// sum_i p_i log p_i of the sub-distribution over `positions`, renormalized.
inline double negative_entropy_over(const std::vector<double>& row, const std::vector<std::size_t>& positions,
                                    const char* modality, std::size_t head) {
  if (positions.size() < 2) {
    throw DegenerateInput(std::string("TVER: ") + modality + " modality has fewer than two tokens");
  }
  double mass = 0.0;
  for (auto i : positions) mass += row[i];
  if (!(mass > 0.0)) {
    throw DegenerateInput(std::string("TVER: zero attention mass on ") + modality + " tokens in head " +
                          std::to_string(head));
  }
  double s = 0.0;
  for (auto i : positions) {
    const double p = row[i] / mass;
    if (p > 0.0) s += p * std::log(p);
  }
  return s;
}

}  // namespace detail

/// Vision attention ratio: visual-span mass per head, averaged over heads.
inline double vision_attention_ratio(std::span<const std::vector<double>> rows, const PromptLayout& layout) {
  detail::check_rows(rows, layout);
  double total = 0.0;
  for (const auto& row : rows) {
    for (std::size_t i = layout.visual_span.begin; i < layout.visual_span.end; ++i) total += row[i];
  }
  return total / static_cast<double>(rows.size());
}

/// Text-to-visual entropy ratio, summed (not averaged) over heads, so it
/// scales with the head count.
inline double text_visual_entropy_ratio(std::span<const std::vector<double>> rows,
                                        const PromptLayout& layout) {
  detail::check_rows(rows, layout);
  std::vector<std::size_t> visual;
  for (std::size_t i = layout.visual_span.begin; i < layout.visual_span.end; ++i) visual.push_back(i);
  double total = 0.0;
  for (std::size_t h = 0; h < rows.size(); ++h) {
    const auto text = layout.text_positions(rows[h].size());
    const double txt = detail::negative_entropy_over(rows[h], text, "text", h);
    const double img = detail::negative_entropy_over(rows[h], visual, "visual", h);
    if (img == 0.0) throw DegenerateInput("TVER: visual attention is a point mass in head " + std::to_string(h));
    total += txt / img;
  }
  return total;
}

/// Head-averaged Block Entropy of pre-softmax visual segments.
inline double vision_attention_block_entropy(std::span<const std::vector<double>> segments,
                                             std::size_t block_size) {
  require(!segments.empty(), "VABE needs at least one head");
  double total = 0.0;
  for (const auto& seg : segments) total += block_entropy(GridMap::from_segment(seg), block_size);
  return total / static_cast<double>(segments.size());
}

/// Head-averaged Shannon entropy of the post-softmax attention restricted to
/// the visual span (the query-token indicator variant).
inline double visual_attention_entropy(std::span<const std::vector<double>> rows, const PromptLayout& layout) {
  detail::check_rows(rows, layout);
  double total = 0.0;
  for (const auto& row : rows) {
    total += shannon_entropy(std::span<const double>(row.data() + layout.visual_span.begin,
                                                     layout.visual_span.size()));
  }
  return total / static_cast<double>(rows.size());
}

/// Copies the visual span out of a full-length row.
inline std::vector<double> visual_segment(std::span<const double> row, const PromptLayout& layout) {
  require(layout.visual_span.end <= row.size(), "layout visual span lies outside the attention row");
  return {row.begin() + static_cast<std::ptrdiff_t>(layout.visual_span.begin),
          row.begin() + static_cast<std::ptrdiff_t>(layout.visual_span.end)};
}

struct LayerStats {
  std::size_t layer = 0;
  double var = 0.0;
  std::optional<double> tver;  // empty when the inputs were degenerate
  std::optional<double> vabe;  // empty when the grid does not split into blocks
};

}  // namespace vegas

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "vegas/common.hpp"

namespace vegas {

/// Pre-softmax value for masked positions. Finite so that segment means over
/// a row never involve infinities; exp() of it underflows to exactly 0.
inline constexpr double kMaskedScore = -1e9;

/// n rows of `cols` values, consecutive rows `stride` elements apart.
template <typename T>
struct RowsView {
  const T* base = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t stride = 0;

  RowsView() = default;
  RowsView(const T* b, std::size_t r, std::size_t c, std::size_t s)
      : base(b), rows(r), cols(c), stride(s) {}
  /// Dense row-major matrix.
  RowsView(std::span<const T> dense, std::size_t r, std::size_t c)
      : base(dense.data()), rows(r), cols(c), stride(c) {
    require(dense.size() == r * c, "matrix buffer does not match its shape");
  }

  std::span<const T> row(std::size_t i) const { return {base + i * stride, cols}; }
};

/// Numerically stable softmax with double-precision reductions.
inline std::vector<double> softmax(std::span<const double> scores) {
  std::vector<double> out(scores.size());
  if (scores.empty()) return out;
  const double peak = *std::max_element(scores.begin(), scores.end());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - peak);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

/// Dot product accumulated in T (single precision for the float model).
template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// Q.K^T / sqrt(d_k) for one query row; positions with mask[j] == false get
/// kMaskedScore. An empty mask allows every key.
template <typename T>
std::vector<double> attention_scores(std::span<const T> query, const RowsView<T>& keys,
                                     std::span<const bool> mask = {}) {
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(query.size()));
  std::vector<double> scores(keys.rows);
  for (std::size_t j = 0; j < keys.rows; ++j) {
    if (!mask.empty() && !mask[j]) {
      scores[j] = kMaskedScore;
    } else {
      scores[j] = static_cast<double>(dot(query, keys.row(j))) * inv_scale;
    }
  }
  return scores;
}

/// Attention-weighted sum of value rows, accumulated in double.
template <typename T>
std::vector<double> weighted_values(std::span<const double> weights, const RowsView<T>& values) {
  std::vector<double> out(values.cols, 0.0);
  for (std::size_t j = 0; j < values.rows; ++j) {
    const double w = weights[j];
    if (w == 0.0) continue;
    auto row = values.row(j);
    for (std::size_t c = 0; c < values.cols; ++c) out[c] += w * static_cast<double>(row[c]);
  }
  return out;
}

struct AttentionResult {
  std::vector<double> pre_softmax;
  std::vector<double> post_softmax;
  std::vector<double> output;
};

/// Scaled dot-product attention for a single query row.
template <typename T>
AttentionResult attend(std::span<const T> query, const RowsView<T>& keys, const RowsView<T>& values,
                       std::span<const bool> mask = {}) {
  require(keys.rows == values.rows, "attend: keys and values differ in length");
  require(keys.rows > 0, "attend: no keys");
  require(keys.cols == query.size(), "attend: query dimension does not match keys");
  require(mask.empty() || mask.size() == keys.rows, "attend: mask length does not match keys");
  require(all_finite(query), "attend: query contains non-finite values");
  for (std::size_t j = 0; j < keys.rows; ++j) {
    require(all_finite(keys.row(j)) && all_finite(values.row(j)),
            "attend: keys/values contain non-finite values");
  }
  if (!mask.empty()) {
    require(std::find(mask.begin(), mask.end(), true) != mask.end(), "attend: every key is masked");
  }
  AttentionResult r;
  r.pre_softmax = attention_scores(query, keys, mask);
  r.post_softmax = softmax(r.pre_softmax);
  r.output = weighted_values<T>(r.post_softmax, values);
  return r;
}

}  // namespace vegas

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vegas {

using TokenId = std::int32_t;

/// Reserved end-of-sequence id shared by every toy vocabulary.
inline constexpr TokenId kEosToken = 0;

/// Raised for any violated precondition (bad shapes, bad spans, bad config).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A statistic asked for on inputs where it is undefined (e.g. TVER with an
/// empty or single-token modality).
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw Error(message);
}

/// Half-open index range [begin, end).
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end > begin ? end - begin : 0; }
  bool empty() const { return end <= begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool overlaps(const IndexRange& o) const { return begin < o.end && o.begin < end; }
  friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

template <typename T>
bool all_finite(std::span<const T> values) {
  for (T v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
double mean_of(std::span<const T> values) {
  require(!values.empty(), "mean of an empty range");
  double sum = 0.0;
  for (T v : values) sum += static_cast<double>(v);
  return sum / static_cast<double>(values.size());
}

/// Integer square root when exact, otherwise 0.
inline std::size_t exact_sqrt(std::size_t n) {
  auto root = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  return root * root == n ? root : 0;
}

}  // namespace vegas

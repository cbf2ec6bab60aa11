#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace varformer {

/// Levenshtein distance with unit insert/delete/substitute costs.
template <class T>
std::size_t edit_distance(std::span<const T> a, std::span<const T> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  return edit_distance<int>(std::span<const int>(a), std::span<const int>(b));
}

std::vector<std::string> split_words(std::string_view text);

struct ErrorCounts {
  std::size_t edits = 0;
  std::size_t reference_length = 0;
  double rate() const;
};

/// Pooled word-level errors: sum of distances over sum of reference word counts.
ErrorCounts word_errors(const std::vector<std::string>& refs, const std::vector<std::string>& hyps);
/// Pooled character-level errors.
ErrorCounts char_errors(const std::vector<std::string>& refs, const std::vector<std::string>& hyps);

/// Both throw ContractError on count mismatch or zero total reference length.
double wer(const std::vector<std::string>& refs, const std::vector<std::string>& hyps);
double cer(const std::vector<std::string>& refs, const std::vector<std::string>& hyps);

}  // namespace varformer

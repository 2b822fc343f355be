#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace hm3::testing {

// Brute-force reference for trim / elect / disjoint merge on plain vectors.
// keep_tenths / 10 is the keep fraction, so the kept count is an exact
// integer ceiling.
inline std::vector<float> brute_force_ties(const std::vector<std::vector<float>>& deltas, int keep_tenths) {
  const std::size_t n = deltas[0].size();
  const std::size_t keep = (static_cast<std::size_t>(keep_tenths) * n + 9) / 10;
  std::vector<std::vector<float>> trimmed;
  for (const auto& d : deltas) {
    std::vector<float> t(n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
      // rank of i: entries strictly larger in magnitude, or equal and earlier
      std::size_t rank = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (std::abs(d[j]) > std::abs(d[i]) || (std::abs(d[j]) == std::abs(d[i]) && j < i)) ++rank;
      }
      if (rank < keep) t[i] = d[i];
    }
    trimmed.push_back(t);
  }
  std::vector<float> out(n, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    double pos = 0.0, neg = 0.0;
    for (const auto& t : trimmed) {
      if (t[i] > 0) pos += t[i];
      if (t[i] < 0) neg += -t[i];
    }
    const int sign = pos >= neg ? 1 : -1;
    double sum = 0.0;
    int count = 0;
    for (const auto& t : trimmed) {
      if ((sign > 0 && t[i] > 0) || (sign < 0 && t[i] < 0)) {
        sum += t[i];
        ++count;
      }
    }
    out[i] = count ? static_cast<float>(sum / count) : 0.0f;
  }
  return out;
}

}  // namespace hm3::testing

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace hm3 {

enum class Orientation { maximize, minimize };

struct ObjectivePoint {
  std::vector<double> values;
  Orientation orientation = Orientation::minimize;
  std::string label;
  bool clipped = false;  // set by normalize_to_min when a value fell outside its bounds

  int dim() const { return static_cast<int>(values.size()); }
};

struct ParetoFront {
  std::vector<ObjectivePoint> points;
  std::vector<double> reference;
};

// a is no worse than b everywhere and strictly better somewhere.
bool dominates(const ObjectivePoint& a, const ObjectivePoint& b);

// Points dominated by no other point. Exact duplicates keep their first
// occurrence. The reference defaults to all-ones.
ParetoFront nondominated_filter(std::span<const ObjectivePoint> points);

// Maps every point to minimization in [0, 1]^K using per-coordinate (lo, hi).
std::vector<ObjectivePoint> normalize_to_min(std::span<const ObjectivePoint> points,
                                             std::span<const std::pair<double, double>> bounds);

// Convenience for accuracy-like metrics: bounds (0, 1) and reference 1.
ParetoFront normalized_front(std::span<const ObjectivePoint> maximize_points);

struct HypervolumeResult {
  double value = 0.0;
  double std_error = 0.0;  // zero when exact
  bool exact = true;
};

// Exact dominated hypervolume for K <= 3 (sweep for K = 2, slicing for K = 3);
// Monte-Carlo estimate with a fixed seed for K > 3.
HypervolumeResult hypervolume_detailed(const ParetoFront& front, std::uint64_t mc_samples = 1'000'000,
                                       std::uint64_t mc_seed = 0);
double hypervolume(const ParetoFront& front);

}  // namespace hm3

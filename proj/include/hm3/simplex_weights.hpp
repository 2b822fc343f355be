#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace hm3 {

// One preference point on the unit simplex. `index` is 1-based within the
// generated lattice (0 for ad-hoc vectors such as the uniform baseline).
struct WeightVector {
  std::vector<double> components;
  int index = 0;

  int size() const { return static_cast<int>(components.size()); }
  double operator[](std::size_t k) const { return components[k]; }

  bool operator==(const WeightVector&) const = default;
};

// C(K+q-1, K-1), the lattice size.
std::uint64_t simplex_count(int num_objectives, int divisions);

// All points (i_1/q, ..., i_K/q) with i_k >= 0 and sum i_k = q, ordered
// lexicographically on (i_1, ..., i_K).
std::vector<WeightVector> generate_simplex(int num_objectives, int divisions);

WeightVector uniform_weights(int num_objectives);
WeightVector make_weight_vector(std::span<const double> components);

void write_weights_csv(const std::vector<WeightVector>& weights, const std::filesystem::path& path);

}  // namespace hm3

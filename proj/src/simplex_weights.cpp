#include "hm3/simplex_weights.hpp"

#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "hm3/error.hpp"

namespace hm3 {

std::uint64_t simplex_count(int num_objectives, int divisions) {
  // C(n, r) with n = K+q-1, r = K-1, computed incrementally (exact at each step).
  const std::uint64_t r = static_cast<std::uint64_t>(num_objectives - 1);
  const std::uint64_t n = static_cast<std::uint64_t>(num_objectives + divisions - 1);
  std::uint64_t c = 1;
  for (std::uint64_t i = 1; i <= r; ++i) c = c * (n - r + i) / i;
  return c;
}

namespace {

void enumerate(int remaining, std::size_t slot, std::vector<int>& parts, int divisions,
               std::vector<WeightVector>& out) {
  if (slot + 1 == parts.size()) {
    parts[slot] = remaining;
    WeightVector w;
    w.components.reserve(parts.size());
    for (const int p : parts) w.components.push_back(static_cast<double>(p) / divisions);
    w.index = static_cast<int>(out.size()) + 1;
    out.push_back(std::move(w));
    return;
  }
  for (int i = 0; i <= remaining; ++i) {
    parts[slot] = i;
    enumerate(remaining - i, slot + 1, parts, divisions, out);
  }
}

}  // namespace

std::vector<WeightVector> generate_simplex(int num_objectives, int divisions) {
  if (num_objectives < 2) throw Error(ErrorKind::domain, "simplex needs K >= 2");
  if (divisions < 1) throw Error(ErrorKind::domain, "simplex needs q >= 1");
  std::vector<WeightVector> out;
  out.reserve(simplex_count(num_objectives, divisions));
  std::vector<int> parts(static_cast<std::size_t>(num_objectives), 0);
  enumerate(divisions, 0, parts, divisions, out);
  return out;
}

WeightVector uniform_weights(int num_objectives) {
  if (num_objectives < 1) throw Error(ErrorKind::domain, "weight vector needs K >= 1");
  return WeightVector{std::vector<double>(static_cast<std::size_t>(num_objectives), 1.0 / num_objectives), 0};
}

WeightVector make_weight_vector(std::span<const double> components) {
  if (components.empty()) throw Error(ErrorKind::domain, "empty weight vector");
  double sum = 0.0;
  for (const double c : components) {
    if (!(c >= 0.0)) throw Error(ErrorKind::domain, "weight vector components must be >= 0");
    sum += c;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error(ErrorKind::domain, "weight vector must sum to 1");
  return WeightVector{std::vector<double>(components.begin(), components.end()), 0};
}

void write_weights_csv(const std::vector<WeightVector>& weights, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
  for (const auto& w : weights) {
    out << w.index;
    for (const double c : w.components) out << ',' << fmt::format("{}", c);
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::io, "write failed for '" + path.string() + "'");
}

}  // namespace hm3

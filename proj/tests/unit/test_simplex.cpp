#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "../support/fixtures.hpp"
#include "hm3/error.hpp"
#include "hm3/simplex_weights.hpp"

using namespace hm3;

namespace {

// Pascal's triangle, independent of the library's count.
std::uint64_t choose(int n, int k) {
  std::vector<std::vector<std::uint64_t>> c(static_cast<std::size_t>(n + 1));
  for (int i = 0; i <= n; ++i) {
    c[i].assign(static_cast<std::size_t>(i + 1), 1);
    for (int j = 1; j < i; ++j) c[i][j] = c[i - 1][j - 1] + c[i - 1][j];
  }
  return c[n][k];
}

void compositions(int parts, int total, std::vector<int>& prefix, std::vector<std::vector<int>>& out) {
  if (parts == 1) {
    prefix.push_back(total);
    out.push_back(prefix);
    prefix.pop_back();
    return;
  }
  for (int i = 0; i <= total; ++i) {
    prefix.push_back(i);
    compositions(parts - 1, total - i, prefix, out);
    prefix.pop_back();
  }
}

std::vector<std::vector<int>> lattice_numerators(const std::vector<WeightVector>& w, int q) {
  std::vector<std::vector<int>> out;
  for (const auto& v : w) {
    std::vector<int> n;
    for (const double c : v.components) {
      const double scaled = c * q;
      CHECK(std::abs(scaled - std::round(scaled)) < 1e-9);
      n.push_back(static_cast<int>(std::lround(scaled)));
    }
    out.push_back(n);
  }
  return out;
}

}  // namespace

TEST_CASE("three objectives at four divisions give fifteen vectors") {
  const auto w = generate_simplex(3, 4);
  CHECK(w.size() == 15);
}

TEST_CASE("two objectives at one division are the two endpoints") {
  const auto w = generate_simplex(2, 1);
  REQUIRE(w.size() == 2);
  CHECK(w[0].components == std::vector<double>{0.0, 1.0});
  CHECK(w[1].components == std::vector<double>{1.0, 0.0});
}

TEST_CASE("four objectives at three divisions match exhaustive enumeration") {
  const auto w = generate_simplex(4, 3);
  std::vector<std::vector<int>> expected;
  std::vector<int> prefix;
  compositions(4, 3, prefix, expected);
  CHECK(expected.size() == 20);
  CHECK(lattice_numerators(w, 3) == expected);
}

TEST_CASE("lattice properties over K in [2,6], q in [1,8]") {
  for (int k = 2; k <= 6; ++k) {
    for (int q = 1; q <= 8; ++q) {
      CAPTURE(k);
      CAPTURE(q);
      const auto w = generate_simplex(k, q);
      REQUIRE(w.size() == choose(k + q - 1, k - 1));
      CHECK(simplex_count(k, q) == w.size());
      const auto nums = lattice_numerators(w, q);
      CHECK(std::is_sorted(nums.begin(), nums.end()));
      const std::set<std::vector<int>> unique(nums.begin(), nums.end());
      CHECK(unique.size() == nums.size());
      for (std::size_t i = 0; i < w.size(); ++i) {
        CHECK(w[i].index == static_cast<int>(i) + 1);
        double sum = 0.0;
        for (const double c : w[i].components) {
          CHECK(c >= 0.0);
          sum += c;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
      }
      // Swapping the first two coordinates maps the set onto itself.
      std::set<std::vector<int>> swapped;
      for (auto n : nums) {
        std::swap(n[0], n[1]);
        swapped.insert(n);
      }
      CHECK(swapped == unique);
    }
  }
}

TEST_CASE("invalid lattice parameters are domain errors") {
  for (const auto& [k, q] : {std::pair{1, 3}, std::pair{3, 0}, std::pair{0, 0}}) {
    try {
      generate_simplex(k, q);
      FAIL("expected a domain error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::domain);
    }
  }
}

TEST_CASE("weights CSV rows are index then components") {
  const auto dir = hm3::testing::temp_dir("weights_csv");
  write_weights_csv(generate_simplex(2, 2), dir / "w.csv");
  std::ifstream in(dir / "w.csv");
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  CHECK(lines == std::vector<std::string>{"1,0,1", "2,0.5,0.5", "3,1,0"});
}

TEST_CASE("ad-hoc weight vectors are validated") {
  CHECK(uniform_weights(4).components == std::vector<double>(4, 0.25));
  const std::vector<double> bad{0.5, 0.6};
  CHECK_THROWS_AS(make_weight_vector(bad), Error);
  const std::vector<double> neg{1.5, -0.5};
  CHECK_THROWS_AS(make_weight_vector(neg), Error);
}

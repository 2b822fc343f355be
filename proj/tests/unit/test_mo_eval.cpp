#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "hm3/error.hpp"
#include "hm3/mo_eval.hpp"

using namespace hm3;

namespace {

ObjectivePoint mn(std::vector<double> v, std::string label = "") {
  return {std::move(v), Orientation::minimize, std::move(label), false};
}

ParetoFront front_of(std::vector<ObjectivePoint> pts) { return nondominated_filter(pts); }

// Fraction of uniform samples in [0,1]^K dominated by some point.
double monte_carlo_hv(const std::vector<ObjectivePoint>& pts, int dim, int samples, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> q(static_cast<std::size_t>(dim));
  int hits = 0;
  for (int s = 0; s < samples; ++s) {
    for (auto& x : q) x = u(gen);
    for (const auto& p : pts) {
      bool below = true;
      for (int k = 0; k < dim && below; ++k) below = p.values[static_cast<std::size_t>(k)] <= q[static_cast<std::size_t>(k)];
      if (below) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / samples;
}

std::vector<ObjectivePoint> random_points(std::mt19937_64& gen, int n, int dim) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ObjectivePoint> pts;
  for (int i = 0; i < n; ++i) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (auto& x : v) x = u(gen);
    pts.push_back(mn(v, std::to_string(i)));
  }
  return pts;
}

}  // namespace

TEST_CASE("dominance") {
  CHECK(dominates(mn({1, 2}), mn({2, 3})));
  CHECK_FALSE(dominates(mn({1, 2}), mn({2, 1})));
  CHECK_FALSE(dominates(mn({2, 1}), mn({1, 2})));
  CHECK_FALSE(dominates(mn({1, 2}), mn({1, 2})));
  const ObjectivePoint a{{0.9, 0.8}, Orientation::maximize, "", false};
  const ObjectivePoint b{{0.5, 0.8}, Orientation::maximize, "", false};
  CHECK(dominates(a, b));
  CHECK_THROWS_AS(dominates(a, mn({0.1, 0.1})), Error);
}

TEST_CASE("dominance is irreflexive, antisymmetric and transitive on random sets") {
  std::mt19937_64 gen(5);
  std::uniform_int_distribution<int> small(0, 3);
  std::vector<ObjectivePoint> pts;
  for (int i = 0; i < 60; ++i) pts.push_back(mn({double(small(gen)), double(small(gen)), double(small(gen))}));
  for (const auto& a : pts) {
    CHECK_FALSE(dominates(a, a));
    for (const auto& b : pts) {
      if (dominates(a, b)) CHECK_FALSE(dominates(b, a));
      for (const auto& c : pts) {
        if (dominates(a, b) && dominates(b, c)) CHECK(dominates(a, c));
      }
    }
  }
}

TEST_CASE("non-dominated filtering") {
  SUBCASE("a single point is its own front") { CHECK(front_of({mn({0.3, 0.4})}).points.size() == 1); }
  SUBCASE("a chain keeps only its best element") {
    const auto f = front_of({mn({3, 3}, "c"), mn({1, 1}, "a"), mn({2, 2}, "b")});
    REQUIRE(f.points.size() == 1);
    CHECK(f.points[0].label == "a");
  }
  SUBCASE("duplicates collapse to the first occurrence") {
    const auto f = front_of({mn({1, 2}, "x"), mn({1, 2}, "y"), mn({2, 1}, "z")});
    REQUIRE(f.points.size() == 2);
    CHECK(f.points[0].label == "x");
  }
  SUBCASE("empty input gives an empty front") { CHECK(front_of({}).points.empty()); }
  SUBCASE("200 random points agree with pairwise brute force") {
    std::mt19937_64 gen(11);
    const auto pts = random_points(gen, 200, 3);
    std::vector<std::string> expected;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      bool dominated = false;
      for (std::size_t j = 0; j < pts.size() && !dominated; ++j) dominated = j != i && dominates(pts[j], pts[i]);
      if (!dominated) expected.push_back(pts[i].label);
    }
    std::vector<std::string> got;
    for (const auto& p : nondominated_filter(pts).points) got.push_back(p.label);
    CHECK(got == expected);
  }
}

TEST_CASE("normalization to minimization") {
  const std::vector<std::pair<double, double>> unit{{0.0, 1.0}};
  const std::vector<ObjectivePoint> acc{{{1.0}, Orientation::maximize, "", false},
                                        {{0.0}, Orientation::maximize, "", false},
                                        {{0.5}, Orientation::maximize, "", false},
                                        {{1.2}, Orientation::maximize, "", false}};
  const auto n = normalize_to_min(acc, unit);
  CHECK(n[0].values[0] == 0.0);
  CHECK(n[1].values[0] == 1.0);
  CHECK(n[2].values[0] == 0.5);
  CHECK(n[3].values[0] == 0.0);
  CHECK(n[3].clipped);
  CHECK_FALSE(n[2].clipped);
  for (const auto& p : n) CHECK(p.orientation == Orientation::minimize);
  const std::vector<std::pair<double, double>> wide{{2.0, 6.0}};
  const std::vector<ObjectivePoint> cost{mn({3.0})};
  CHECK(normalize_to_min(cost, wide)[0].values[0] == doctest::Approx(0.25));
  const std::vector<std::pair<double, double>> bad{{1.0, 1.0}};
  CHECK_THROWS_AS(normalize_to_min(cost, bad), Error);
}

TEST_CASE("hypervolume closed forms") {
  CHECK(hypervolume(front_of({mn({0.5, 0.5})})) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(std::abs(hypervolume(front_of({mn({0.2, 0.6}), mn({0.6, 0.2})})) - 0.48) < 1e-9);
  CHECK(hypervolume(ParetoFront{}) == 0.0);
  CHECK(std::abs(hypervolume(front_of({mn({0.5, 0.5, 0.5})})) - 0.125) < 1e-9);
  // Staircase of three boxes in 3-D: union by inclusion-exclusion.
  const double v = 0.6 * 0.6 * 1.0 + 1.0 * 0.6 * 0.6 + 0.6 * 1.0 * 0.6 - 3 * (0.6 * 0.6 * 0.6) + 0.6 * 0.6 * 0.6;
  CHECK(std::abs(hypervolume(front_of({mn({0.4, 0.4, 0.0}), mn({0.0, 0.4, 0.4}), mn({0.4, 0.0, 0.4})})) - v) < 1e-9);
  // A point outside the reference box contributes nothing.
  CHECK(hypervolume(front_of({mn({1.0, 0.2})})) == 0.0);
}

TEST_CASE("hypervolume of the normalized accuracy front") {
  const std::vector<ObjectivePoint> acc{{{0.5, 0.5}, Orientation::maximize, "a", false}};
  CHECK(hypervolume(normalized_front(acc)) == doctest::Approx(0.25));
}

TEST_CASE("exact hypervolume agrees with Monte-Carlo on random fronts") {
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int dim = 2 + trial % 2;
    const auto pts = random_points(gen, 3 + trial % 7, dim);
    const double exact = hypervolume(nondominated_filter(pts));
    CHECK(std::abs(exact - monte_carlo_hv(pts, dim, 200000, 100 + trial)) < 5e-3);
  }
}

TEST_CASE("hypervolume is monotone under point addition") {
  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 50; ++trial) {
    const int dim = 2 + trial % 2;
    auto pts = random_points(gen, 5, dim);
    const double before = hypervolume(nondominated_filter(pts));
    auto more = pts;
    more.push_back(random_points(gen, 1, dim)[0]);
    CHECK(hypervolume(nondominated_filter(more)) >= before - 1e-15);
    // A point strictly dominating an existing front member adds volume.
    const auto front = nondominated_filter(pts);
    ObjectivePoint better = front.points[0];
    for (auto& x : better.values) x *= 0.5;
    pts.push_back(better);
    CHECK(hypervolume(nondominated_filter(pts)) > before);
  }
}

TEST_CASE("more than three objectives fall back to an estimate with a standard error") {
  // Two boxes of volume 1/16 overlapping in 1/32.
  const auto f = front_of({mn({0.5, 0.5, 0.5, 0.5}), mn({0.75, 0.5, 0.5, 0.0})});
  const auto r = hypervolume_detailed(f, 200000, 1);
  CHECK_FALSE(r.exact);
  CHECK(r.std_error > 0.0);
  const double truth = 0.0625 + 0.0625 - 0.03125;
  CHECK(std::abs(r.value - truth) < 4 * r.std_error + 1e-4);
}

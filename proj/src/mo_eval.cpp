#include "hm3/mo_eval.hpp"

#include <algorithm>
#include <cmath>

#include "hm3/error.hpp"
#include "hm3/rng.hpp"

namespace hm3 {

bool dominates(const ObjectivePoint& a, const ObjectivePoint& b) {
  if (a.orientation != b.orientation) throw Error(ErrorKind::domain, "orientation mismatch in dominance test");
  if (a.values.size() != b.values.size()) throw Error(ErrorKind::domain, "dimension mismatch in dominance test");
  const bool minimize = a.orientation == Orientation::minimize;
  bool strictly_better = false;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double x = minimize ? a.values[i] : -a.values[i];
    const double y = minimize ? b.values[i] : -b.values[i];
    if (x > y) return false;
    if (x < y) strictly_better = true;
  }
  return strictly_better;
}

ParetoFront nondominated_filter(std::span<const ObjectivePoint> points) {
  ParetoFront front;
  if (points.empty()) return front;
  front.reference.assign(points[0].values.size(), 1.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    bool keep = true;
    for (std::size_t j = 0; j < points.size() && keep; ++j) {
      if (j == i) continue;
      if (dominates(points[j], points[i])) keep = false;
      else if (j < i && points[j].values == points[i].values) keep = false;
    }
    if (keep) front.points.push_back(points[i]);
  }
  return front;
}

std::vector<ObjectivePoint> normalize_to_min(std::span<const ObjectivePoint> points,
                                             std::span<const std::pair<double, double>> bounds) {
  std::vector<ObjectivePoint> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    if (p.values.size() != bounds.size()) throw Error(ErrorKind::domain, "bounds dimension mismatch");
    ObjectivePoint q{std::vector<double>(p.values.size()), Orientation::minimize, p.label, p.clipped};
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      const auto [lo, hi] = bounds[i];
      if (!(hi > lo)) throw Error(ErrorKind::domain, "normalization bounds need hi > lo");
      double v = p.orientation == Orientation::maximize ? (hi - p.values[i]) / (hi - lo)
                                                         : (p.values[i] - lo) / (hi - lo);
      if (v < 0.0 || v > 1.0) {
        v = std::clamp(v, 0.0, 1.0);
        q.clipped = true;
      }
      q.values[i] = v;
    }
    out.push_back(std::move(q));
  }
  return out;
}

ParetoFront normalized_front(std::span<const ObjectivePoint> maximize_points) {
  if (maximize_points.empty()) return {};
  const std::vector<std::pair<double, double>> bounds(maximize_points[0].values.size(), {0.0, 1.0});
  const auto normalized = normalize_to_min(maximize_points, bounds);
  return nondominated_filter(normalized);
}

namespace {

using Point = std::vector<double>;

// Points strictly inside the reference box; anything touching or beyond the
// reference in some coordinate encloses zero volume.
std::vector<Point> contributing(const ParetoFront& front) {
  std::vector<Point> pts;
  for (const auto& p : front.points) {
    if (p.orientation != Orientation::minimize) {
      throw Error(ErrorKind::domain, "hypervolume expects minimization-oriented points");
    }
    if (p.values.size() != front.reference.size()) throw Error(ErrorKind::domain, "reference dimension mismatch");
    bool inside = true;
    for (std::size_t i = 0; i < p.values.size(); ++i) inside = inside && p.values[i] < front.reference[i];
    if (inside) pts.push_back(p.values);
  }
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  return pts;
}

// Area dominated by 2-D points (x, y) below reference (rx, ry).
double area_2d(std::vector<std::pair<double, double>> pts, double rx, double ry) {
  std::sort(pts.begin(), pts.end());
  double area = 0.0;
  double best_y = ry;
  for (const auto& [x, y] : pts) {
    if (y < best_y) {
      area += (rx - x) * (best_y - y);
      best_y = y;
    }
  }
  return area;
}

double volume_3d(std::vector<Point> pts, const std::vector<double>& ref) {
  std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a[2] < b[2]; });
  double volume = 0.0;
  std::vector<std::pair<double, double>> slice;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    slice.emplace_back(pts[i][0], pts[i][1]);
    const double next_z = i + 1 < pts.size() ? pts[i + 1][2] : ref[2];
    if (next_z > pts[i][2]) volume += area_2d(slice, ref[0], ref[1]) * (next_z - pts[i][2]);
  }
  return volume;
}

}  // namespace

HypervolumeResult hypervolume_detailed(const ParetoFront& front, std::uint64_t mc_samples, std::uint64_t mc_seed) {
  const auto pts = contributing(front);
  if (pts.empty()) return {};
  const std::size_t dim = front.reference.size();
  const auto& ref = front.reference;
  if (dim == 1) return {ref[0] - pts.front()[0], 0.0, true};
  if (dim == 2) {
    std::vector<std::pair<double, double>> xy;
    for (const auto& p : pts) xy.emplace_back(p[0], p[1]);
    return {area_2d(std::move(xy), ref[0], ref[1]), 0.0, true};
  }
  if (dim == 3) return {volume_3d(pts, ref), 0.0, true};

  // K > 3: uniform sampling of the bounding box [min_i, ref_i].
  std::vector<double> lo(dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) {
    lo[i] = pts[0][i];
    for (const auto& p : pts) lo[i] = std::min(lo[i], p[i]);
  }
  double box = 1.0;
  for (std::size_t i = 0; i < dim; ++i) box *= ref[i] - lo[i];
  Rng rng(mc_seed);
  std::vector<double> q(dim);
  std::uint64_t hits = 0;
  for (std::uint64_t s = 0; s < mc_samples; ++s) {
    for (std::size_t i = 0; i < dim; ++i) q[i] = rng.uniform(lo[i], ref[i]);
    for (const auto& p : pts) {
      bool covered = true;
      for (std::size_t i = 0; i < dim && covered; ++i) covered = p[i] <= q[i];
      if (covered) {
        ++hits;
        break;
      }
    }
  }
  const double frac = static_cast<double>(hits) / static_cast<double>(mc_samples);
  return {box * frac, box * std::sqrt(frac * (1.0 - frac) / static_cast<double>(mc_samples)), false};
}

double hypervolume(const ParetoFront& front) { return hypervolume_detailed(front).value; }

}  // namespace hm3

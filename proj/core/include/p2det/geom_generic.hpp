#pragma once

#include <algorithm>
#include <vector>

#include "p2det/tape_scalar.hpp"

namespace p2det::geom {

// Convex-polygon machinery templated on the scalar type: double for the
// exact geometry API, TapeScalar for the differentiable loss path.

template <class T>
struct GPoint {
  T x, y;
};

/// Cross product of (a - o) x (b - o).
template <class T>
T cross3(const GPoint<T>& o, const GPoint<T>& a, const GPoint<T>& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

/// Signed shoelace area; positive for counter-clockwise winding.
template <class T>
T signed_area(const std::vector<GPoint<T>>& poly) {
  if (poly.size() < 3) {
    if (poly.empty()) {
      // callers never reach this with an empty TapeScalar polygon
      return T{};
    }
    return (poly[0].x - poly[0].x);  // zero of the right scalar type
  }
  T acc = (poly[0].x * poly[1].y - poly[1].x * poly[0].y);
  for (size_t i = 1; i < poly.size(); ++i) {
    const size_t j = (i + 1) % poly.size();
    acc = acc + (poly[i].x * poly[j].y - poly[j].x * poly[i].y);
  }
  return acc * 0.5;
}

/// Andrew's monotone chain. Returns the hull CCW with collinear interior
/// points dropped. Degenerate input (all collinear) yields < 3 points;
/// callers decide whether that is an error.
template <class T>
std::vector<GPoint<T>> convex_hull(std::vector<GPoint<T>> pts) {
  std::sort(pts.begin(), pts.end(), [](const GPoint<T>& a, const GPoint<T>& b) {
    const double ax = value_of(a.x), bx = value_of(b.x);
    if (ax != bx) return ax < bx;
    return value_of(a.y) < value_of(b.y);
  });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](const GPoint<T>& a, const GPoint<T>& b) {
                          return value_of(a.x) == value_of(b.x) &&
                                 value_of(a.y) == value_of(b.y);
                        }),
            pts.end());
  const size_t n = pts.size();
  if (n < 3) return pts;
  std::vector<GPoint<T>> hull(2 * n);
  size_t k = 0;
  for (size_t i = 0; i < n; ++i) {  // lower
    while (k >= 2 && value_of(cross3(hull[k - 2], hull[k - 1], pts[i])) <= 0.0) --k;
    hull[k++] = pts[i];
  }
  const size_t lower = k + 1;
  for (size_t i = n - 1; i-- > 0;) {  // upper
    while (k >= lower && value_of(cross3(hull[k - 2], hull[k - 1], pts[i])) <= 0.0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

/// Sutherland-Hodgman: clip `subject` against convex CCW `clip`.
template <class T>
std::vector<GPoint<T>> clip_convex(const std::vector<GPoint<T>>& subject,
                                   const std::vector<GPoint<T>>& clip) {
  std::vector<GPoint<T>> out = subject;
  const size_t m = clip.size();
  for (size_t e = 0; e < m && !out.empty(); ++e) {
    const GPoint<T>& c1 = clip[e];
    const GPoint<T>& c2 = clip[(e + 1) % m];
    std::vector<GPoint<T>> in;
    in.swap(out);
    const size_t n = in.size();
    for (size_t v = 0; v < n; ++v) {
      const GPoint<T>& p1 = in[v];
      const GPoint<T>& p2 = in[(v + 1) % n];
      const T d1 = cross3(c1, c2, p1);
      const T d2 = cross3(c1, c2, p2);
      const bool in1 = value_of(d1) >= 0.0;
      const bool in2 = value_of(d2) >= 0.0;
      if (in1 != in2) {
        const T t = d1 / (d1 - d2);
        out.push_back({p1.x + (p2.x - p1.x) * t, p1.y + (p2.y - p1.y) * t});
      }
      if (in2) out.push_back(p2);
    }
  }
  return out;
}

/// Intersection area of two convex CCW polygons; 0 for empty overlap.
template <class T>
T intersection_area(const std::vector<GPoint<T>>& p, const std::vector<GPoint<T>>& q,
                    const T& zero) {
  const auto inter = clip_convex(p, q);
  if (inter.size() < 3) return zero;
  return ad_abs(signed_area(inter));
}

/// GIoU over two corner sets: IoU minus the enclosing-hull penalty. The
/// enclosing shape is the convex hull of both point sets combined; each
/// input is reduced to its own hull first (predicted quads may be
/// non-convex mid-training).
template <class T>
T generalized_iou(const std::vector<GPoint<T>>& a_pts, const std::vector<GPoint<T>>& b_pts,
                  const T& zero) {
  auto ha = convex_hull(a_pts);
  auto hb = convex_hull(b_pts);
  const T area_a = ha.size() >= 3 ? signed_area(ha) : zero;
  const T area_b = hb.size() >= 3 ? signed_area(hb) : zero;
  const T inter = (ha.size() >= 3 && hb.size() >= 3) ? intersection_area(ha, hb, zero) : zero;
  const T uni = area_a + area_b - inter;

  std::vector<GPoint<T>> all = a_pts;
  all.insert(all.end(), b_pts.begin(), b_pts.end());
  auto enclosing = convex_hull(all);
  const T enclose_area = enclosing.size() >= 3 ? signed_area(enclosing) : zero;

  if (value_of(enclose_area) <= 1e-12) return zero;  // everything degenerate
  const T iou = (value_of(uni) > 1e-12) ? inter / uni : zero;
  return iou - (enclose_area - uni) / enclose_area;
}

}  // namespace p2det::geom

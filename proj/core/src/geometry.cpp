#include "p2det/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "p2det/geom_generic.hpp"

namespace p2det {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kMinEdge = 1e-6;

geom::GPoint<double> gp(const Vec2& v) { return {v.x, v.y}; }

std::vector<geom::GPoint<double>> to_gpoly(const Polygon& poly) {
  std::vector<geom::GPoint<double>> out;
  out.reserve(poly.size());
  for (const Vec2& v : poly) out.push_back(gp(v));
  return out;
}

// Lexicographic polygon order so binary ops can canonicalize their argument
// order and stay bit-for-bit symmetric.
bool poly_less(const Polygon& a, const Polygon& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].x != b[i].x) return a[i].x < b[i].x;
    if (a[i].y != b[i].y) return a[i].y < b[i].y;
  }
  return false;
}

double shoelace(const Polygon& poly) {
  double s = 0.0;
  for (size_t i = 0; i < poly.size(); ++i) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[(i + 1) % poly.size()];
    s += a.x * b.y - a.y * b.x;
  }
  return 0.5 * s;
}

}  // namespace

double canonical_angle(double theta) {
  if (!std::isfinite(theta)) throw std::invalid_argument("non-finite box angle");
  double t = std::fmod(theta + kPi / 2.0, kPi);
  if (t < 0.0) t += kPi;
  return t - kPi / 2.0;
}

OrientedBox OrientedBox::make(double cx, double cy, double w, double h, double theta) {
  if (!std::isfinite(cx) || !std::isfinite(cy) || !std::isfinite(w) || !std::isfinite(h)) {
    throw std::invalid_argument("non-finite box parameters");
  }
  if (w < h) {
    std::swap(w, h);
    theta += kPi / 2.0;
  }
  if (h <= kMinEdge) throw std::invalid_argument("degenerate box: short edge <= 1e-6");
  OrientedBox b;
  b.cx = cx;
  b.cy = cy;
  b.w = w;
  b.h = h;
  b.theta = canonical_angle(theta);
  return b;
}

double OrientedBox::diagonal() const { return std::sqrt(w * w + h * h); }

Quad Quad::from_points(const std::array<Vec2, 4>& pts) {
  Quad q;
  q.corners = pts;
  double area2 = 0.0;
  for (int i = 0; i < 4; ++i) {
    const Vec2& a = pts[i];
    const Vec2& b = pts[(i + 1) % 4];
    area2 += a.x * b.y - a.y * b.x;
  }
  if (std::abs(area2) <= 2.0 * kMinEdge * kMinEdge) {
    throw std::invalid_argument("degenerate quad: zero area");
  }
  if (area2 < 0.0) {
    // Flip winding, keeping the first corner in place.
    std::swap(q.corners[1], q.corners[3]);
  }
  return q;
}

Quad obb_to_corners(const OrientedBox& b) {
  const double c = std::cos(b.theta);
  const double s = std::sin(b.theta);
  const double hw = 0.5 * b.w;
  const double hh = 0.5 * b.h;
  // Local CCW corners (y up): (-hw,-hh) -> (hw,-hh) -> (hw,hh) -> (-hw,hh).
  const std::array<Vec2, 4> local = {
      Vec2{-hw, -hh}, Vec2{hw, -hh}, Vec2{hw, hh}, Vec2{-hw, hh}};
  Quad q;
  for (int i = 0; i < 4; ++i) {
    q.corners[i].x = b.cx + c * local[i].x - s * local[i].y;
    q.corners[i].y = b.cy + s * local[i].x + c * local[i].y;
  }
  return q;
}

Polygon convex_hull(const std::vector<Vec2>& points) {
  if (points.size() < 3) throw std::invalid_argument("convex hull needs >= 3 points");
  auto hull = geom::convex_hull<double>(to_gpoly(points));
  if (hull.size() < 3) throw std::invalid_argument("degenerate hull: all points collinear");
  Polygon out;
  out.reserve(hull.size());
  for (const auto& p : hull) out.push_back({p.x, p.y});
  return out;
}

double polygon_area(const Polygon& poly) {
  if (poly.size() < 3) return 0.0;
  return std::abs(shoelace(poly));
}

double polygon_intersection_area(const Polygon& p, const Polygon& q) {
  const Polygon& first = poly_less(p, q) ? p : q;
  const Polygon& second = poly_less(p, q) ? q : p;
  return geom::intersection_area<double>(to_gpoly(first), to_gpoly(second), 0.0);
}

OrientedBox corners_to_obb(const Quad& q) {
  Polygon pts = q.polygon();
  // Quad invariant guarantees positive area, so the hull is non-degenerate
  // (it may still be a triangle when one corner is inside the others).
  Polygon hull = convex_hull(pts);
  const size_t n = hull.size();

  double best_area = std::numeric_limits<double>::infinity();
  double best_cx = 0.0, best_cy = 0.0, best_w = 0.0, best_h = 0.0, best_theta = 0.0;

  for (size_t i = 0; i < n; ++i) {
    const Vec2& a = hull[i];
    const Vec2& b = hull[(i + 1) % n];
    const double ex = b.x - a.x;
    const double ey = b.y - a.y;
    const double len = std::hypot(ex, ey);
    if (len <= kMinEdge) continue;
    const double ux = ex / len, uy = ey / len;  // edge direction
    const double vx = -uy, vy = ux;             // perpendicular

    double min_u = std::numeric_limits<double>::infinity(), max_u = -min_u;
    double min_v = min_u, max_v = -min_u;
    for (const Vec2& p : hull) {
      const double pu = p.x * ux + p.y * uy;
      const double pv = p.x * vx + p.y * vy;
      min_u = std::min(min_u, pu);
      max_u = std::max(max_u, pu);
      min_v = std::min(min_v, pv);
      max_v = std::max(max_v, pv);
    }
    const double du = max_u - min_u;
    const double dv = max_v - min_v;
    const double area = du * dv;
    if (area < best_area) {
      best_area = area;
      const double mu = 0.5 * (min_u + max_u);
      const double mv = 0.5 * (min_v + max_v);
      best_cx = mu * ux + mv * vx;
      best_cy = mu * uy + mv * vy;
      best_w = du;
      best_h = dv;
      best_theta = std::atan2(uy, ux);
    }
  }
  return OrientedBox::make(best_cx, best_cy, best_w, best_h, best_theta);
}

double obb_iou(const OrientedBox& a, const OrientedBox& b) {
  const double inter = polygon_intersection_area(obb_to_corners(a).polygon(),
                                                 obb_to_corners(b).polygon());
  const double uni = a.area() + b.area() - inter;
  return inter / uni;
}

double quad_iou(const Quad& a, const Quad& b) {
  const Polygon pa = a.polygon();
  const Polygon pb = b.polygon();
  const double inter = polygon_intersection_area(pa, pb);
  const double uni = polygon_area(pa) + polygon_area(pb) - inter;
  if (uni <= 0.0) throw std::invalid_argument("degenerate quads in iou");
  return inter / uni;
}

double giou(const Quad& a, const Quad& b) {
  const Polygon pa = a.polygon();
  const Polygon pb = b.polygon();
  const double inter = polygon_intersection_area(pa, pb);
  const double uni = polygon_area(pa) + polygon_area(pb) - inter;
  if (uni <= 0.0) throw std::invalid_argument("degenerate quads in giou");

  std::vector<Vec2> all;
  all.reserve(8);
  all.insert(all.end(), pa.begin(), pa.end());
  all.insert(all.end(), pb.begin(), pb.end());
  // convex_hull sorts its input, so the enclosing area is order-independent.
  const double enclose = polygon_area(convex_hull(all));

  const double iou = inter / uni;
  if (enclose <= 0.0) return iou;
  return iou - (enclose - uni) / enclose;
}

double giou(const OrientedBox& a, const OrientedBox& b) {
  return giou(obb_to_corners(a), obb_to_corners(b));
}

double aspect_ratio(const OrientedBox& b) { return b.w / b.h; }

bool point_in_obb(const Vec2& p, const OrientedBox& b) {
  const double c = std::cos(b.theta);
  const double s = std::sin(b.theta);
  const double dx = p.x - b.cx;
  const double dy = p.y - b.cy;
  const double lx = dx * c + dy * s;
  const double ly = -dx * s + dy * c;
  return std::abs(lx) <= 0.5 * b.w && std::abs(ly) <= 0.5 * b.h;
}

}  // namespace p2det

#pragma once

#include <array>
#include <vector>

namespace p2det {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

using Polygon = std::vector<Vec2>;

/// Rotated rectangle under the long-edge convention: w is the long edge,
/// h the short edge, theta the long-edge angle in [-pi/2, pi/2).
struct OrientedBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
  double theta = 0.0;

  /// Canonicalizes (swaps edges / wraps the angle as needed) and rejects
  /// degenerate boxes (short edge <= 1e-6 px).
  static OrientedBox make(double cx, double cy, double w, double h, double theta);

  double area() const { return w * h; }
  double diagonal() const;
};

/// Four corners in counter-clockwise winding, signed area > 0.
struct Quad {
  std::array<Vec2, 4> corners{};

  /// Canonicalizes winding to CCW; throws on zero-area input.
  static Quad from_points(const std::array<Vec2, 4>& pts);

  Polygon polygon() const { return {corners[0], corners[1], corners[2], corners[3]}; }
};

Quad obb_to_corners(const OrientedBox& b);

/// Minimum-area enclosing rotated rectangle of the quad (rotating calipers
/// over the hull edges). Inverse of obb_to_corners up to canonicalization.
OrientedBox corners_to_obb(const Quad& q);

/// Andrew's monotone chain, CCW output, collinear interior points dropped.
/// Throws std::invalid_argument when all points are collinear.
Polygon convex_hull(const std::vector<Vec2>& points);

/// Area of a simple polygon (absolute value of the shoelace sum).
double polygon_area(const Polygon& poly);

/// Sutherland-Hodgman intersection area of two convex CCW polygons.
/// Symmetric in its arguments; 0 for disjoint inputs.
double polygon_intersection_area(const Polygon& p, const Polygon& q);

double obb_iou(const OrientedBox& a, const OrientedBox& b);
double quad_iou(const Quad& a, const Quad& b);

/// GIoU with the enclosing shape taken as the convex hull of both corner
/// sets. In (-1, 1]; the associated loss is 1 - giou.
double giou(const Quad& a, const Quad& b);
double giou(const OrientedBox& a, const OrientedBox& b);

/// Long edge over short edge; >= 1 by the OrientedBox invariant.
double aspect_ratio(const OrientedBox& b);

bool point_in_obb(const Vec2& p, const OrientedBox& b);

/// Angle wrapped into [-pi/2, pi/2).
double canonical_angle(double theta);

}  // namespace p2det

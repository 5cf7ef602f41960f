#pragma once

#include <utility>
#include <vector>

#include "p2det/geometry.hpp"

namespace p2det {

/// Feature-map cell center mapped back to image space.
struct SamplePoint {
  double x = 0.0;
  double y = 0.0;
  double stride = 1.0;
};

struct AssignerConfig {
  double w = 2.0;  // shape-factor decay rate
  int top_k = 9;   // candidate pool size per box
  // Measure center offsets in the box's rotated frame (vs. raw image axes).
  bool rotated_frame = true;
  // Denominator power in the normalized distance: 1 as published, 2 for the
  // scale-invariant variant.
  int distance_exponent = 1;
  // Ablation: replace the shape-adaptive threshold with a constant.
  bool use_fixed_threshold = false;
  double fixed_threshold = 0.5;
};

struct AssignmentResult {
  static constexpr int kNegative = -1;
  static constexpr int kIgnore = -2;
  std::vector<int> gt_index;    // per sample: >= 0 positive, else kNegative/kIgnore
  std::vector<double> quality;  // in (0,1] for positives, 0 otherwise

  bool is_positive(size_t i) const { return gt_index[i] >= 0; }
};

/// Population mean and standard deviation (divide by n).
std::pair<double, double> iou_stats(const std::vector<double>& ious);

/// f(alpha) = exp(-w * alpha); strictly decreasing in alpha.
double shape_factor(double alpha, double w);

/// T = f(alpha) * (mu + sigma).
double adaptive_threshold(double mu, double sigma, double alpha, double w);

/// D = sqrt(dx^2 / w^e + dy^2 / h^e), offsets optionally in the box frame.
double shape_distance(const SamplePoint& s, const OrientedBox& gt,
                      const AssignerConfig& cfg);

/// Q = exp(-D), in (0, 1]; 1 exactly at the box center.
double quality(double distance);

/// Row-major cell centers of a (image_size/stride)^2 grid.
std::vector<SamplePoint> make_grid_samples(int image_size, int stride);

/// Per box: pick top_k samples by center distance, score them with a
/// stride-sized axis-aligned proxy square against the rotated box, derive
/// the shape-adaptive threshold from the pool's IoU statistics, and mark
/// in-box candidates above it positive. Samples claimed by several boxes go
/// to the one with the larger Q (ties: smaller box area, then lower index).
AssignmentResult assign(const std::vector<SamplePoint>& samples,
                        const std::vector<OrientedBox>& gt_boxes,
                        const AssignerConfig& cfg);

}  // namespace p2det

#include "p2det/assigner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace p2det {

std::pair<double, double> iou_stats(const std::vector<double>& ious) {
  if (ious.empty()) throw std::invalid_argument("iou_stats on empty list");
  const double n = static_cast<double>(ious.size());
  const double mu = std::accumulate(ious.begin(), ious.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : ious) ss += (v - mu) * (v - mu);
  return {mu, std::sqrt(ss / n)};
}

double shape_factor(double alpha, double w) {
  if (!(alpha >= 1.0)) throw std::invalid_argument("aspect ratio must be >= 1");
  if (!(w > 0.0)) throw std::invalid_argument("shape factor needs w > 0");
  return std::exp(-w * alpha);
}

double adaptive_threshold(double mu, double sigma, double alpha, double w) {
  return shape_factor(alpha, w) * (mu + sigma);
}

double shape_distance(const SamplePoint& s, const OrientedBox& gt,
                      const AssignerConfig& cfg) {
  if (cfg.distance_exponent != 1 && cfg.distance_exponent != 2) {
    throw std::invalid_argument("distance_exponent must be 1 or 2");
  }
  const double dx = s.x - gt.cx;
  const double dy = s.y - gt.cy;
  double lx = dx, ly = dy;
  if (cfg.rotated_frame) {
    const double c = std::cos(gt.theta);
    const double sn = std::sin(gt.theta);
    lx = dx * c + dy * sn;
    ly = -dx * sn + dy * c;
  }
  const double dw = cfg.distance_exponent == 1 ? gt.w : gt.w * gt.w;
  const double dh = cfg.distance_exponent == 1 ? gt.h : gt.h * gt.h;
  return std::sqrt(lx * lx / dw + ly * ly / dh);
}

double quality(double distance) {
  if (!(distance >= 0.0)) throw std::invalid_argument("negative shape distance");
  return std::exp(-distance);
}

std::vector<SamplePoint> make_grid_samples(int image_size, int stride) {
  if (stride <= 0 || image_size % stride != 0) {
    throw std::invalid_argument("image size must be a positive multiple of stride");
  }
  const int cells = image_size / stride;
  std::vector<SamplePoint> out;
  out.reserve(static_cast<size_t>(cells) * cells);
  for (int i = 0; i < cells; ++i) {
    for (int j = 0; j < cells; ++j) {
      out.push_back({(j + 0.5) * stride - 0.5, (i + 0.5) * stride - 0.5,
                     static_cast<double>(stride)});
    }
  }
  return out;
}

AssignmentResult assign(const std::vector<SamplePoint>& samples,
                        const std::vector<OrientedBox>& gt_boxes,
                        const AssignerConfig& cfg) {
  if (samples.empty()) throw std::invalid_argument("assign needs at least one sample");
  if (cfg.top_k < 1) throw std::invalid_argument("top_k must be >= 1");

  AssignmentResult result;
  result.gt_index.assign(samples.size(), AssignmentResult::kNegative);
  result.quality.assign(samples.size(), 0.0);
  if (gt_boxes.empty()) return result;

  for (size_t gi = 0; gi < gt_boxes.size(); ++gi) {
    const OrientedBox& gt = gt_boxes[gi];

    // Candidate pool: top_k nearest by center distance. Ties break on
    // coordinates, not sample index, so permuting samples permutes labels.
    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    auto closer = [&](size_t a, size_t b) {
      const double da = std::hypot(samples[a].x - gt.cx, samples[a].y - gt.cy);
      const double db = std::hypot(samples[b].x - gt.cx, samples[b].y - gt.cy);
      if (da != db) return da < db;
      if (samples[a].x != samples[b].x) return samples[a].x < samples[b].x;
      return samples[a].y < samples[b].y;
    };
    const size_t k = std::min(static_cast<size_t>(cfg.top_k), samples.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(k),
                      order.end(), closer);
    order.resize(k);

    std::vector<double> ious(k);
    for (size_t c = 0; c < k; ++c) {
      const SamplePoint& s = samples[order[c]];
      const OrientedBox proxy =
          OrientedBox::make(s.x, s.y, s.stride, s.stride, 0.0);
      ious[c] = obb_iou(proxy, gt);
    }
    const auto [mu, sigma] = iou_stats(ious);
    const double thresh =
        cfg.use_fixed_threshold
            ? cfg.fixed_threshold
            : adaptive_threshold(mu, sigma, aspect_ratio(gt), cfg.w);

    for (size_t c = 0; c < k; ++c) {
      const size_t si = order[c];
      const SamplePoint& s = samples[si];
      if (ious[c] < thresh) continue;
      if (!point_in_obb({s.x, s.y}, gt)) continue;
      const double q = quality(shape_distance(s, gt, cfg));

      const int prev = result.gt_index[si];
      if (prev >= 0) {
        const double prev_q = result.quality[si];
        const double prev_area = gt_boxes[static_cast<size_t>(prev)].area();
        const bool take = q > prev_q ||
                          (q == prev_q && gt.area() < prev_area) ||
                          (q == prev_q && gt.area() == prev_area &&
                           static_cast<int>(gi) < prev);
        if (!take) continue;
      }
      result.gt_index[si] = static_cast<int>(gi);
      result.quality[si] = q;
    }
  }
  return result;
}

}  // namespace p2det

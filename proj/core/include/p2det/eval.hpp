#pragma once

#include <vector>

#include "p2det/geometry.hpp"

namespace p2det {

struct Detection {
  OrientedBox box;  // min-area rectangle of the predicted quad
  Quad quad;        // raw predicted corners
  double score = 0.0;
  int class_id = 0;
};

/// Greedy matching of one image's detections against its boxes.
struct MatchResult {
  std::vector<size_t> det_order;  // detection indices, score descending
  std::vector<int> det_match;     // per ordered det: gt index or -1
  std::vector<bool> gt_matched;
};

/// Score-descending greedy: each detection takes the highest-IoU unmatched
/// gt with IoU >= thresh (ties: lower gt index). Score ties keep input order.
MatchResult match(const std::vector<Detection>& dets,
                  const std::vector<OrientedBox>& gts, double iou_thresh);

struct EvalInstance {
  std::vector<Detection> dets;
  std::vector<OrientedBox> gts;
};

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
  double score = 0.0;
};

struct EvalResult {
  double ap = 0.0;
  double ar = 0.0;
  std::vector<PrPoint> curve;  // raw (unenveloped) PR points, score desc
};

/// All-point interpolated AP plus recall at <= max_dets detections per
/// image. Throws when the dataset has no ground-truth boxes at all.
EvalResult evaluate(const std::vector<EvalInstance>& images, double iou_thresh,
                    int max_dets = 100);

}  // namespace p2det

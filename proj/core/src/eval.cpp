#include "p2det/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace p2det {

MatchResult match(const std::vector<Detection>& dets,
                  const std::vector<OrientedBox>& gts, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh <= 1.0)) {
    throw std::invalid_argument("iou threshold must be in (0, 1]");
  }
  for (const Detection& d : dets) {
    if (!std::isfinite(d.score)) throw std::invalid_argument("non-finite detection score");
  }

  MatchResult r;
  r.det_order.resize(dets.size());
  std::iota(r.det_order.begin(), r.det_order.end(), size_t{0});
  std::stable_sort(r.det_order.begin(), r.det_order.end(),
                   [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });

  r.det_match.assign(dets.size(), -1);
  r.gt_matched.assign(gts.size(), false);
  for (size_t oi = 0; oi < r.det_order.size(); ++oi) {
    const Detection& d = dets[r.det_order[oi]];
    int best = -1;
    double best_iou = 0.0;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (r.gt_matched[gi]) continue;
      const double iou = obb_iou(d.box, gts[gi]);
      if (iou >= iou_thresh && iou > best_iou) {
        best = static_cast<int>(gi);
        best_iou = iou;
      }
    }
    if (best >= 0) {
      r.det_match[oi] = best;
      r.gt_matched[static_cast<size_t>(best)] = true;
    }
  }
  return r;
}

EvalResult evaluate(const std::vector<EvalInstance>& images, double iou_thresh,
                    int max_dets) {
  if (max_dets < 1) throw std::invalid_argument("max_dets must be >= 1");
  size_t total_gts = 0;
  for (const EvalInstance& im : images) total_gts += im.gts.size();
  if (total_gts == 0) throw std::invalid_argument("evaluation needs ground truth boxes");

  // Per image: cap to the top max_dets, match greedily, collect (score, tp).
  struct Scored {
    double score;
    bool tp;
  };
  std::vector<Scored> scored;
  size_t matched_gts = 0;
  for (const EvalInstance& im : images) {
    std::vector<Detection> dets = im.dets;
    if (static_cast<int>(dets.size()) > max_dets) {
      std::stable_sort(dets.begin(), dets.end(),
                       [](const Detection& a, const Detection& b) {
                         return a.score > b.score;
                       });
      dets.resize(static_cast<size_t>(max_dets));
    }
    const MatchResult mr = match(dets, im.gts, iou_thresh);
    for (size_t oi = 0; oi < mr.det_order.size(); ++oi) {
      scored.push_back({dets[mr.det_order[oi]].score, mr.det_match[oi] >= 0});
      if (mr.det_match[oi] >= 0) ++matched_gts;
    }
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const Scored& a, const Scored& b) { return a.score > b.score; });

  EvalResult out;
  out.ar = static_cast<double>(matched_gts) / static_cast<double>(total_gts);
  if (scored.empty()) return out;

  out.curve.reserve(scored.size());
  size_t tp = 0;
  for (size_t i = 0; i < scored.size(); ++i) {
    if (scored[i].tp) ++tp;
    PrPoint p;
    p.recall = static_cast<double>(tp) / static_cast<double>(total_gts);
    p.precision = static_cast<double>(tp) / static_cast<double>(i + 1);
    p.score = scored[i].score;
    out.curve.push_back(p);
  }

  // All-point interpolation: integrate the running-max precision envelope
  // over recall.
  std::vector<double> envelope(out.curve.size());
  double run = 0.0;
  for (size_t i = out.curve.size(); i-- > 0;) {
    run = std::max(run, out.curve[i].precision);
    envelope[i] = run;
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (size_t i = 0; i < out.curve.size(); ++i) {
    ap += (out.curve[i].recall - prev_recall) * envelope[i];
    prev_recall = out.curve[i].recall;
  }
  out.ap = ap;
  return out;
}

}  // namespace p2det

#include "p2det/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace p2det {

namespace {

constexpr double kProbFloor = 1e-7;

// Corner matching candidates: 4 cyclic starts x 2 windings of the gt
// rectangle. Returns gt corner index for pred corner i.
int perm_index(int ordering, int i) {
  const int start = ordering % 4;
  const bool reversed = ordering >= 4;
  return reversed ? ((start - i) % 4 + 4) % 4 : (start + i) % 4;
}

template <class T>
T bc_loss_impl(const std::array<geom::GPoint<T>, 4>& pred, const OrientedBox& gt) {
  const Quad gtq = obb_to_corners(gt);
  const double diag = gt.diagonal();

  T cx = (pred[0].x + pred[1].x + pred[2].x + pred[3].x) / 4.0;
  T cy = (pred[0].y + pred[1].y + pred[2].y + pred[3].y) / 4.0;
  T center = (ad_abs(cx - gt.cx) + ad_abs(cy - gt.cy)) / diag;

  // Pick the matching by current values, then build the expression for the
  // winner only (keeps the tape small; gradient follows the active branch).
  int best = 0;
  double best_cost = std::numeric_limits<double>::infinity();
  for (int o = 0; o < 8; ++o) {
    double cost = 0.0;
    for (int i = 0; i < 4; ++i) {
      const Vec2& gc = gtq.corners[static_cast<size_t>(perm_index(o, i))];
      cost += std::abs(value_of(pred[static_cast<size_t>(i)].x) - gc.x) +
              std::abs(value_of(pred[static_cast<size_t>(i)].y) - gc.y);
    }
    if (cost < best_cost) {
      best_cost = cost;
      best = o;
    }
  }

  const Vec2& g0 = gtq.corners[static_cast<size_t>(perm_index(best, 0))];
  T corners = ad_abs(pred[0].x - g0.x) + ad_abs(pred[0].y - g0.y);
  for (int i = 1; i < 4; ++i) {
    const Vec2& gc = gtq.corners[static_cast<size_t>(perm_index(best, i))];
    corners = corners + ad_abs(pred[static_cast<size_t>(i)].x - gc.x) +
              ad_abs(pred[static_cast<size_t>(i)].y - gc.y);
  }
  return center + corners / (4.0 * diag);
}

template <class T, class MakeConst>
T reg_loss_impl(const std::array<geom::GPoint<T>, 4>& pred, const OrientedBox& gt,
                MakeConst make_const) {
  const Quad gtq = obb_to_corners(gt);
  std::vector<geom::GPoint<T>> a(pred.begin(), pred.end());
  std::vector<geom::GPoint<T>> b;
  b.reserve(4);
  for (const Vec2& c : gtq.corners) b.push_back({make_const(c.x), make_const(c.y)});
  return 1.0 - geom::generalized_iou<T>(a, b, make_const(0.0));
}

template <class Term, class T>
T head_loss_impl(const std::vector<Term>& terms, int num_gts, bool include_bc,
                 bool bc_inside, T zero) {
  if (num_gts < 0) throw std::invalid_argument("negative box count");
  T total = zero;
  int active = 0;
  for (int gi = 0; gi < num_gts; ++gi) {
    T num = zero;
    T bc_sum = zero;
    T den = zero;
    int count = 0;
    for (const Term& t : terms) {
      if (t.gt != gi) continue;
      if (!(value_of(t.q) > 0.0)) {
        throw std::invalid_argument("positive sample with q <= 0");
      }
      T per = t.reg;
      if (include_bc && bc_inside) per = per + t.bc;
      num = num + t.q * per;
      if (include_bc && !bc_inside) bc_sum = bc_sum + t.bc;
      den = den + t.q;
      ++count;
    }
    if (count == 0) continue;
    T contrib = num / den;
    if (include_bc && !bc_inside) contrib = contrib + bc_sum / double(count);
    total = total + contrib;
    ++active;
  }
  return active > 0 ? total / double(active) : zero;
}

std::array<geom::GPoint<double>, 4> as_gpoints(const Quad& q) {
  std::array<geom::GPoint<double>, 4> out;
  for (int i = 0; i < 4; ++i) out[static_cast<size_t>(i)] = {q.corners[static_cast<size_t>(i)].x, q.corners[static_cast<size_t>(i)].y};
  return out;
}

}  // namespace

double focal_loss(double p, int y, double gamma, double alpha_bal) {
  if (y != 0 && y != 1) throw std::invalid_argument("focal label must be 0 or 1");
  p = std::clamp(p, kProbFloor, 1.0 - kProbFloor);
  const double pt = y == 1 ? p : 1.0 - p;
  const double at = y == 1 ? alpha_bal : 1.0 - alpha_bal;
  return -at * std::pow(1.0 - pt, gamma) * std::log(pt);
}

double reg_loss(const Quad& pred, const OrientedBox& gt) {
  return reg_loss_impl<double>(as_gpoints(pred), gt, [](double v) { return v; });
}

double bc_loss(const Quad& pred, const OrientedBox& gt) {
  return bc_loss_impl<double>(as_gpoints(pred), gt);
}

double head_loss_d1(const std::vector<HeadTerm>& terms, int num_gts,
                    bool bc_inside_weighting) {
  return head_loss_impl(terms, num_gts, /*include_bc=*/true, bc_inside_weighting, 0.0);
}

double head_loss_d2(const std::vector<HeadTerm>& terms, int num_gts) {
  return head_loss_impl(terms, num_gts, /*include_bc=*/false, true, 0.0);
}

LossBreakdown total_loss(double l_cls, double l_d1, double l_d2,
                         const LossWeights& w) {
  LossBreakdown out;
  out.l_cls = l_cls;
  out.l_d1 = l_d1;
  out.l_d2 = l_d2;
  out.total = w.lambda_cls * l_cls + w.lambda_d1 * l_d1 + w.lambda_d2 * l_d2;
  return out;
}

Tensor focal_loss_map(Graph& g, const Tensor& logits,
                      const std::vector<int>& labels, double gamma,
                      double alpha_bal, double normalizer) {
  if (static_cast<size_t>(logits.size()) != labels.size()) {
    throw std::invalid_argument("focal_loss_map label count mismatch");
  }
  if (!(normalizer > 0.0)) throw std::invalid_argument("normalizer must be > 0");

  std::vector<double> pos(labels.size()), neg(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw std::invalid_argument("focal label must be 0 or 1");
    }
    pos[i] = labels[i] == 1 ? 1.0 : 0.0;
    neg[i] = 1.0 - pos[i];
  }
  const std::vector<int> shape = logits.shape();
  Tensor pos_mask = Tensor::from_data(shape, std::move(pos));
  Tensor neg_mask = Tensor::from_data(shape, std::move(neg));

  Tensor p = g.clamp(g.sigmoid(logits), kProbFloor, 1.0 - kProbFloor);
  Tensor one_minus = g.add_const(g.neg(p), 1.0);
  Tensor pos_term = g.mul(g.pow(one_minus, gamma), g.log(p));       // ln p weighted
  Tensor neg_term = g.mul(g.pow(p, gamma), g.log(one_minus));       // ln (1-p)
  Tensor weighted = g.add(g.scale(g.mul(pos_mask, pos_term), -alpha_bal),
                          g.scale(g.mul(neg_mask, neg_term), -(1.0 - alpha_bal)));
  return g.scale(g.sum(weighted), 1.0 / normalizer);
}

TapeScalar reg_loss_t(Graph& g, const TapeQuad& pred, const OrientedBox& gt) {
  return reg_loss_impl<TapeScalar>(
      pred, gt, [&g](double v) { return TapeScalar{g, v}; });
}

TapeScalar bc_loss_t(Graph& g, const TapeQuad& pred, const OrientedBox& gt) {
  (void)g;
  return bc_loss_impl<TapeScalar>(pred, gt);
}

TapeScalar head_loss_d1_t(Graph& g, const std::vector<HeadTermT>& terms,
                          int num_gts, bool bc_inside_weighting) {
  return head_loss_impl(terms, num_gts, /*include_bc=*/true, bc_inside_weighting,
                        TapeScalar{g, 0.0});
}

TapeScalar head_loss_d2_t(Graph& g, const std::vector<HeadTermT>& terms,
                          int num_gts) {
  return head_loss_impl(terms, num_gts, /*include_bc=*/false, true,
                        TapeScalar{g, 0.0});
}

}  // namespace p2det

#include "p2det/losses.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "p2det/geometry.hpp"

using namespace p2det;

namespace {

Quad quad_of(const OrientedBox& b) { return obb_to_corners(b); }

Quad translated(const Quad& q, double dx, double dy) {
  std::array<Vec2, 4> pts = q.corners;
  for (Vec2& p : pts) {
    p.x += dx;
    p.y += dy;
  }
  return Quad::from_points(pts);
}

}  // namespace

TEST_CASE("focal loss vanishes for confident correct predictions") {
  CHECK(focal_loss(1.0 - 1e-9, 1, 2.0, 0.25) < 1e-6);
  CHECK(focal_loss(1e-9, 0, 2.0, 0.25) < 1e-6);
}

TEST_CASE("focal loss with gamma zero halves plain cross-entropy at alpha half") {
  for (double p : {0.1, 0.35, 0.8}) {
    const double ce = -std::log(p);
    CHECK(focal_loss(p, 1, 0.0, 0.5) == doctest::Approx(0.5 * ce).epsilon(1e-12));
  }
}

TEST_CASE("focal loss frozen reference value") {
  // 0.25 * (1-0.5)^2 * ln 2 at high precision.
  CHECK(focal_loss(0.5, 1, 2.0, 0.25) ==
        doctest::Approx(0.04332169878499658184).epsilon(1e-12));
}

TEST_CASE("reg loss zero on exact prediction") {
  const OrientedBox gt = OrientedBox::make(10, 8, 6, 3, 0.4);
  CHECK(reg_loss(quad_of(gt), gt) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("bc loss zero on exact prediction and 2.0 at one diagonal away") {
  const OrientedBox gt = OrientedBox::make(0, 0, 4, 2, 0.0);
  CHECK(bc_loss(quad_of(gt), gt) == doctest::Approx(0.0).epsilon(1e-12));
  const double diag = gt.diagonal();
  CHECK(bc_loss(translated(quad_of(gt), diag, 0.0), gt) ==
        doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("bc loss is invariant to the starting corner of the prediction") {
  const OrientedBox gt = OrientedBox::make(3, 5, 8, 3, 0.7);
  const Quad base = quad_of(gt);
  const Quad shifted = translated(base, 0.9, -0.4);
  const double want = bc_loss(shifted, gt);
  for (int start = 1; start < 4; ++start) {
    std::array<Vec2, 4> pts;
    for (int i = 0; i < 4; ++i) pts[static_cast<size_t>(i)] = shifted.corners[static_cast<size_t>((i + start) % 4)];
    CHECK(bc_loss(Quad::from_points(pts), gt) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("head loss d1: perfect positives give zero") {
  std::vector<HeadTerm> terms = {{0, 0.8, 0.0, 0.0}, {0, 0.4, 0.0, 0.0}};
  CHECK(head_loss_d1(terms, 1) == 0.0);
}

TEST_CASE("head loss d1: single positive weighting cancels") {
  std::vector<HeadTerm> terms = {{0, 0.5, 0.3, 0.2}};
  CHECK(head_loss_d1(terms, 1) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("head loss d1: two-positive weighted mean, frozen arithmetic") {
  // (1*0.2 + e^-1*0.6) / (1 + e^-1) evaluated in exact arithmetic. The
  // sub-loss 0.2 and 0.6 are split between reg and bc halves.
  std::vector<HeadTerm> terms = {{0, 1.0, 0.15, 0.05}, {0, std::exp(-1.0), 0.45, 0.15}};
  CHECK(head_loss_d1(terms, 1) ==
        doctest::Approx(0.30757656854799803).epsilon(1e-12));
}

TEST_CASE("head loss d2 uses the same weighted mean without bc") {
  std::vector<HeadTerm> terms = {{0, 1.0, 0.2, 9.9}, {0, std::exp(-1.0), 0.6, 9.9}};
  CHECK(head_loss_d2(terms, 1) ==
        doctest::Approx(0.30757656854799803).epsilon(1e-12));
}

TEST_CASE("head losses are invariant to scaling one box's qualities") {
  std::vector<HeadTerm> terms = {
      {0, 0.9, 0.3, 0.1}, {0, 0.45, 0.7, 0.2}, {1, 0.6, 0.25, 0.05}};
  const double base = head_loss_d1(terms, 2);
  for (double c : {0.03, 0.7, 5.0, 211.0}) {
    std::vector<HeadTerm> scaled = terms;
    for (HeadTerm& t : scaled)
      if (t.gt == 0) t.q *= c;
    CHECK(std::abs(head_loss_d1(scaled, 2) - base) < 1e-12);
  }
}

TEST_CASE("boxes without positives are skipped, not averaged as zeros") {
  std::vector<HeadTerm> terms = {{1, 0.5, 0.4, 0.0}};
  // GT 0 has no positives; the mean runs over boxes that have any.
  CHECK(head_loss_d1(terms, 2) == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("total loss composition") {
  LossWeights w;
  CHECK(total_loss(0.2, 0.3, 0.5, w).total == doctest::Approx(1.0).epsilon(1e-12));

  w.lambda_d1 = 0.0;
  w.lambda_d2 = 0.0;
  w.lambda_cls = 1.0;
  CHECK(total_loss(0.7, 0.3, 0.5, w).total == doctest::Approx(0.7).epsilon(1e-12));

  LossWeights dbl;
  dbl.lambda_cls = 2.0;
  dbl.lambda_d1 = 2.0;
  dbl.lambda_d2 = 2.0;
  CHECK(total_loss(0.2, 0.3, 0.5, dbl).total == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("tape variants agree with the scalar formulas") {
  const OrientedBox gt = OrientedBox::make(4, 6, 7, 3, 0.5);
  const Quad pred = translated(quad_of(gt), 0.6, -0.3);

  Graph g;
  TapeQuad tq;
  for (int i = 0; i < 4; ++i) {
    tq[static_cast<size_t>(i)].x = TapeScalar{g, pred.corners[static_cast<size_t>(i)].x};
    tq[static_cast<size_t>(i)].y = TapeScalar{g, pred.corners[static_cast<size_t>(i)].y};
  }
  CHECK(value_of(reg_loss_t(g, tq, gt)) ==
        doctest::Approx(reg_loss(pred, gt)).epsilon(1e-12));
  CHECK(value_of(bc_loss_t(g, tq, gt)) ==
        doctest::Approx(bc_loss(pred, gt)).epsilon(1e-12));
}

TEST_CASE("focal map matches per-cell focal sums") {
  Graph g;
  Tensor logits = Tensor::from_data({4}, {2.0, -1.0, 0.3, -0.7}, true);
  const std::vector<int> labels = {1, 0, 0, 1};
  const double norm = 2.0;
  Tensor loss = focal_loss_map(g, logits, labels, 2.0, 0.25, norm);
  double want = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits.at(i)));
    want += focal_loss(p, labels[static_cast<size_t>(i)], 2.0, 0.25);
  }
  want /= norm;
  CHECK(loss.value() == doctest::Approx(want).epsilon(1e-9));
}

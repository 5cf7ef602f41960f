#include <benchmark/benchmark.h>

#include <vector>

#include "p2det/assigner.hpp"
#include "p2det/geometry.hpp"
#include "p2det/rng.hpp"

namespace {

using namespace p2det;

std::vector<OrientedBox> random_boxes(int n, uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<OrientedBox> boxes;
  boxes.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    boxes.push_back(OrientedBox::make(rng.uniform(20.0, 44.0), rng.uniform(20.0, 44.0),
                                      rng.uniform(8.0, 24.0), rng.uniform(3.0, 8.0),
                                      rng.uniform(-1.5, 1.5)));
  }
  return boxes;
}

void BM_ObbIou(benchmark::State& state) {
  const auto boxes = random_boxes(64, 11);
  size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(obb_iou(boxes[i % 64], boxes[(i * 7 + 3) % 64]));
    ++i;
  }
}
BENCHMARK(BM_ObbIou);

void BM_CornersToObb(benchmark::State& state) {
  const auto boxes = random_boxes(64, 12);
  size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(corners_to_obb(obb_to_corners(boxes[i % 64])));
    ++i;
  }
}
BENCHMARK(BM_CornersToObb);

void BM_Giou(benchmark::State& state) {
  const auto boxes = random_boxes(64, 13);
  size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(giou(boxes[i % 64], boxes[(i * 5 + 1) % 64]));
    ++i;
  }
}
BENCHMARK(BM_Giou);

void BM_Assign(benchmark::State& state) {
  const auto samples = make_grid_samples(512, 8);
  auto gts = random_boxes(4, 14);
  for (auto& b : gts) b = OrientedBox::make(b.cx * 8, b.cy * 8, b.w * 4, b.h * 4, b.theta);
  const AssignerConfig cfg;
  for (auto _ : state) {
    benchmark::DoNotOptimize(assign(samples, gts, cfg));
  }
}
BENCHMARK(BM_Assign);

}  // namespace

#include <benchmark/benchmark.h>

#include "p2det/fusion.hpp"
#include "p2det/rng.hpp"
#include "p2det/tensor.hpp"

namespace {

using namespace p2det;

Tensor random_tensor(SplitMix64& rng, std::vector<int> shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> data(static_cast<size_t>(n));
  for (double& v : data) v = rng.uniform(-1.0, 1.0);
  return Tensor::from_data(std::move(shape), std::move(data));
}

void BM_AttentionFwdBwd(benchmark::State& state) {
  FusionConfig cfg;
  SplitMix64 rng(21);
  const FusionParams params = make_fusion_params(cfg, rng);
  Tensor q = random_tensor(rng, {8, cfg.dim});
  Tensor kv = random_tensor(rng, {64, cfg.dim});
  q.set_requires_grad(true);
  for (auto _ : state) {
    Graph g;
    Tensor out = attention(g, q, kv, kv, params.blocks[0].t2i, cfg.heads);
    g.backward(g.sum(out));
    q.zero_grad();
    benchmark::DoNotOptimize(out);
  }
}
BENCHMARK(BM_AttentionFwdBwd);

void BM_Conv2dFwd(benchmark::State& state) {
  SplitMix64 rng(22);
  Tensor x = random_tensor(rng, {32, 64, 64});
  Tensor w = random_tensor(rng, {32, 32, 3, 3});
  Tensor b = random_tensor(rng, {32});
  for (auto _ : state) {
    Graph g;
    benchmark::DoNotOptimize(g.conv2d(x, w, b, 2, 1));
  }
}
BENCHMARK(BM_Conv2dFwd);

void BM_MatmulFwd(benchmark::State& state) {
  SplitMix64 rng(23);
  Tensor a = random_tensor(rng, {64, 64});
  Tensor b = random_tensor(rng, {64, 64});
  for (auto _ : state) {
    Graph g;
    benchmark::DoNotOptimize(g.matmul(a, b));
  }
}
BENCHMARK(BM_MatmulFwd);

}  // namespace

BENCHMARK_MAIN();

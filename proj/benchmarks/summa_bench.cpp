// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "tp2d/dense.hpp"
#include "tp2d/summa.hpp"

namespace tp2d {
namespace {

void BM_DenseMatmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Matrix a = random_uniform(n, n, rng);
  const Matrix b = random_uniform(n, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_DenseMatmul)->Arg(64)->Arg(128)->Arg(256);

// args: mesh side, global square size
template <typename Product>
void run_product(benchmark::State& state, Product product) {
  const int q = static_cast<int>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  Mesh mesh(MeshConfig{.q = q});
  Workspace ws(mesh.p());
  Rng rng(2);
  const ShardedMatrix a = scatter(random_uniform(n, n, rng), mesh);
  const ShardedMatrix b = scatter(random_uniform(n, n, rng), mesh);
  for (auto _ : state) benchmark::DoNotOptimize(product(mesh, a, b, ws));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

void BM_SummaAB(benchmark::State& state) { run_product(state, summa_ab); }
void BM_SummaABt(benchmark::State& state) { run_product(state, summa_abt); }
void BM_SummaAtB(benchmark::State& state) { run_product(state, summa_atb); }

BENCHMARK(BM_SummaAB)->Args({1, 192})->Args({2, 192})->Args({4, 192});
BENCHMARK(BM_SummaABt)->Args({2, 192})->Args({4, 192});
BENCHMARK(BM_SummaAtB)->Args({2, 192})->Args({4, 192});

}  // namespace
}  // namespace tp2d

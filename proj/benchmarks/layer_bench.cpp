// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "tp2d/layers.hpp"
#include "tp2d/params.hpp"

namespace tp2d {
namespace {

ModelConfig bench_config() {
  ModelConfig cfg;
  cfg.b = 4;
  cfg.s = 32;
  cfg.h = 96;
  cfg.n = 8;
  cfg.v = 64;
  cfg.layers = 1;
  return cfg;
}

// arg: mesh side; second arg 1 selects threaded execution
void BM_LayerForward(benchmark::State& state) {
  const ModelConfig cfg = bench_config();
  Mesh mesh(MeshConfig{.q = static_cast<int>(state.range(0)),
                       .mode = state.range(1) != 0 ? ExecutionMode::Threaded : ExecutionMode::Lockstep});
  Workspace ws(mesh.p());
  const ShardedLayer layer = distribute(ModelWeights::init(cfg, 3).layers[0], mesh);
  Rng rng(4);
  const ShardedMatrix x = scatter(random_uniform(cfg.tokens(), cfg.h, rng), mesh);
  for (auto _ : state) benchmark::DoNotOptimize(transformer_layer_forward(mesh, x, layer, cfg, ws));
}

void BM_LayerForwardBackward(benchmark::State& state) {
  const ModelConfig cfg = bench_config();
  Mesh mesh(MeshConfig{.q = static_cast<int>(state.range(0)),
                       .mode = state.range(1) != 0 ? ExecutionMode::Threaded : ExecutionMode::Lockstep});
  Workspace ws(mesh.p());
  const ShardedLayer layer = distribute(ModelWeights::init(cfg, 3).layers[0], mesh);
  Rng rng(4);
  const ShardedMatrix x = scatter(random_uniform(cfg.tokens(), cfg.h, rng), mesh);
  const ShardedMatrix up = scatter(random_uniform(cfg.tokens(), cfg.h, rng), mesh);
  for (auto _ : state) {
    auto [y, ctx] = transformer_layer_forward(mesh, x, layer, cfg, ws);
    benchmark::DoNotOptimize(y);
    benchmark::DoNotOptimize(transformer_layer_backward(mesh, up, ctx, layer, ws));
  }
}

BENCHMARK(BM_LayerForward)->Args({1, 0})->Args({2, 0})->Args({2, 1})->Args({4, 0})->Args({4, 1});
BENCHMARK(BM_LayerForwardBackward)->Args({1, 0})->Args({2, 0})->Args({2, 1})->Args({4, 0});

}  // namespace
}  // namespace tp2d

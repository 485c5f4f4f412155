// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tp2d/baseline.hpp"
#include "tp2d/error.hpp"
#include "tp2d/layers.hpp"
#include "tp2d/serial.hpp"

namespace tp2d {
namespace {

using testing::mesh_config;
using testing::random_matrix;

ModelConfig baseline_config() {
  ModelConfig cfg;
  cfg.b = 2;
  cfg.s = 8;
  cfg.h = 16;
  cfg.n = 4;
  cfg.v = 32;
  cfg.layers = 1;
  return cfg;
}

TEST(Baseline1d, DistributeCollectRoundTrip) {
  const ModelConfig cfg = baseline_config();
  const LayerWeights w = ModelWeights::init(cfg, 1).layers[0];
  const LayerWeights back = collect_baseline(distribute_baseline(w, 4, cfg), cfg);
  LayerWeights::for_each(back, [&](const char* name, const Matrix& m) {
    LayerWeights::for_each(w, [&](const char* n2, const Matrix& m2) {
      if (std::string_view(name) == n2) EXPECT_EQ(m, m2) << name;
    });
  });
}

TEST(Baseline1d, SingleDeviceIsSerialWithoutTraffic) {
  const ModelConfig cfg = baseline_config();
  const LayerWeights w = ModelWeights::init(cfg, 2).layers[0];
  const Matrix x = random_matrix(cfg.tokens(), cfg.h, 3);
  Mesh mesh(mesh_config(1));
  auto [y, ctx] = baseline_1d_layer_forward(mesh, x, distribute_baseline(w, 1, cfg), cfg);
  EXPECT_LE(max_abs_diff(y, serial_layer_forward(x, w, cfg)), 1e-14);
  EXPECT_EQ(mesh.ledger_report().total().modeled.total(), 0.0);
}

TEST(Baseline1d, ForwardAllReduceCost) {
  const ModelConfig cfg = baseline_config();
  const LayerWeights w = ModelWeights::init(cfg, 2).layers[0];
  Mesh mesh(mesh_config(2));
  baseline_1d_layer_forward(mesh, random_matrix(cfg.tokens(), cfg.h, 3), distribute_baseline(w, 4, cfg), cfg);
  for (const auto& d : mesh.ledger_report().devices) {
    EXPECT_EQ(d.modeled.allreduce_cost, 768.0);
    EXPECT_EQ(d.modeled.broadcast_cost, 0.0);
    EXPECT_EQ(d.auxiliary.total(), 0.0);
  }
}

TEST(Baseline1d, ForwardMatchesSerialAndTwoDimensionalLayer) {
  const ModelConfig cfg = baseline_config();
  const LayerWeights w = ModelWeights::init(cfg, 29).layers[0];
  const Matrix x = random_matrix(cfg.tokens(), cfg.h, 29);
  Mesh mesh(mesh_config(2));
  auto [y, ctx] = baseline_1d_layer_forward(mesh, x, distribute_baseline(w, 4, cfg), cfg);
  EXPECT_LE(max_abs_diff(y, serial_layer_forward(x, w, cfg)), 1e-10);

  Mesh mesh2d(mesh_config(2));
  Workspace ws(4);
  auto [y2, ctx2] = transformer_layer_forward(mesh2d, scatter(x, mesh2d), distribute(w, mesh2d), cfg, ws);
  EXPECT_LE(max_abs_diff(y, gather(y2)), 1e-9);
}

TEST(Baseline1d, BackwardMatchesSerial) {
  const ModelConfig cfg = baseline_config();
  const LayerWeights w = ModelWeights::init(cfg, 29).layers[0];
  const Matrix x = random_matrix(cfg.tokens(), cfg.h, 30);
  const Matrix up = random_matrix(cfg.tokens(), cfg.h, 31);
  SerialLayerCache cache;
  serial_layer_forward(x, w, cfg, &cache);
  const SerialLayerGrads want = serial_layer_backward(up, cache, w);

  Mesh mesh(mesh_config(2));
  const BaselineLayer layer = distribute_baseline(w, 4, cfg);
  auto [y, ctx] = baseline_1d_layer_forward(mesh, x, layer, cfg);
  mesh.reset_ledger();
  const BaselineGrads g = baseline_1d_layer_backward(mesh, up, ctx, layer, cfg);
  EXPECT_LE(max_abs_diff(g.x_grad, want.x_grad), 1e-10);
  const LayerWeights got = collect_baseline(g.params, cfg);
  LayerWeights::for_each(got, [&](const char* name, const Matrix& m) {
    LayerWeights::for_each(want.params, [&](const char* n2, const Matrix& m2) {
      if (std::string_view(name) == n2) EXPECT_LE(max_abs_diff(m, m2), 1e-10) << name;
    });
  });
  // Without a forward replay, backward repeats the forward traffic.
  EXPECT_EQ(mesh.ledger_report().at(0, 0).modeled.allreduce_cost, 768.0);
}

TEST(Baseline1d, MacsEqualTheTwoDimensionalLayer) {
  const ModelConfig cfg = baseline_config();
  const LayerWeights w = ModelWeights::init(cfg, 29).layers[0];
  Mesh mesh(mesh_config(2));
  baseline_1d_layer_forward(mesh, random_matrix(cfg.tokens(), cfg.h, 1), distribute_baseline(w, 4, cfg), cfg);
  const std::uint64_t b = cfg.b, s = cfg.s, h = cfg.h;
  EXPECT_EQ(mesh.ledger_report().at(1, 1).macs, (12 * b * s * h * h + 2 * b * s * s * h) / 4);
}

TEST(Baseline1d, RejectsIndivisibleHeads) {
  ModelConfig cfg = baseline_config();
  cfg.n = 2;
  EXPECT_THROW(distribute_baseline(LayerWeights::zeros(cfg.h), 4, cfg), ConfigError);
}

TEST(Baseline1d, StaleContextThrows) {
  const ModelConfig cfg = baseline_config();
  const BaselineLayer layer = distribute_baseline(ModelWeights::init(cfg, 1).layers[0], 4, cfg);
  Mesh a(mesh_config(2));
  Mesh b(mesh_config(2));
  auto [y, ctx] = baseline_1d_layer_forward(a, Matrix(cfg.tokens(), cfg.h), layer, cfg);
  EXPECT_THROW(baseline_1d_layer_backward(b, y, ctx, layer, cfg), StaleContextError);
}

}  // namespace
}  // namespace tp2d

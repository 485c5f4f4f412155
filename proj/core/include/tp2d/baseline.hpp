// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0
//
// 1D (Megatron-style) tensor-parallel transformer layer on the same simulated
// mesh, used as the comparison baseline. Activations are replicated on all
// p = q*q devices; device r (row-major rank) holds
//
//   w_qkv  [Wq_r | Wk_r | Wv_r], columns r*h/p.. of each third  (h x 3h/p)
//   w_dense rows r*h/p..                                        (h/p x h)
//   w_fc1  columns r*4h/p..                                     (h x 4h/p)
//   w_fc2  rows r*4h/p..                                        (4h/p x h)
//
// plus the matching b_qkv / b_fc1 slices. Layer-norm parameters and the two
// output biases are replicated. Each sub-layer ends in one world all-reduce
// of b*s*h scalars, charged as CostClass::Modeled.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "tp2d/dense.hpp"
#include "tp2d/mesh.hpp"
#include "tp2d/model_config.hpp"
#include "tp2d/params.hpp"
#include "tp2d/serial.hpp"

namespace tp2d {

class MemoryTracker;

struct BaselineShard {
  Matrix w_qkv;
  Matrix b_qkv;
  Matrix w_dense;
  Matrix w_fc1;
  Matrix b_fc1;
  Matrix w_fc2;
};

struct BaselineLayer {
  std::vector<BaselineShard> shards;  // one per device, rank order
  Matrix ln1_gamma;
  Matrix ln1_beta;
  Matrix b_dense;
  Matrix ln2_gamma;
  Matrix ln2_beta;
  Matrix b_fc2;
};

BaselineLayer distribute_baseline(const LayerWeights& w, int p, const ModelConfig& cfg);
LayerWeights collect_baseline(const BaselineLayer& layer, const ModelConfig& cfg);

struct BaselineContext {
  SerialLayerNormCache ln1;
  SerialLayerNormCache ln2;
  Matrix attn_in;
  Matrix mlp_in;
  std::vector<Matrix> qkv;      // per device, bs x 3h/p
  std::vector<Matrix> context;  // per device, bs x h/p
  std::vector<std::vector<Matrix>> probs;
  std::vector<Matrix> pre_act;  // per device, bs x 4h/p
  std::vector<Matrix> act;
  std::uint64_t mesh_id = 0;
};

std::pair<Matrix, BaselineContext> baseline_1d_layer_forward(Mesh& mesh, const Matrix& x,
                                                             const BaselineLayer& layer,
                                                             const ModelConfig& cfg);

struct BaselineGrads {
  Matrix x_grad;
  BaselineLayer params;
};
BaselineGrads baseline_1d_layer_backward(Mesh& mesh, const Matrix& y_grad,
                                         const BaselineContext& ctx, const BaselineLayer& layer,
                                         const ModelConfig& cfg);

/// Forward over a stack keeping each layer input, charging the replicated
/// checkpoints and forward outputs to the tracker.
Matrix baseline_checkpointed_forward(Mesh& mesh, std::span<const BaselineLayer> layers,
                                     const Matrix& x, const ModelConfig& cfg,
                                     MemoryTracker* tracker);

}  // namespace tp2d

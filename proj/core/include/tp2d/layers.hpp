// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Transformer building blocks in the 2D layout. Hidden activations are
// ShardedMatrix [b*s, h] with rows ordered (sequence, position): device row i
// holds whole sequences [i*b/q, (i+1)*b/q) and device column j holds hidden
// columns [j*h/q, (j+1)*h/q). Vectors (biases, layer-norm parameters) live on
// row 0 and are broadcast down columns when used; their gradients are reduced
// back to row 0.
//
// Collectives issued for biases, layer norm and the loss are charged as
// CostClass::Auxiliary; SUMMA products and the embedding lookup are Modeled.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "tp2d/batch.hpp"
#include "tp2d/dense.hpp"
#include "tp2d/mesh.hpp"
#include "tp2d/model_config.hpp"
#include "tp2d/params.hpp"
#include "tp2d/summa.hpp"

namespace tp2d {

// --- bias --------------------------------------------------------------------

ShardedMatrix bias_add_forward(Mesh& mesh, const ShardedMatrix& x, const HostedVector& bias);

struct BiasGrads {
  ShardedMatrix x_grad;
  HostedVector bias_grad;
};
BiasGrads bias_add_backward(Mesh& mesh, const ShardedMatrix& out_grad);
/// The bias part of bias_add_backward alone (x_grad is out_grad).
HostedVector bias_grad(Mesh& mesh, const ShardedMatrix& out_grad);

// --- layer norm --------------------------------------------------------------

struct LayerNormContext {
  ShardedMatrix x_hat;
  std::vector<Matrix> mean;   // per device, (rows x 1)
  std::vector<Matrix> rstd;   // per device, (rows x 1)
  std::vector<Matrix> gamma;  // per device, broadcast copy of its gamma shard
  std::size_t hidden = 0;
  std::uint64_t mesh_id = 0;

  bool empty() const { return x_hat.empty(); }
};

std::pair<ShardedMatrix, LayerNormContext> layernorm_forward(Mesh& mesh, const ShardedMatrix& x,
                                                             const HostedVector& gamma,
                                                             const HostedVector& beta, double eps);

struct LayerNormGrads {
  ShardedMatrix x_grad;
  HostedVector gamma_grad;
  HostedVector beta_grad;
};
LayerNormGrads layernorm_backward(Mesh& mesh, const ShardedMatrix& out_grad,
                                  const LayerNormContext& ctx);

// --- attention ---------------------------------------------------------------

struct AttentionContext {
  ShardedMatrix input;    // [bs, h]
  ShardedMatrix qkv;      // [bs, 3h], mesh column order, bias included
  ShardedMatrix context;  // [bs, h], input of the dense product
  /// Per device: (b/q) * (n/q) probability matrices of shape s x s, ordered
  /// sequence-major then head.
  std::vector<std::vector<Matrix>> probs;
  std::size_t seq = 0;
  std::size_t heads = 0;
  std::uint64_t mesh_id = 0;

  bool empty() const { return qkv.empty(); }
};

std::pair<ShardedMatrix, AttentionContext> attention_forward(
    Mesh& mesh, const ShardedMatrix& x, const ShardedMatrix& w_qkv, const HostedVector& b_qkv,
    const ShardedMatrix& w_dense, const HostedVector& b_dense, const ModelConfig& cfg,
    Workspace& ws);

struct AttentionGrads {
  ShardedMatrix x_grad;
  ShardedMatrix w_qkv_grad;
  HostedVector b_qkv_grad;
  ShardedMatrix w_dense_grad;
  HostedVector b_dense_grad;
};
AttentionGrads attention_backward(Mesh& mesh, const ShardedMatrix& out_grad,
                                  const AttentionContext& ctx, const ShardedMatrix& w_qkv,
                                  const ShardedMatrix& w_dense, Workspace& ws);

// --- MLP ---------------------------------------------------------------------

struct MlpContext {
  ShardedMatrix input;    // [bs, h]
  ShardedMatrix pre_act;  // [bs, 4h], first product plus bias
  ShardedMatrix act;      // GELU(pre_act)
  std::uint64_t mesh_id = 0;

  bool empty() const { return pre_act.empty(); }
};

/// With compute_output == false the second product is skipped and the
/// returned output is empty; the context is still complete for backward.
std::pair<ShardedMatrix, MlpContext> mlp_forward(Mesh& mesh, const ShardedMatrix& x,
                                                 const ShardedMatrix& w1, const HostedVector& b1,
                                                 const ShardedMatrix& w2, const HostedVector& b2,
                                                 Workspace& ws, bool compute_output = true);

struct MlpGrads {
  ShardedMatrix x_grad;
  ShardedMatrix w1_grad;
  HostedVector b1_grad;
  ShardedMatrix w2_grad;
  HostedVector b2_grad;
};
MlpGrads mlp_backward(Mesh& mesh, const ShardedMatrix& out_grad, const MlpContext& ctx,
                      const ShardedMatrix& w1, const ShardedMatrix& w2, Workspace& ws);

// --- transformer layer -------------------------------------------------------

struct LayerContext {
  LayerNormContext ln1;
  AttentionContext attn;
  LayerNormContext ln2;
  MlpContext mlp;

  bool empty() const { return mlp.empty(); }
};

struct LayerForwardOptions {
  /// Skip the MLP output product; backward never reads it. The returned
  /// output is then empty.
  bool skip_output_product = false;
};

/// y1 = x + Attn(LN1(x)); y = y1 + MLP(LN2(y1)).
std::pair<ShardedMatrix, LayerContext> transformer_layer_forward(Mesh& mesh, const ShardedMatrix& x,
                                                                 const ShardedLayer& params,
                                                                 const ModelConfig& cfg,
                                                                 Workspace& ws,
                                                                 LayerForwardOptions opts = {});

struct LayerGrads {
  ShardedMatrix x_grad;
  ShardedLayer params;
};
LayerGrads transformer_layer_backward(Mesh& mesh, const ShardedMatrix& y_grad,
                                      const LayerContext& ctx, const ShardedLayer& params,
                                      Workspace& ws);

// --- embedding, lm-head, losses ----------------------------------------------

/// table is [padded_vocab, h]. Ids must lie in [0, vocab).
ShardedMatrix embedding_forward(Mesh& mesh, std::span<const TokenGrid> row_tokens,
                                const ShardedMatrix& table, std::size_t vocab, Workspace& ws);
ShardedMatrix embedding_backward(Mesh& mesh, const ShardedMatrix& out_grad,
                                 std::span<const TokenGrid> row_tokens,
                                 const ShardedMatrix& table);

/// logits = x * table^T, [b*s, padded_vocab].
ShardedMatrix lm_head_logits(Mesh& mesh, const ShardedMatrix& x, const ShardedMatrix& table,
                             Workspace& ws);

struct CrossEntropyContext {
  std::vector<Matrix> probs;  // per device, softmax over the local vocab columns
  std::vector<TokenGrid> labels;
  std::vector<double> token_loss;  // per token, global (sequence, position) order
  std::size_t tokens = 0;
  std::size_t logit_rows = 0;
  std::size_t logit_cols = 0;
  std::uint64_t mesh_id = 0;

  bool empty() const { return probs.empty(); }
};

/// Mean token cross entropy. Logit columns >= vocab are padding and masked out.
std::pair<double, CrossEntropyContext> cross_entropy_forward(Mesh& mesh,
                                                             const ShardedMatrix& logits,
                                                             std::span<const TokenGrid> labels,
                                                             std::size_t vocab);
ShardedMatrix cross_entropy_backward(Mesh& mesh, const CrossEntropyContext& ctx,
                                     double upstream);

struct ClassifierContext {
  std::vector<Matrix> selected;  // per device, (b/q) x (h/q) rows at the selected position
  std::vector<Matrix> weight;    // per device, broadcast copy of the weight shard
  std::vector<Matrix> logits;    // per device row, (b/q) x 1
  std::vector<std::vector<int>> labels;  // per device row
  std::size_t position = 0;
  std::size_t seq = 0;
  std::size_t batch = 0;
  std::size_t hidden = 0;
  std::uint64_t mesh_id = 0;

  bool empty() const { return selected.empty(); }
};

/// Binary classification on the hidden state at one position of each
/// sequence: logit = x[pos] . w, loss = mean BCE-with-logits over the batch.
std::pair<double, ClassifierContext> classifier_forward(Mesh& mesh, const ShardedMatrix& x,
                                                        const HostedVector& weight,
                                                        std::span<const int> labels,
                                                        std::size_t position, std::size_t seq);

struct ClassifierGrads {
  ShardedMatrix x_grad;
  HostedVector weight_grad;
};
ClassifierGrads classifier_backward(Mesh& mesh, const ClassifierContext& ctx,
                                    double upstream);

}  // namespace tp2d

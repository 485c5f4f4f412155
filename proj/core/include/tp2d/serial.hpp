// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Single-context reference transformer with an explicit backward pass. It
// works on gathered global tensors in the canonical layout and shares only
// the dense kernels with the mesh code, so any disagreement between the two
// points at the distribution logic.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "tp2d/batch.hpp"
#include "tp2d/dense.hpp"
#include "tp2d/model_config.hpp"
#include "tp2d/params.hpp"

namespace tp2d {

struct SerialOptions {
  /// Replace GELU by the identity in the MLP (test hook for hand-derived
  /// linear gradients).
  bool identity_activation = false;
};

// --- building blocks ---------------------------------------------------------

struct SerialLayerNormCache {
  Matrix x_hat;
  Matrix rstd;  // rows x 1
  Matrix gamma;
};

Matrix serial_layernorm_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                                double eps, SerialLayerNormCache* cache = nullptr);

struct SerialLayerNormGrads {
  Matrix x_grad;
  Matrix gamma_grad;
  Matrix beta_grad;
};
SerialLayerNormGrads serial_layernorm_backward(const Matrix& out_grad,
                                               const SerialLayerNormCache& cache);

/// Multi-head attention on a fused [Q | K | V] matrix whose parts are each
/// `heads * head_dim` wide. Rows are (sequence, position). Probabilities are
/// appended sequence-major then head.
Matrix serial_attention_core(const Matrix& qkv, std::size_t seq, std::size_t heads,
                             std::size_t head_dim, std::vector<Matrix>* probs);
/// Gradient w.r.t. the fused qkv input given the gradient of the core output.
Matrix serial_attention_core_backward(const Matrix& qkv, const Matrix& out_grad,
                                      const std::vector<Matrix>& probs, std::size_t seq,
                                      std::size_t heads, std::size_t head_dim);

struct SerialAttentionCache {
  Matrix input;
  Matrix qkv;
  Matrix context;
  std::vector<Matrix> probs;
  std::size_t seq = 0;
  std::size_t heads = 0;
};

Matrix serial_attention_forward(const Matrix& x, const LayerWeights& w, std::size_t seq,
                                std::size_t heads, SerialAttentionCache* cache = nullptr);

struct SerialAttentionGrads {
  Matrix x_grad;
  Matrix w_qkv;
  Matrix b_qkv;
  Matrix w_dense;
  Matrix b_dense;
};
SerialAttentionGrads serial_attention_backward(const Matrix& out_grad,
                                               const SerialAttentionCache& cache,
                                               const LayerWeights& w);

struct SerialMlpCache {
  Matrix input;
  Matrix pre_act;
  Matrix act;
};

Matrix serial_mlp_forward(const Matrix& x, const LayerWeights& w, SerialMlpCache* cache = nullptr,
                          const SerialOptions& opts = {});

struct SerialMlpGrads {
  Matrix x_grad;
  Matrix w_fc1;
  Matrix b_fc1;
  Matrix w_fc2;
  Matrix b_fc2;
};
SerialMlpGrads serial_mlp_backward(const Matrix& out_grad, const SerialMlpCache& cache,
                                   const LayerWeights& w, const SerialOptions& opts = {});

struct SerialLayerCache {
  SerialLayerNormCache ln1;
  SerialAttentionCache attn;
  SerialLayerNormCache ln2;
  SerialMlpCache mlp;
};

Matrix serial_layer_forward(const Matrix& x, const LayerWeights& w, const ModelConfig& cfg,
                            SerialLayerCache* cache = nullptr, const SerialOptions& opts = {});

struct SerialLayerGrads {
  Matrix x_grad;
  LayerWeights params;
};
SerialLayerGrads serial_layer_backward(const Matrix& y_grad, const SerialLayerCache& cache,
                                       const LayerWeights& w, const SerialOptions& opts = {});

Matrix serial_embedding(const TokenGrid& tokens, const Matrix& table);
/// Scatter-add of row gradients into a zero table of `vocab` rows.
Matrix serial_embedding_backward(const Matrix& out_grad, const TokenGrid& tokens,
                                 std::size_t vocab);

struct SerialCrossEntropy {
  double loss = 0.0;         // mean over tokens
  Matrix probs;              // softmax per token
  std::vector<double> token_loss;
};
SerialCrossEntropy serial_cross_entropy(const Matrix& logits, const TokenGrid& labels);
/// (probs - onehot) * upstream / tokens.
Matrix serial_cross_entropy_backward(const SerialCrossEntropy& ce, const TokenGrid& labels,
                                     double upstream);

struct SerialClassifier {
  double loss = 0.0;
  Matrix logits;  // batch x 1
};
SerialClassifier serial_classifier(const Matrix& x, const Matrix& weight,
                                   std::span<const int> labels, std::size_t position,
                                   std::size_t seq);
struct SerialClassifierGrads {
  Matrix x_grad;
  Matrix weight_grad;
};
SerialClassifierGrads serial_classifier_backward(const Matrix& x, const Matrix& weight,
                                                 const SerialClassifier& fwd,
                                                 std::span<const int> labels,
                                                 std::size_t position, std::size_t seq,
                                                 double upstream);

// --- whole model -------------------------------------------------------------

struct SerialTrace {
  double loss = 0.0;
  double lm_loss = 0.0;
  double cls_loss = 0.0;
  Matrix embedded;
  std::vector<Matrix> layer_outputs;
  Matrix final_hidden;  // after the final layer norm
  Matrix logits;
};

/// Forward only; every intermediate is kept in the trace.
SerialTrace serial_forward(const ModelWeights& w, const Batch& batch, const ModelConfig& cfg,
                           const SerialOptions& opts = {});

struct SerialResult {
  double loss = 0.0;
  double lm_loss = 0.0;
  double cls_loss = 0.0;
  ModelWeights grads;
  Matrix input_grad;  // gradient w.r.t. the embedded input
};

SerialResult serial_loss_and_grads(const ModelWeights& w, const Batch& batch,
                                   const ModelConfig& cfg, const SerialOptions& opts = {});

/// Central differences (f(x + step) - f(x - step)) / (2 step) at the given
/// flat indices of `param`. The parameter is restored afterwards.
std::vector<double> finite_diff_grad(const std::function<double()>& loss_fn, Matrix& param,
                                     std::span<const std::size_t> indices, double step);

// --- golden files ------------------------------------------------------------

struct TensorChecksum {
  std::string name;
  double sum = 0.0;
  double sum_of_squares = 0.0;
};

struct GoldenRecord {
  int version = 1;
  ModelConfig cfg;
  std::uint64_t seed = 0;
  double loss = 0.0;
  std::vector<TensorChecksum> grads;
};

GoldenRecord make_golden(const ModelConfig& cfg, std::uint64_t seed, const SerialResult& r);
/// Text format, one record per line:
///   tp2d-golden <version>
///   config b s h n v layers eps seed
///   loss <value>
///   grad <name> <sum> <sum_of_squares>
void write_golden(const GoldenRecord& g, std::ostream& out);
GoldenRecord read_golden(std::istream& in);

}  // namespace tp2d

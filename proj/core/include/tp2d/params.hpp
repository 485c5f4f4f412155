// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Parameter containers. `LayerWeights`/`ModelWeights` are the global
// (gathered) tensors shared with the serial reference; `ShardedLayer` and
// `ShardedModel` are the same parameters laid out on a mesh.
//
// Fused QKV layout. Globally w_qkv is [Wq | Wk | Wv] (h x 3h) and head k
// owns columns [k*d, (k+1)*d) of each third. On the mesh the columns are
// permuted so that column block j holds [Q_j | K_j | V_j] for the n/q heads
// of device column j; attention then needs no communication between the
// QKV product and the dense product.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tp2d/dense.hpp"
#include "tp2d/mesh.hpp"
#include "tp2d/model_config.hpp"
#include "tp2d/summa.hpp"

namespace tp2d {

struct LayerWeights {
  Matrix ln1_gamma;  // 1 x h
  Matrix ln1_beta;   // 1 x h
  Matrix w_qkv;      // h x 3h
  Matrix b_qkv;      // 1 x 3h
  Matrix w_dense;    // h x h
  Matrix b_dense;    // 1 x h
  Matrix ln2_gamma;  // 1 x h
  Matrix ln2_beta;   // 1 x h
  Matrix w_fc1;      // h x 4h
  Matrix b_fc1;      // 1 x 4h
  Matrix w_fc2;      // 4h x h
  Matrix b_fc2;      // 1 x h

  /// f(name, tensor) in declaration order.
  template <class Self, class F>
  static void for_each(Self& self, F&& f) {
    f("ln1_gamma", self.ln1_gamma);
    f("ln1_beta", self.ln1_beta);
    f("w_qkv", self.w_qkv);
    f("b_qkv", self.b_qkv);
    f("w_dense", self.w_dense);
    f("b_dense", self.b_dense);
    f("ln2_gamma", self.ln2_gamma);
    f("ln2_beta", self.ln2_beta);
    f("w_fc1", self.w_fc1);
    f("b_fc1", self.b_fc1);
    f("w_fc2", self.w_fc2);
    f("b_fc2", self.b_fc2);
  }

  static LayerWeights zeros(std::size_t h);
};

struct ModelWeights {
  Matrix embedding;  // v x h, tied with the lm-head
  std::vector<LayerWeights> layers;
  Matrix lnf_gamma;   // 1 x h
  Matrix lnf_beta;    // 1 x h
  Matrix cls_weight;  // 1 x h, sentence-classification head

  /// f(name, tensor) over every tensor in declaration order; layer tensors
  /// are named "layers.<k>.<field>".
  template <class Self, class F>
  static void for_each(Self& self, F&& f) {
    f(std::string("embedding"), self.embedding);
    for (std::size_t k = 0; k < self.layers.size(); ++k) {
      LayerWeights::for_each(self.layers[k], [&](const char* name, auto& m) {
        f("layers." + std::to_string(k) + "." + name, m);
      });
    }
    f(std::string("lnf_gamma"), self.lnf_gamma);
    f(std::string("lnf_beta"), self.lnf_beta);
    f(std::string("cls_weight"), self.cls_weight);
  }

  /// Symmetric uniform init: weights and biases U(-1/sqrt(h), 1/sqrt(h)),
  /// layer-norm gains 1 + U(-0.1, 0.1), shifts U(-0.1, 0.1). Tensors are drawn
  /// from one stream in declaration order.
  static ModelWeights init(const ModelConfig& cfg, std::uint64_t seed);
  static ModelWeights zeros(const ModelConfig& cfg);

  std::size_t scalar_count() const;
};

/// Largest absolute entry difference over all tensors. Shapes must match.
double max_abs_diff(const ModelWeights& a, const ModelWeights& b);
/// w -= lr * g, tensor by tensor.
void sgd_step(ModelWeights& w, const ModelWeights& g, double lr);

// ---------------------------------------------------------------------------
// Mesh layout.

/// A 1 x length vector held by the row-0 devices: device (0, j) owns entries
/// [j*length/q, (j+1)*length/q).
class HostedVector {
 public:
  HostedVector() = default;
  HostedVector(const Mesh& mesh, std::size_t length);

  std::size_t length() const { return length_; }
  std::size_t shard_length() const { return q_ == 0 ? 0 : length_ / q_; }
  int q() const { return q_; }
  std::uint64_t mesh_id() const { return mesh_id_; }
  bool empty() const { return q_ == 0; }

  Matrix& shard(int col) { return shards_[col]; }
  const Matrix& shard(int col) const { return shards_[col]; }

  HostedVector& operator+=(const HostedVector& other);

 private:
  std::size_t length_ = 0;
  int q_ = 0;
  std::uint64_t mesh_id_ = 0;
  std::vector<Matrix> shards_;
};

HostedVector host(const Matrix& row_vector, const Mesh& mesh);
Matrix gather(const HostedVector& v);

/// Mesh column index of global QKV column c.
std::size_t qkv_mesh_column(std::size_t c, std::size_t h, int q);
/// Permutes the columns of a (.. x 3h) matrix from the global [Q|K|V] order
/// into mesh order, and back.
Matrix qkv_to_mesh_layout(const Matrix& m, std::size_t h, int q);
Matrix qkv_from_mesh_layout(const Matrix& m, std::size_t h, int q);

struct ShardedLayer {
  HostedVector ln1_gamma;
  HostedVector ln1_beta;
  ShardedMatrix w_qkv;  // mesh column order, see qkv_to_mesh_layout
  HostedVector b_qkv;   // same permutation
  ShardedMatrix w_dense;
  HostedVector b_dense;
  HostedVector ln2_gamma;
  HostedVector ln2_beta;
  ShardedMatrix w_fc1;
  HostedVector b_fc1;
  ShardedMatrix w_fc2;
  HostedVector b_fc2;

  template <class Self, class F>
  static void for_each(Self& self, F&& f) {
    f("ln1_gamma", self.ln1_gamma);
    f("ln1_beta", self.ln1_beta);
    f("w_qkv", self.w_qkv);
    f("b_qkv", self.b_qkv);
    f("w_dense", self.w_dense);
    f("b_dense", self.b_dense);
    f("ln2_gamma", self.ln2_gamma);
    f("ln2_beta", self.ln2_beta);
    f("w_fc1", self.w_fc1);
    f("b_fc1", self.b_fc1);
    f("w_fc2", self.w_fc2);
    f("b_fc2", self.b_fc2);
  }

  static ShardedLayer zeros(const Mesh& mesh, std::size_t h);
  /// Scalars of this layer stored on device (row, col).
  std::size_t local_scalars(int row, int col) const;
  ShardedLayer& operator+=(const ShardedLayer& other);
};

ShardedLayer distribute(const LayerWeights& w, const Mesh& mesh);
LayerWeights collect(const ShardedLayer& s);
void sgd_step(ShardedLayer& w, const ShardedLayer& g, double lr);

struct ShardedModel {
  ShardedMatrix embedding;  // padded_vocab x h, padding rows zero
  std::vector<ShardedLayer> layers;
  HostedVector lnf_gamma;
  HostedVector lnf_beta;
  HostedVector cls_weight;

  static ShardedModel zeros(const Mesh& mesh, const ModelConfig& cfg);
};

ShardedModel distribute(const ModelWeights& w, const Mesh& mesh, const ModelConfig& cfg);
/// Gathers to global tensors, dropping vocabulary padding.
ModelWeights collect(const ShardedModel& s, const ModelConfig& cfg);

}  // namespace tp2d

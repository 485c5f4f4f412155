// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tp2d/params.hpp"

#include <algorithm>
#include <cmath>
#include <string_view>
#include <type_traits>

#include <fmt/format.h>

#include "tp2d/error.hpp"

namespace tp2d {

LayerWeights LayerWeights::zeros(std::size_t h) {
  LayerWeights w;
  w.ln1_gamma = Matrix(1, h);
  w.ln1_beta = Matrix(1, h);
  w.w_qkv = Matrix(h, 3 * h);
  w.b_qkv = Matrix(1, 3 * h);
  w.w_dense = Matrix(h, h);
  w.b_dense = Matrix(1, h);
  w.ln2_gamma = Matrix(1, h);
  w.ln2_beta = Matrix(1, h);
  w.w_fc1 = Matrix(h, 4 * h);
  w.b_fc1 = Matrix(1, 4 * h);
  w.w_fc2 = Matrix(4 * h, h);
  w.b_fc2 = Matrix(1, h);
  return w;
}

ModelWeights ModelWeights::zeros(const ModelConfig& cfg) {
  ModelWeights w;
  w.embedding = Matrix(cfg.v, cfg.h);
  w.layers.assign(cfg.layers, LayerWeights::zeros(cfg.h));
  w.lnf_gamma = Matrix(1, cfg.h);
  w.lnf_beta = Matrix(1, cfg.h);
  w.cls_weight = Matrix(1, cfg.h);
  return w;
}

ModelWeights ModelWeights::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelWeights w = zeros(cfg);
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.h));
  for_each(w, [&](const std::string& name, Matrix& m) {
    const bool gain = name.ends_with("gamma");
    const bool shift = name.ends_with("beta");
    for (double& x : m.data()) {
      if (gain) {
        x = 1.0 + rng.uniform(-0.1, 0.1);
      } else if (shift) {
        x = rng.uniform(-0.1, 0.1);
      } else {
        x = rng.uniform(-scale, scale);
      }
    }
  });
  return w;
}

std::size_t ModelWeights::scalar_count() const {
  std::size_t total = 0;
  for_each(*this, [&](const std::string&, const Matrix& m) { total += m.size(); });
  return total;
}

namespace {

std::vector<const Matrix*> flatten(const ModelWeights& w) {
  std::vector<const Matrix*> out;
  ModelWeights::for_each(w, [&](const std::string&, const Matrix& m) { out.push_back(&m); });
  return out;
}

}  // namespace

double max_abs_diff(const ModelWeights& a, const ModelWeights& b) {
  const auto ta = flatten(a);
  const auto tb = flatten(b);
  if (ta.size() != tb.size()) throw ShapeError("max_abs_diff: models differ in tensor count");
  double worst = 0.0;
  for (std::size_t k = 0; k < ta.size(); ++k) worst = std::max(worst, max_abs_diff(*ta[k], *tb[k]));
  return worst;
}

void sgd_step(ModelWeights& w, const ModelWeights& g, double lr) {
  const auto tg = flatten(g);
  std::size_t k = 0;
  ModelWeights::for_each(w, [&](const std::string&, Matrix& m) {
    if (k >= tg.size() || !m.same_shape(*tg[k])) throw ShapeError("sgd_step: gradient shape mismatch");
    m -= scaled(*tg[k], lr);
    ++k;
  });
}

// ---------------------------------------------------------------------------

HostedVector::HostedVector(const Mesh& mesh, std::size_t length)
    : length_(length), q_(mesh.q()), mesh_id_(mesh.id()) {
  if (length % static_cast<std::size_t>(q_) != 0) {
    throw ShapeError(fmt::format("vector of length {} cannot be split over {} columns", length, q_));
  }
  shards_.assign(q_, Matrix(1, length / q_));
}

HostedVector& HostedVector::operator+=(const HostedVector& other) {
  if (other.mesh_id_ != mesh_id_ || other.length_ != length_) {
    throw ShapeError("HostedVector +=: operands differ in length or mesh");
  }
  for (int j = 0; j < q_; ++j) shards_[j] += other.shards_[j];
  return *this;
}

HostedVector host(const Matrix& row_vector, const Mesh& mesh) {
  if (row_vector.rows() != 1) throw ShapeError("host: expected a 1 x n row vector");
  HostedVector v(mesh, row_vector.cols());
  const std::size_t w = v.shard_length();
  for (int j = 0; j < mesh.q(); ++j) v.shard(j) = row_vector.block(0, j * w, 1, w);
  return v;
}

Matrix gather(const HostedVector& v) {
  Matrix out(1, v.length());
  for (int j = 0; j < v.q(); ++j) out.set_block(0, j * v.shard_length(), v.shard(j));
  return out;
}

std::size_t qkv_mesh_column(std::size_t c, std::size_t h, int q) {
  const std::size_t part = c / h;
  const std::size_t within = c % h;
  const std::size_t width = h / static_cast<std::size_t>(q);
  return (within / width) * 3 * width + part * width + within % width;
}

Matrix qkv_to_mesh_layout(const Matrix& m, std::size_t h, int q) {
  if (m.cols() != 3 * h) throw ShapeError("qkv_to_mesh_layout: expected 3h columns");
  Matrix out(m.rows(), m.cols());
  for (std::size_t c = 0; c < m.cols(); ++c) {
    const std::size_t d = qkv_mesh_column(c, h, q);
    for (std::size_t r = 0; r < m.rows(); ++r) out(r, d) = m(r, c);
  }
  return out;
}

Matrix qkv_from_mesh_layout(const Matrix& m, std::size_t h, int q) {
  if (m.cols() != 3 * h) throw ShapeError("qkv_from_mesh_layout: expected 3h columns");
  Matrix out(m.rows(), m.cols());
  for (std::size_t c = 0; c < m.cols(); ++c) {
    const std::size_t d = qkv_mesh_column(c, h, q);
    for (std::size_t r = 0; r < m.rows(); ++r) out(r, c) = m(r, d);
  }
  return out;
}

ShardedLayer ShardedLayer::zeros(const Mesh& mesh, std::size_t h) {
  ShardedLayer s;
  s.ln1_gamma = HostedVector(mesh, h);
  s.ln1_beta = HostedVector(mesh, h);
  s.w_qkv = ShardedMatrix(mesh, h, 3 * h);
  s.b_qkv = HostedVector(mesh, 3 * h);
  s.w_dense = ShardedMatrix(mesh, h, h);
  s.b_dense = HostedVector(mesh, h);
  s.ln2_gamma = HostedVector(mesh, h);
  s.ln2_beta = HostedVector(mesh, h);
  s.w_fc1 = ShardedMatrix(mesh, h, 4 * h);
  s.b_fc1 = HostedVector(mesh, 4 * h);
  s.w_fc2 = ShardedMatrix(mesh, 4 * h, h);
  s.b_fc2 = HostedVector(mesh, h);
  return s;
}

namespace {

struct LocalCounter {
  int row;
  int col;
  std::size_t total = 0;
  void operator()(const char*, const ShardedMatrix& m) { total += m.local(row, col).size(); }
  void operator()(const char*, const HostedVector& v) {
    if (row == 0) total += v.shard(col).size();
  }
};

struct Accumulate {
  const ShardedLayer* other;
  template <class T>
  void operator()(const char* name, T& mine) {
    ShardedLayer::for_each(*other, [&](const char* n, const auto& theirs) {
      if constexpr (std::is_same_v<std::decay_t<decltype(theirs)>, T>) {
        if (std::string_view(n) == name) mine += theirs;
      }
    });
  }
};

}  // namespace

std::size_t ShardedLayer::local_scalars(int row, int col) const {
  LocalCounter counter{row, col};
  for_each(*this, counter);
  return counter.total;
}

ShardedLayer& ShardedLayer::operator+=(const ShardedLayer& other) {
  for_each(*this, Accumulate{&other});
  return *this;
}

ShardedLayer distribute(const LayerWeights& w, const Mesh& mesh) {
  const std::size_t h = w.w_dense.rows();
  const int q = mesh.q();
  ShardedLayer s;
  s.ln1_gamma = host(w.ln1_gamma, mesh);
  s.ln1_beta = host(w.ln1_beta, mesh);
  s.w_qkv = scatter(qkv_to_mesh_layout(w.w_qkv, h, q), mesh);
  s.b_qkv = host(qkv_to_mesh_layout(w.b_qkv, h, q), mesh);
  s.w_dense = scatter(w.w_dense, mesh);
  s.b_dense = host(w.b_dense, mesh);
  s.ln2_gamma = host(w.ln2_gamma, mesh);
  s.ln2_beta = host(w.ln2_beta, mesh);
  s.w_fc1 = scatter(w.w_fc1, mesh);
  s.b_fc1 = host(w.b_fc1, mesh);
  s.w_fc2 = scatter(w.w_fc2, mesh);
  s.b_fc2 = host(w.b_fc2, mesh);
  return s;
}

LayerWeights collect(const ShardedLayer& s) {
  const std::size_t h = s.w_dense.global_rows();
  const int q = s.w_dense.q();
  LayerWeights w;
  w.ln1_gamma = gather(s.ln1_gamma);
  w.ln1_beta = gather(s.ln1_beta);
  w.w_qkv = qkv_from_mesh_layout(gather(s.w_qkv), h, q);
  w.b_qkv = qkv_from_mesh_layout(gather(s.b_qkv), h, q);
  w.w_dense = gather(s.w_dense);
  w.b_dense = gather(s.b_dense);
  w.ln2_gamma = gather(s.ln2_gamma);
  w.ln2_beta = gather(s.ln2_beta);
  w.w_fc1 = gather(s.w_fc1);
  w.b_fc1 = gather(s.b_fc1);
  w.w_fc2 = gather(s.w_fc2);
  w.b_fc2 = gather(s.b_fc2);
  return w;
}

namespace {

struct SgdUpdate {
  const ShardedLayer* grads;
  double lr;
  template <class T>
  void operator()(const char* name, T& w) {
    ShardedLayer::for_each(*grads, [&](const char* n, const auto& g) {
      if constexpr (std::is_same_v<std::decay_t<decltype(g)>, T>) {
        if (std::string_view(n) != name) return;
        if constexpr (std::is_same_v<T, ShardedMatrix>) {
          for (int i = 0; i < w.q(); ++i) {
            for (int j = 0; j < w.q(); ++j) w.local(i, j) -= scaled(g.local(i, j), lr);
          }
        } else {
          for (int j = 0; j < w.q(); ++j) w.shard(j) -= scaled(g.shard(j), lr);
        }
      }
    });
  }
};

}  // namespace

void sgd_step(ShardedLayer& w, const ShardedLayer& g, double lr) {
  ShardedLayer::for_each(w, SgdUpdate{&g, lr});
}

ShardedModel ShardedModel::zeros(const Mesh& mesh, const ModelConfig& cfg) {
  ShardedModel s;
  s.embedding = ShardedMatrix(mesh, cfg.padded_vocab(mesh.q()), cfg.h);
  for (std::size_t k = 0; k < cfg.layers; ++k) s.layers.push_back(ShardedLayer::zeros(mesh, cfg.h));
  s.lnf_gamma = HostedVector(mesh, cfg.h);
  s.lnf_beta = HostedVector(mesh, cfg.h);
  s.cls_weight = HostedVector(mesh, cfg.h);
  return s;
}

ShardedModel distribute(const ModelWeights& w, const Mesh& mesh, const ModelConfig& cfg) {
  cfg.validate_for_mesh(mesh.q());
  ShardedModel s;
  Matrix table(cfg.padded_vocab(mesh.q()), cfg.h);
  table.set_block(0, 0, w.embedding);
  s.embedding = scatter(table, mesh);
  for (const auto& layer : w.layers) s.layers.push_back(distribute(layer, mesh));
  s.lnf_gamma = host(w.lnf_gamma, mesh);
  s.lnf_beta = host(w.lnf_beta, mesh);
  s.cls_weight = host(w.cls_weight, mesh);
  return s;
}

ModelWeights collect(const ShardedModel& s, const ModelConfig& cfg) {
  ModelWeights w;
  w.embedding = gather(s.embedding).block(0, 0, cfg.v, cfg.h);
  for (const auto& layer : s.layers) w.layers.push_back(collect(layer));
  w.lnf_gamma = gather(s.lnf_gamma);
  w.lnf_beta = gather(s.lnf_beta);
  w.cls_weight = gather(s.cls_weight);
  return w;
}

}  // namespace tp2d

// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tp2d/baseline.hpp"

#include <fmt/format.h>

#include "tp2d/error.hpp"
#include "tp2d/membuf.hpp"

namespace tp2d {

namespace {

Matrix add_bias(Matrix x, const Matrix& bias) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) row[c] += bias(0, c);
  }
  return x;
}

// Columns [c0, c0+w) of each third of a (.. x 3h) matrix, concatenated.
Matrix qkv_slice(const Matrix& m, std::size_t h, std::size_t c0, std::size_t w) {
  Matrix out(m.rows(), 3 * w);
  for (std::size_t part = 0; part < 3; ++part) {
    out.set_block(0, part * w, m.block(0, part * h + c0, m.rows(), w));
  }
  return out;
}

void place_qkv_slice(Matrix& dst, const Matrix& slice, std::size_t h, std::size_t c0) {
  const std::size_t w = slice.cols() / 3;
  for (std::size_t part = 0; part < 3; ++part) {
    dst.set_block(0, part * h + c0, slice.block(0, part * w, slice.rows(), w));
  }
}

std::uint64_t product_macs(std::size_t m, std::size_t k, std::size_t n) {
  return static_cast<std::uint64_t>(m) * k * n;
}

void check_mesh(const Mesh& mesh, const BaselineLayer& layer, const ModelConfig& cfg) {
  cfg.validate_for_baseline(mesh.p());
  if (layer.shards.size() != static_cast<std::size_t>(mesh.p())) {
    throw ConfigError(fmt::format("baseline layer has {} shards for {} devices",
                                  layer.shards.size(), mesh.p()));
  }
}

}  // namespace

BaselineLayer distribute_baseline(const LayerWeights& w, int p, const ModelConfig& cfg) {
  cfg.validate_for_baseline(p);
  const std::size_t h = cfg.h;
  const std::size_t up = static_cast<std::size_t>(p);
  const std::size_t hw = h / up;
  const std::size_t fw = 4 * h / up;
  BaselineLayer out;
  out.ln1_gamma = w.ln1_gamma;
  out.ln1_beta = w.ln1_beta;
  out.b_dense = w.b_dense;
  out.ln2_gamma = w.ln2_gamma;
  out.ln2_beta = w.ln2_beta;
  out.b_fc2 = w.b_fc2;
  out.shards.resize(up);
  for (std::size_t r = 0; r < up; ++r) {
    BaselineShard& s = out.shards[r];
    s.w_qkv = qkv_slice(w.w_qkv, h, r * hw, hw);
    s.b_qkv = qkv_slice(w.b_qkv, h, r * hw, hw);
    s.w_dense = w.w_dense.block(r * hw, 0, hw, h);
    s.w_fc1 = w.w_fc1.block(0, r * fw, h, fw);
    s.b_fc1 = w.b_fc1.block(0, r * fw, 1, fw);
    s.w_fc2 = w.w_fc2.block(r * fw, 0, fw, h);
  }
  return out;
}

LayerWeights collect_baseline(const BaselineLayer& layer, const ModelConfig& cfg) {
  const std::size_t h = cfg.h;
  const std::size_t p = layer.shards.size();
  const std::size_t hw = h / p;
  const std::size_t fw = 4 * h / p;
  LayerWeights w = LayerWeights::zeros(h);
  w.ln1_gamma = layer.ln1_gamma;
  w.ln1_beta = layer.ln1_beta;
  w.b_dense = layer.b_dense;
  w.ln2_gamma = layer.ln2_gamma;
  w.ln2_beta = layer.ln2_beta;
  w.b_fc2 = layer.b_fc2;
  for (std::size_t r = 0; r < p; ++r) {
    const BaselineShard& s = layer.shards[r];
    place_qkv_slice(w.w_qkv, s.w_qkv, h, r * hw);
    place_qkv_slice(w.b_qkv, s.b_qkv, h, r * hw);
    w.w_dense.set_block(r * hw, 0, s.w_dense);
    w.w_fc1.set_block(0, r * fw, s.w_fc1);
    w.b_fc1.set_block(0, r * fw, s.b_fc1);
    w.w_fc2.set_block(r * fw, 0, s.w_fc2);
  }
  return w;
}

std::pair<Matrix, BaselineContext> baseline_1d_layer_forward(Mesh& mesh, const Matrix& x,
                                                             const BaselineLayer& layer,
                                                             const ModelConfig& cfg) {
  check_mesh(mesh, layer, cfg);
  const int q = mesh.q();
  const std::size_t p = static_cast<std::size_t>(mesh.p());
  const std::size_t bs = x.rows();
  const std::size_t h = cfg.h;
  const std::size_t heads = cfg.n / p;
  const std::size_t d = cfg.head_dim();
  if (x.cols() != h || bs != cfg.tokens()) throw ShapeError("baseline forward: input shape");

  BaselineContext ctx;
  ctx.mesh_id = mesh.id();
  ctx.qkv.resize(p);
  ctx.context.resize(p);
  ctx.probs.resize(p);
  ctx.pre_act.resize(p);
  ctx.act.resize(p);

  // Replicated work is identical on every device; it is computed once.
  ctx.attn_in = serial_layernorm_forward(x, layer.ln1_gamma, layer.ln1_beta, cfg.eps, &ctx.ln1);
  std::vector<Matrix> partial(p);
  mesh.for_each_device([&](int i, int j) {
    const int r = i * q + j;
    const BaselineShard& s = layer.shards[r];
    ctx.qkv[r] = add_bias(matmul(ctx.attn_in, s.w_qkv), s.b_qkv);
    ctx.context[r] = serial_attention_core(ctx.qkv[r], cfg.s, heads, d, &ctx.probs[r]);
    partial[r] = matmul(ctx.context[r], s.w_dense);
    const std::uint64_t attn = static_cast<std::uint64_t>(cfg.b) * heads * 2 * cfg.s * cfg.s * d;
    mesh.add_macs(i, j, product_macs(bs, h, s.w_qkv.cols()) + attn +
                            product_macs(bs, s.w_dense.rows(), h));
  });
  const Matrix attn_out = add_bias(mesh.all_reduce_world(partial)[0], layer.b_dense);
  const Matrix mid = add(x, attn_out);

  ctx.mlp_in = serial_layernorm_forward(mid, layer.ln2_gamma, layer.ln2_beta, cfg.eps, &ctx.ln2);
  mesh.for_each_device([&](int i, int j) {
    const int r = i * q + j;
    const BaselineShard& s = layer.shards[r];
    ctx.pre_act[r] = add_bias(matmul(ctx.mlp_in, s.w_fc1), s.b_fc1);
    ctx.act[r] = gelu(ctx.pre_act[r]);
    partial[r] = matmul(ctx.act[r], s.w_fc2);
    mesh.add_macs(i, j, product_macs(bs, h, s.w_fc1.cols()) + product_macs(bs, s.w_fc2.rows(), h));
  });
  const Matrix mlp_out = add_bias(mesh.all_reduce_world(partial)[0], layer.b_fc2);
  return {add(mid, mlp_out), std::move(ctx)};
}

BaselineGrads baseline_1d_layer_backward(Mesh& mesh, const Matrix& y_grad,
                                         const BaselineContext& ctx, const BaselineLayer& layer,
                                         const ModelConfig& cfg) {
  check_mesh(mesh, layer, cfg);
  if (ctx.mesh_id != mesh.id() || ctx.qkv.size() != layer.shards.size()) {
    throw StaleContextError("baseline backward: context from another mesh or layer");
  }
  const int q = mesh.q();
  const std::size_t p = static_cast<std::size_t>(mesh.p());
  const std::size_t bs = y_grad.rows();
  const std::size_t h = cfg.h;
  const std::size_t heads = cfg.n / p;
  const std::size_t d = cfg.head_dim();

  BaselineGrads out;
  BaselineLayer& g = out.params;
  g.shards.resize(p);
  g.b_fc2 = column_sums(y_grad);

  std::vector<Matrix> partial(p);
  mesh.for_each_device([&](int i, int j) {
    const int r = i * q + j;
    const BaselineShard& s = layer.shards[r];
    BaselineShard& gs = g.shards[r];
    gs.w_fc2 = matmul_tn(ctx.act[r], y_grad);
    const Matrix pre_grad = gelu_backward(ctx.pre_act[r], matmul_nt(y_grad, s.w_fc2));
    gs.b_fc1 = column_sums(pre_grad);
    gs.w_fc1 = matmul_tn(ctx.mlp_in, pre_grad);
    partial[r] = matmul_nt(pre_grad, s.w_fc1);
    const std::size_t f = s.w_fc1.cols();
    mesh.add_macs(i, j, 2 * product_macs(bs, f, h) + 2 * product_macs(bs, h, f));
  });
  const Matrix mlp_in_grad = mesh.all_reduce_world(partial)[0];
  SerialLayerNormGrads l2 = serial_layernorm_backward(mlp_in_grad, ctx.ln2);
  const Matrix mid_grad = add(y_grad, l2.x_grad);
  g.ln2_gamma = std::move(l2.gamma_grad);
  g.ln2_beta = std::move(l2.beta_grad);
  g.b_dense = column_sums(mid_grad);

  mesh.for_each_device([&](int i, int j) {
    const int r = i * q + j;
    const BaselineShard& s = layer.shards[r];
    BaselineShard& gs = g.shards[r];
    gs.w_dense = matmul_tn(ctx.context[r], mid_grad);
    const Matrix context_grad = matmul_nt(mid_grad, s.w_dense);
    const Matrix qkv_grad =
        serial_attention_core_backward(ctx.qkv[r], context_grad, ctx.probs[r], cfg.s, heads, d);
    gs.b_qkv = column_sums(qkv_grad);
    gs.w_qkv = matmul_tn(ctx.attn_in, qkv_grad);
    partial[r] = matmul_nt(qkv_grad, s.w_qkv);
    const std::size_t w = s.w_dense.rows();
    const std::uint64_t attn = static_cast<std::uint64_t>(cfg.b) * heads * 4 * cfg.s * cfg.s * d;
    mesh.add_macs(i, j, 2 * product_macs(bs, w, h) + attn + 2 * product_macs(bs, h, 3 * w));
  });
  const Matrix attn_in_grad = mesh.all_reduce_world(partial)[0];
  SerialLayerNormGrads l1 = serial_layernorm_backward(attn_in_grad, ctx.ln1);
  g.ln1_gamma = std::move(l1.gamma_grad);
  g.ln1_beta = std::move(l1.beta_grad);
  out.x_grad = add(mid_grad, l1.x_grad);
  return out;
}

Matrix baseline_checkpointed_forward(Mesh& mesh, std::span<const BaselineLayer> layers,
                                     const Matrix& x, const ModelConfig& cfg,
                                     MemoryTracker* tracker) {
  Matrix cur = x;
  for (const auto& layer : layers) {
    if (tracker != nullptr) {
      tracker->release_all(BufferCategory::Forward);
      for (int d = 0; d < mesh.p(); ++d) {
        tracker->at(d, BufferCategory::Checkpoint).acquire(cur.size());
      }
    }
    auto [y, ctx] = baseline_1d_layer_forward(mesh, cur, layer, cfg);
    if (tracker != nullptr) {
      for (int d = 0; d < mesh.p(); ++d) {
        Arena& fwd = tracker->at(d, BufferCategory::Forward);
        fwd.acquire(ctx.qkv[d].size());
        fwd.acquire(cur.size());  // dense output after the all-reduce
        fwd.acquire(ctx.pre_act[d].size());
        fwd.acquire(y.size());
      }
    }
    cur = std::move(y);
  }
  return cur;
}

}  // namespace tp2d

// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tp2d/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "tp2d/error.hpp"

namespace tp2d {

namespace {

using Grid = std::vector<std::vector<Matrix>>;

Grid make_grid(int q) { return Grid(q, std::vector<Matrix>(q)); }

void require_on_mesh(const Mesh& mesh, const ShardedMatrix& m, const char* what) {
  if (m.empty() || m.mesh_id() != mesh.id()) {
    throw ShapeError(fmt::format("{}: operand does not live on this mesh", what));
  }
}

void require_on_mesh(const Mesh& mesh, const HostedVector& v, const char* what) {
  if (v.empty() || v.mesh_id() != mesh.id()) {
    throw ShapeError(fmt::format("{}: vector does not live on this mesh", what));
  }
}

void require_context(bool ok, const char* what) {
  if (!ok) throw StaleContextError(fmt::format("{}: context is empty or from another run", what));
}

void add_row_vector(Matrix& m, const Matrix& row) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto dst = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) dst[c] += row(0, c);
  }
}

/// Broadcasts every column's row-0 shard down its column; result[j][i] is
/// the copy on device (i, j).
Grid broadcast_hosted(Mesh& mesh, const std::vector<Matrix>& shards) {
  Grid recv(mesh.q());
  for (int j = 0; j < mesh.q(); ++j) {
    recv[j] = mesh.broadcast_col(j, 0, shards[j], CostClass::Auxiliary);
  }
  return recv;
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

// --- bias --------------------------------------------------------------------

ShardedMatrix bias_add_forward(Mesh& mesh, const ShardedMatrix& x, const HostedVector& bias) {
  require_on_mesh(mesh, x, "bias_add_forward");
  require_on_mesh(mesh, bias, "bias_add_forward");
  if (bias.length() != x.global_cols()) {
    throw ShapeError(fmt::format("bias_add_forward: bias of length {} for {} columns",
                                 bias.length(), x.global_cols()));
  }
  std::vector<Matrix> shards(mesh.q());
  for (int j = 0; j < mesh.q(); ++j) shards[j] = bias.shard(j);
  const Grid recv = broadcast_hosted(mesh, shards);
  ShardedMatrix y = x;
  mesh.for_each_device([&](int i, int j) { add_row_vector(y.local(i, j), recv[j][i]); });
  return y;
}

HostedVector bias_grad(Mesh& mesh, const ShardedMatrix& out_grad) {
  require_on_mesh(mesh, out_grad, "bias_grad");
  const int q = mesh.q();
  Grid partial = make_grid(q);  // [col][row]
  mesh.for_each_device([&](int i, int j) { partial[j][i] = column_sums(out_grad.local(i, j)); });
  HostedVector g(mesh, out_grad.global_cols());
  for (int j = 0; j < q; ++j) g.shard(j) = mesh.reduce_col(j, 0, partial[j], CostClass::Auxiliary);
  return g;
}

BiasGrads bias_add_backward(Mesh& mesh, const ShardedMatrix& out_grad) {
  return {out_grad, bias_grad(mesh, out_grad)};
}

// --- layer norm --------------------------------------------------------------

std::pair<ShardedMatrix, LayerNormContext> layernorm_forward(Mesh& mesh, const ShardedMatrix& x,
                                                             const HostedVector& gamma,
                                                             const HostedVector& beta,
                                                             double eps) {
  require_on_mesh(mesh, x, "layernorm_forward");
  require_on_mesh(mesh, gamma, "layernorm_forward");
  require_on_mesh(mesh, beta, "layernorm_forward");
  if (gamma.length() != x.global_cols() || beta.length() != x.global_cols()) {
    throw ShapeError("layernorm_forward: gamma/beta length differs from hidden size");
  }
  if (!(eps > 0.0)) throw ConfigError("layernorm_forward: eps must be > 0");

  const int q = mesh.q();
  const std::size_t rows = x.block_rows();
  const std::size_t cols = x.block_cols();
  const double h = static_cast<double>(x.global_cols());

  // One packed row all-reduce of [sum X, sum X^2] per position.
  Grid sums = make_grid(q);
  mesh.for_each_device([&](int i, int j) {
    const Matrix& blk = x.local(i, j);
    Matrix s(rows, 2);
    for (std::size_t r = 0; r < rows; ++r) {
      double s1 = 0.0, s2 = 0.0;
      for (double v : blk.row(r)) {
        s1 += v;
        s2 += v * v;
      }
      s(r, 0) = s1;
      s(r, 1) = s2;
    }
    sums[i][j] = std::move(s);
  });
  Grid totals(q);
  for (int i = 0; i < q; ++i) {
    totals[i] = mesh.all_reduce_row(i, sums[i], ReduceOp::Sum, CostClass::Auxiliary);
  }

  std::vector<Matrix> packed(q);
  for (int j = 0; j < q; ++j) {
    Matrix gb(2, cols);
    gb.set_block(0, 0, gamma.shard(j));
    gb.set_block(1, 0, beta.shard(j));
    packed[j] = std::move(gb);
  }
  const Grid affine = broadcast_hosted(mesh, packed);

  LayerNormContext ctx;
  ctx.x_hat = ShardedMatrix(mesh, x.global_rows(), x.global_cols());
  ctx.mean.resize(mesh.p());
  ctx.rstd.resize(mesh.p());
  ctx.gamma.resize(mesh.p());
  ctx.hidden = x.global_cols();
  ctx.mesh_id = mesh.id();

  ShardedMatrix y(mesh, x.global_rows(), x.global_cols());
  mesh.for_each_device([&](int i, int j) {
    const int dev = mesh.index(i, j);
    const Matrix& tot = totals[i][j];
    const Matrix& gb = affine[j][i];
    Matrix mean(rows, 1), rstd(rows, 1);
    Matrix& xh = ctx.x_hat.local(i, j);
    Matrix& out = y.local(i, j);
    const Matrix& blk = x.local(i, j);
    for (std::size_t r = 0; r < rows; ++r) {
      const double mu = tot(r, 0) / h;
      const double var = std::max(0.0, tot(r, 1) / h - mu * mu);
      const double rs = 1.0 / std::sqrt(var + eps);
      mean(r, 0) = mu;
      rstd(r, 0) = rs;
      for (std::size_t c = 0; c < cols; ++c) {
        const double v = (blk(r, c) - mu) * rs;
        xh(r, c) = v;
        out(r, c) = v * gb(0, c) + gb(1, c);
      }
    }
    ctx.mean[dev] = std::move(mean);
    ctx.rstd[dev] = std::move(rstd);
    ctx.gamma[dev] = gb.block(0, 0, 1, cols);
  });
  return {std::move(y), std::move(ctx)};
}

LayerNormGrads layernorm_backward(Mesh& mesh, const ShardedMatrix& out_grad,
                                  const LayerNormContext& ctx) {
  require_context(!ctx.empty() && ctx.mesh_id == mesh.id() &&
                      ctx.x_hat.global_rows() == out_grad.global_rows() &&
                      ctx.x_hat.global_cols() == out_grad.global_cols(),
                  "layernorm_backward");
  require_on_mesh(mesh, out_grad, "layernorm_backward");
  const int q = mesh.q();
  const std::size_t rows = out_grad.block_rows();
  const std::size_t cols = out_grad.block_cols();
  const double h = static_cast<double>(ctx.hidden);

  // g = dJ/dX_hat; one packed row all-reduce of [sum g, sum X_hat g].
  Grid g_hat = make_grid(q);
  Grid sums = make_grid(q);
  Grid affine_partial = make_grid(q);  // [col][row], rows: gamma grad, beta grad
  mesh.for_each_device([&](int i, int j) {
    const Matrix& dy = out_grad.local(i, j);
    const Matrix& xh = ctx.x_hat.local(i, j);
    const Matrix& gamma = ctx.gamma[mesh.index(i, j)];
    Matrix g(rows, cols), s(rows, 2), ab(2, cols);
    for (std::size_t r = 0; r < rows; ++r) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double v = dy(r, c) * gamma(0, c);
        g(r, c) = v;
        s1 += v;
        s2 += xh(r, c) * v;
        ab(0, c) += dy(r, c) * xh(r, c);
        ab(1, c) += dy(r, c);
      }
      s(r, 0) = s1;
      s(r, 1) = s2;
    }
    g_hat[i][j] = std::move(g);
    sums[i][j] = std::move(s);
    affine_partial[j][i] = std::move(ab);
  });
  Grid totals(q);
  for (int i = 0; i < q; ++i) {
    totals[i] = mesh.all_reduce_row(i, sums[i], ReduceOp::Sum, CostClass::Auxiliary);
  }

  LayerNormGrads out;
  out.x_grad = ShardedMatrix(mesh, out_grad.global_rows(), out_grad.global_cols());
  mesh.for_each_device([&](int i, int j) {
    const Matrix& g = g_hat[i][j];
    const Matrix& xh = ctx.x_hat.local(i, j);
    const Matrix& rstd = ctx.rstd[mesh.index(i, j)];
    const Matrix& tot = totals[i][j];
    Matrix& dx = out.x_grad.local(i, j);
    for (std::size_t r = 0; r < rows; ++r) {
      const double mg = tot(r, 0) / h;
      const double mxg = tot(r, 1) / h;
      for (std::size_t c = 0; c < cols; ++c) {
        dx(r, c) = rstd(r, 0) * (g(r, c) - mg - xh(r, c) * mxg);
      }
    }
  });

  out.gamma_grad = HostedVector(mesh, ctx.hidden);
  out.beta_grad = HostedVector(mesh, ctx.hidden);
  for (int j = 0; j < q; ++j) {
    const Matrix ab = mesh.reduce_col(j, 0, affine_partial[j], CostClass::Auxiliary);
    out.gamma_grad.shard(j) = ab.block(0, 0, 1, cols);
    out.beta_grad.shard(j) = ab.block(1, 0, 1, cols);
  }
  return out;
}

// --- attention ---------------------------------------------------------------

std::pair<ShardedMatrix, AttentionContext> attention_forward(
    Mesh& mesh, const ShardedMatrix& x, const ShardedMatrix& w_qkv, const HostedVector& b_qkv,
    const ShardedMatrix& w_dense, const HostedVector& b_dense, const ModelConfig& cfg,
    Workspace& ws) {
  cfg.validate_for_mesh(mesh.q());
  require_on_mesh(mesh, x, "attention_forward");
  if (x.global_rows() != cfg.b * cfg.s || x.global_cols() != cfg.h) {
    throw ShapeError(fmt::format("attention_forward: input is {}x{}, config wants {}x{}",
                                 x.global_rows(), x.global_cols(), cfg.b * cfg.s, cfg.h));
  }
  const int q = mesh.q();
  const std::size_t s = cfg.s;
  const std::size_t d = cfg.head_dim();
  const std::size_t width = cfg.h / q;
  const std::size_t seqs = cfg.b / q;
  const std::size_t local_heads = cfg.n / q;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  AttentionContext ctx;
  ctx.input = x;
  ctx.qkv = bias_add_forward(mesh, summa_ab(mesh, x, w_qkv, ws), b_qkv);
  ctx.context = ShardedMatrix(mesh, x.global_rows(), cfg.h);
  ctx.probs.resize(mesh.p());
  ctx.seq = s;
  ctx.heads = cfg.n;
  ctx.mesh_id = mesh.id();

  mesh.for_each_device([&](int i, int j) {
    const Matrix& blk = ctx.qkv.local(i, j);
    Matrix& out = ctx.context.local(i, j);
    auto& probs = ctx.probs[mesh.index(i, j)];
    probs.clear();
    probs.reserve(seqs * local_heads);
    for (std::size_t t = 0; t < seqs; ++t) {
      for (std::size_t k = 0; k < local_heads; ++k) {
        const Matrix qh = blk.block(t * s, k * d, s, d);
        const Matrix kh = blk.block(t * s, width + k * d, s, d);
        const Matrix vh = blk.block(t * s, 2 * width + k * d, s, d);
        Matrix scores = matmul_nt(qh, kh);
        scores *= scale;
        Matrix p = softmax_rows(scores);
        out.set_block(t * s, k * d, matmul(p, vh));
        probs.push_back(std::move(p));
      }
    }
    mesh.add_macs(i, j, seqs * local_heads * 2 * s * s * d);
  });

  ShardedMatrix y = bias_add_forward(mesh, summa_ab(mesh, ctx.context, w_dense, ws), b_dense);
  return {std::move(y), std::move(ctx)};
}

AttentionGrads attention_backward(Mesh& mesh, const ShardedMatrix& out_grad,
                                  const AttentionContext& ctx, const ShardedMatrix& w_qkv,
                                  const ShardedMatrix& w_dense, Workspace& ws) {
  require_context(!ctx.empty() && ctx.mesh_id == mesh.id() &&
                      out_grad.global_rows() == ctx.context.global_rows() &&
                      out_grad.global_cols() == ctx.context.global_cols(),
                  "attention_backward");
  const int q = mesh.q();
  const std::size_t s = ctx.seq;
  const std::size_t h = ctx.context.global_cols();
  const std::size_t d = h / ctx.heads;
  const std::size_t width = h / q;
  const std::size_t seqs = ctx.context.block_rows() / s;
  const std::size_t local_heads = ctx.heads / q;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  AttentionGrads g;
  g.b_dense_grad = bias_grad(mesh, out_grad);
  ProductGrads dense = summa_ab_backward(mesh, out_grad, ctx.context, w_dense, ws);
  g.w_dense_grad = std::move(dense.b_grad);
  const ShardedMatrix& context_grad = dense.a_grad;

  ShardedMatrix qkv_grad(mesh, ctx.qkv.global_rows(), ctx.qkv.global_cols());
  mesh.for_each_device([&](int i, int j) {
    const Matrix& blk = ctx.qkv.local(i, j);
    const Matrix& dctx = context_grad.local(i, j);
    const auto& probs = ctx.probs[mesh.index(i, j)];
    Matrix& out = qkv_grad.local(i, j);
    for (std::size_t t = 0; t < seqs; ++t) {
      for (std::size_t k = 0; k < local_heads; ++k) {
        const Matrix& p = probs[t * local_heads + k];
        const Matrix qh = blk.block(t * s, k * d, s, d);
        const Matrix kh = blk.block(t * s, width + k * d, s, d);
        const Matrix vh = blk.block(t * s, 2 * width + k * d, s, d);
        const Matrix dc = dctx.block(t * s, k * d, s, d);
        const Matrix dp = matmul_nt(dc, vh);
        const Matrix dv = matmul_tn(p, dc);
        Matrix ds = softmax_rows_backward(p, dp);
        ds *= scale;
        out.set_block(t * s, k * d, matmul(ds, kh));
        out.set_block(t * s, width + k * d, matmul_tn(ds, qh));
        out.set_block(t * s, 2 * width + k * d, dv);
      }
    }
    mesh.add_macs(i, j, seqs * local_heads * 4 * s * s * d);
  });

  g.b_qkv_grad = bias_grad(mesh, qkv_grad);
  ProductGrads proj = summa_ab_backward(mesh, qkv_grad, ctx.input, w_qkv, ws);
  g.x_grad = std::move(proj.a_grad);
  g.w_qkv_grad = std::move(proj.b_grad);
  return g;
}

// --- MLP ---------------------------------------------------------------------

std::pair<ShardedMatrix, MlpContext> mlp_forward(Mesh& mesh, const ShardedMatrix& x,
                                                 const ShardedMatrix& w1, const HostedVector& b1,
                                                 const ShardedMatrix& w2, const HostedVector& b2,
                                                 Workspace& ws, bool compute_output) {
  require_on_mesh(mesh, x, "mlp_forward");
  MlpContext ctx;
  ctx.input = x;
  ctx.pre_act = bias_add_forward(mesh, summa_ab(mesh, x, w1, ws), b1);
  ctx.act = ShardedMatrix(mesh, ctx.pre_act.global_rows(), ctx.pre_act.global_cols());
  mesh.for_each_device([&](int i, int j) { ctx.act.local(i, j) = gelu(ctx.pre_act.local(i, j)); });
  ctx.mesh_id = mesh.id();
  ShardedMatrix y;
  if (compute_output) y = bias_add_forward(mesh, summa_ab(mesh, ctx.act, w2, ws), b2);
  return {std::move(y), std::move(ctx)};
}

MlpGrads mlp_backward(Mesh& mesh, const ShardedMatrix& out_grad, const MlpContext& ctx,
                      const ShardedMatrix& w1, const ShardedMatrix& w2, Workspace& ws) {
  require_context(!ctx.empty() && ctx.mesh_id == mesh.id() &&
                      out_grad.global_rows() == ctx.input.global_rows() &&
                      out_grad.global_cols() == w2.global_cols(),
                  "mlp_backward");
  MlpGrads g;
  g.b2_grad = bias_grad(mesh, out_grad);
  ProductGrads second = summa_ab_backward(mesh, out_grad, ctx.act, w2, ws);
  g.w2_grad = std::move(second.b_grad);
  ShardedMatrix pre_grad(mesh, ctx.pre_act.global_rows(), ctx.pre_act.global_cols());
  mesh.for_each_device([&](int i, int j) {
    pre_grad.local(i, j) = gelu_backward(ctx.pre_act.local(i, j), second.a_grad.local(i, j));
  });
  g.b1_grad = bias_grad(mesh, pre_grad);
  ProductGrads first = summa_ab_backward(mesh, pre_grad, ctx.input, w1, ws);
  g.x_grad = std::move(first.a_grad);
  g.w1_grad = std::move(first.b_grad);
  return g;
}

// --- transformer layer -------------------------------------------------------

std::pair<ShardedMatrix, LayerContext> transformer_layer_forward(Mesh& mesh, const ShardedMatrix& x,
                                                                 const ShardedLayer& params,
                                                                 const ModelConfig& cfg,
                                                                 Workspace& ws,
                                                                 LayerForwardOptions opts) {
  LayerContext ctx;
  auto [attn_in, ln1] = layernorm_forward(mesh, x, params.ln1_gamma, params.ln1_beta, cfg.eps);
  ctx.ln1 = std::move(ln1);
  auto [attn_out, attn] = attention_forward(mesh, attn_in, params.w_qkv, params.b_qkv,
                                            params.w_dense, params.b_dense, cfg, ws);
  ctx.attn = std::move(attn);
  ShardedMatrix y = x;
  y += attn_out;
  auto [mlp_in, ln2] = layernorm_forward(mesh, y, params.ln2_gamma, params.ln2_beta, cfg.eps);
  ctx.ln2 = std::move(ln2);
  auto [mlp_out, mlp] = mlp_forward(mesh, mlp_in, params.w_fc1, params.b_fc1, params.w_fc2,
                                    params.b_fc2, ws, !opts.skip_output_product);
  ctx.mlp = std::move(mlp);
  if (opts.skip_output_product) return {ShardedMatrix(), std::move(ctx)};
  y += mlp_out;
  return {std::move(y), std::move(ctx)};
}

LayerGrads transformer_layer_backward(Mesh& mesh, const ShardedMatrix& y_grad,
                                      const LayerContext& ctx, const ShardedLayer& params,
                                      Workspace& ws) {
  require_context(!ctx.empty() && !ctx.ln1.empty() && !ctx.attn.empty() && !ctx.ln2.empty(),
                  "transformer_layer_backward");
  LayerGrads out;
  ShardedLayer& g = out.params;

  MlpGrads mg = mlp_backward(mesh, y_grad, ctx.mlp, params.w_fc1, params.w_fc2, ws);
  LayerNormGrads l2 = layernorm_backward(mesh, mg.x_grad, ctx.ln2);
  ShardedMatrix mid_grad = y_grad;
  mid_grad += l2.x_grad;

  AttentionGrads ag = attention_backward(mesh, mid_grad, ctx.attn, params.w_qkv, params.w_dense, ws);
  LayerNormGrads l1 = layernorm_backward(mesh, ag.x_grad, ctx.ln1);
  out.x_grad = std::move(mid_grad);
  out.x_grad += l1.x_grad;

  g.ln1_gamma = std::move(l1.gamma_grad);
  g.ln1_beta = std::move(l1.beta_grad);
  g.w_qkv = std::move(ag.w_qkv_grad);
  g.b_qkv = std::move(ag.b_qkv_grad);
  g.w_dense = std::move(ag.w_dense_grad);
  g.b_dense = std::move(ag.b_dense_grad);
  g.ln2_gamma = std::move(l2.gamma_grad);
  g.ln2_beta = std::move(l2.beta_grad);
  g.w_fc1 = std::move(mg.w1_grad);
  g.b_fc1 = std::move(mg.b1_grad);
  g.w_fc2 = std::move(mg.w2_grad);
  g.b_fc2 = std::move(mg.b2_grad);
  return out;
}

// --- embedding, lm-head ------------------------------------------------------

namespace {

void check_row_tokens(const Mesh& mesh, std::span<const TokenGrid> row_tokens, std::size_t rows,
                      std::size_t vocab, const char* what) {
  if (row_tokens.size() != static_cast<std::size_t>(mesh.q())) {
    throw ShapeError(fmt::format("{}: expected {} token slices, got {}", what, mesh.q(),
                                 row_tokens.size()));
  }
  for (const auto& t : row_tokens) {
    if (t.ids.size() != rows) {
      throw ShapeError(fmt::format("{}: token slice has {} ids for {} rows", what, t.ids.size(),
                                   rows));
    }
    for (auto id : t.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
        throw RangeError(fmt::format("{}: token id {} outside [0, {})", what, id, vocab));
      }
    }
  }
}

}  // namespace

ShardedMatrix embedding_forward(Mesh& mesh, std::span<const TokenGrid> row_tokens,
                                const ShardedMatrix& table, std::size_t vocab, Workspace& ws) {
  require_on_mesh(mesh, table, "embedding_forward");
  if (vocab > table.global_rows()) throw ShapeError("embedding_forward: vocab exceeds table rows");
  const int q = mesh.q();
  const std::size_t rows = row_tokens.empty() ? 0 : row_tokens[0].ids.size();
  check_row_tokens(mesh, row_tokens, rows, vocab, "embedding_forward");
  const std::size_t block = table.block_rows();

  ShardedMatrix out(mesh, rows * q, table.global_cols());
  for (int l = 0; l < q; ++l) {
    Grid recv(q);
    for (int j = 0; j < q; ++j) recv[j] = mesh.broadcast_col(j, l, table.local(l, j));
    mesh.for_each_device([&](int i, int j) {
      const Matrix& blk = ws.stage(mesh.index(i, j), Workspace::Slot::Right, recv[j][i]);
      Matrix& dst = out.local(i, j);
      const auto& ids = row_tokens[i].ids;
      for (std::size_t r = 0; r < rows; ++r) {
        const auto id = static_cast<std::size_t>(ids[r]);
        if (id / block != static_cast<std::size_t>(l)) continue;
        const auto src = blk.row(id - l * block);
        std::copy(src.begin(), src.end(), dst.row(r).begin());
      }
    });
  }
  ws.release_all();
  return out;
}

ShardedMatrix embedding_backward(Mesh& mesh, const ShardedMatrix& out_grad,
                                 std::span<const TokenGrid> row_tokens,
                                 const ShardedMatrix& table) {
  require_on_mesh(mesh, out_grad, "embedding_backward");
  require_on_mesh(mesh, table, "embedding_backward");
  const int q = mesh.q();
  const std::size_t rows = out_grad.block_rows();
  check_row_tokens(mesh, row_tokens, rows, table.global_rows(), "embedding_backward");
  const std::size_t block = table.block_rows();
  const std::size_t cols = table.block_cols();

  ShardedMatrix grad(mesh, table.global_rows(), table.global_cols());
  for (int l = 0; l < q; ++l) {
    Grid partial = make_grid(q);  // [col][row]
    mesh.for_each_device([&](int i, int j) {
      Matrix tmp(block, cols);
      const Matrix& g = out_grad.local(i, j);
      const auto& ids = row_tokens[i].ids;
      for (std::size_t r = 0; r < rows; ++r) {
        const auto id = static_cast<std::size_t>(ids[r]);
        if (id / block != static_cast<std::size_t>(l)) continue;
        auto dst = tmp.row(id - l * block);
        const auto src = g.row(r);
        for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
      }
      partial[j][i] = std::move(tmp);
    });
    for (int j = 0; j < q; ++j) grad.local(l, j) = mesh.reduce_col(j, l, partial[j]);
  }
  return grad;
}

ShardedMatrix lm_head_logits(Mesh& mesh, const ShardedMatrix& x, const ShardedMatrix& table,
                             Workspace& ws) {
  return summa_abt(mesh, x, table, ws);
}

// --- cross entropy -----------------------------------------------------------

std::pair<double, CrossEntropyContext> cross_entropy_forward(Mesh& mesh,
                                                             const ShardedMatrix& logits,
                                                             std::span<const TokenGrid> labels,
                                                             std::size_t vocab) {
  require_on_mesh(mesh, logits, "cross_entropy_forward");
  const int q = mesh.q();
  const std::size_t rows = logits.block_rows();
  const std::size_t cols = logits.block_cols();
  if (vocab == 0 || vocab > logits.global_cols()) {
    throw ShapeError("cross_entropy_forward: vocab does not fit the logit columns");
  }
  check_row_tokens(mesh, labels, rows, vocab, "cross_entropy_forward");
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();

  auto valid_cols = [&](int j) {
    const std::size_t first = static_cast<std::size_t>(j) * cols;
    return first >= vocab ? std::size_t{0} : std::min(cols, vocab - first);
  };

  Grid maxes = make_grid(q);
  mesh.for_each_device([&](int i, int j) {
    const Matrix& x = logits.local(i, j);
    const std::size_t nv = valid_cols(j);
    Matrix m(rows, 1, kNegInf);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < nv; ++c) m(r, 0) = std::max(m(r, 0), x(r, c));
    }
    maxes[i][j] = std::move(m);
  });
  Grid row_max(q);
  for (int i = 0; i < q; ++i) {
    row_max[i] = mesh.all_reduce_row(i, maxes[i], ReduceOp::Max, CostClass::Auxiliary);
  }

  CrossEntropyContext ctx;
  ctx.probs.resize(mesh.p());
  ctx.labels.assign(labels.begin(), labels.end());
  ctx.tokens = logits.global_rows();
  ctx.logit_rows = logits.global_rows();
  ctx.logit_cols = logits.global_cols();
  ctx.mesh_id = mesh.id();

  // Packed [sum exp(x - max), x_label - max] per token.
  Grid sums = make_grid(q);
  mesh.for_each_device([&](int i, int j) {
    const Matrix& x = logits.local(i, j);
    const Matrix& m = row_max[i][j];
    const std::size_t nv = valid_cols(j);
    const std::size_t first = static_cast<std::size_t>(j) * cols;
    Matrix e(rows, cols);
    Matrix s(rows, 2);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < nv; ++c) {
        e(r, c) = std::exp(x(r, c) - m(r, 0));
        acc += e(r, c);
      }
      s(r, 0) = acc;
      const auto label = static_cast<std::size_t>(labels[i].ids[r]);
      if (label >= first && label < first + cols) s(r, 1) = x(r, label - first) - m(r, 0);
    }
    ctx.probs[mesh.index(i, j)] = std::move(e);
    sums[i][j] = std::move(s);
  });
  Grid totals(q);
  for (int i = 0; i < q; ++i) {
    totals[i] = mesh.all_reduce_row(i, sums[i], ReduceOp::Sum, CostClass::Auxiliary);
  }

  Grid row_loss = make_grid(q);
  mesh.for_each_device([&](int i, int j) {
    const Matrix& tot = totals[i][j];
    Matrix& p = ctx.probs[mesh.index(i, j)];
    double acc = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      for (double& v : p.row(r)) v /= tot(r, 0);
      acc += std::log(tot(r, 0)) - tot(r, 1);
    }
    row_loss[i][j] = Matrix(1, 1, acc);
  });

  ctx.token_loss.resize(ctx.tokens);
  for (int i = 0; i < q; ++i) {
    const Matrix& tot = totals[i][0];
    for (std::size_t r = 0; r < rows; ++r) {
      ctx.token_loss[i * rows + r] = std::log(tot(r, 0)) - tot(r, 1);
    }
  }
  std::vector<Matrix> col0(q);
  for (int i = 0; i < q; ++i) col0[i] = row_loss[i][0];
  const Matrix total = mesh.reduce_col(0, 0, col0, CostClass::Auxiliary);
  return {total(0, 0) / static_cast<double>(ctx.tokens), std::move(ctx)};
}

ShardedMatrix cross_entropy_backward(Mesh& mesh, const CrossEntropyContext& ctx, double upstream) {
  require_context(!ctx.empty() && ctx.mesh_id == mesh.id(), "cross_entropy_backward");
  ShardedMatrix grad(mesh, ctx.logit_rows, ctx.logit_cols);
  const std::size_t cols = grad.block_cols();
  const double scale = upstream / static_cast<double>(ctx.tokens);
  mesh.for_each_device([&](int i, int j) {
    Matrix& g = grad.local(i, j);
    g.assign(ctx.probs[mesh.index(i, j)]);
    const std::size_t first = static_cast<std::size_t>(j) * cols;
    const auto& ids = ctx.labels[i].ids;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const auto label = static_cast<std::size_t>(ids[r]);
      if (label >= first && label < first + cols) g(r, label - first) -= 1.0;
    }
    g *= scale;
  });
  return grad;
}

// --- classifier --------------------------------------------------------------

std::pair<double, ClassifierContext> classifier_forward(Mesh& mesh, const ShardedMatrix& x,
                                                        const HostedVector& weight,
                                                        std::span<const int> labels,
                                                        std::size_t position, std::size_t seq) {
  require_on_mesh(mesh, x, "classifier_forward");
  require_on_mesh(mesh, weight, "classifier_forward");
  const int q = mesh.q();
  if (seq == 0 || x.global_rows() % seq != 0) {
    throw ShapeError("classifier_forward: rows are not a whole number of sequences");
  }
  if (position >= seq) {
    throw RangeError(fmt::format("classifier_forward: position {} outside [0, {})", position, seq));
  }
  const std::size_t batch = x.global_rows() / seq;
  if (labels.size() != batch) {
    throw ShapeError(fmt::format("classifier_forward: {} labels for {} sequences", labels.size(),
                                 batch));
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw RangeError(fmt::format("classifier_forward: label {}", y));
  }
  if (weight.length() != x.global_cols()) {
    throw ShapeError("classifier_forward: weight length differs from hidden size");
  }
  const std::size_t seqs = x.block_rows() / seq;
  const std::size_t cols = x.block_cols();

  ClassifierContext ctx;
  ctx.selected.resize(mesh.p());
  ctx.weight.resize(mesh.p());
  ctx.logits.resize(q);
  ctx.labels.resize(q);
  ctx.position = position;
  ctx.seq = seq;
  ctx.batch = batch;
  ctx.hidden = x.global_cols();
  ctx.mesh_id = mesh.id();
  for (int i = 0; i < q; ++i) {
    ctx.labels[i].assign(labels.begin() + static_cast<std::ptrdiff_t>(i * seqs),
                         labels.begin() + static_cast<std::ptrdiff_t>((i + 1) * seqs));
  }

  std::vector<Matrix> shards(q);
  for (int j = 0; j < q; ++j) shards[j] = weight.shard(j);
  const Grid recv = broadcast_hosted(mesh, shards);

  Grid partial = make_grid(q);
  mesh.for_each_device([&](int i, int j) {
    const int dev = mesh.index(i, j);
    Matrix sel(seqs, cols);
    for (std::size_t t = 0; t < seqs; ++t) {
      const auto src = x.local(i, j).row(t * seq + position);
      std::copy(src.begin(), src.end(), sel.row(t).begin());
    }
    ctx.weight[dev] = recv[j][i];
    partial[i][j] = matmul_nt(sel, ctx.weight[dev]);
    ctx.selected[dev] = std::move(sel);
    mesh.add_macs(i, j, seqs * cols);
  });

  std::vector<Matrix> row_loss(q);
  for (int i = 0; i < q; ++i) {
    ctx.logits[i] = mesh.all_reduce_row(i, partial[i], ReduceOp::Sum, CostClass::Auxiliary)[0];
    double acc = 0.0;
    for (std::size_t t = 0; t < seqs; ++t) {
      const double z = ctx.logits[i](t, 0);
      acc += softplus(z) - ctx.labels[i][t] * z;
    }
    row_loss[i] = Matrix(1, 1, acc);
  }
  const Matrix total = mesh.reduce_col(0, 0, row_loss, CostClass::Auxiliary);
  return {total(0, 0) / static_cast<double>(batch), std::move(ctx)};
}

ClassifierGrads classifier_backward(Mesh& mesh, const ClassifierContext& ctx, double upstream) {
  require_context(!ctx.empty() && ctx.mesh_id == mesh.id(), "classifier_backward");
  const int q = mesh.q();
  const std::size_t seqs = ctx.batch / q;
  const double scale = upstream / static_cast<double>(ctx.batch);

  ClassifierGrads g;
  g.x_grad = ShardedMatrix(mesh, ctx.batch * ctx.seq, ctx.hidden);
  Grid partial = make_grid(q);  // [col][row]
  mesh.for_each_device([&](int i, int j) {
    const int dev = mesh.index(i, j);
    const Matrix& w = ctx.weight[dev];
    const Matrix& sel = ctx.selected[dev];
    Matrix& dx = g.x_grad.local(i, j);
    Matrix dw(1, w.cols());
    for (std::size_t t = 0; t < seqs; ++t) {
      const double dz = (sigmoid(ctx.logits[i](t, 0)) - ctx.labels[i][t]) * scale;
      auto dst = dx.row(t * ctx.seq + ctx.position);
      for (std::size_t c = 0; c < w.cols(); ++c) {
        dst[c] = dz * w(0, c);
        dw(0, c) += dz * sel(t, c);
      }
    }
    partial[j][i] = std::move(dw);
  });
  g.weight_grad = HostedVector(mesh, ctx.hidden);
  for (int j = 0; j < q; ++j) {
    g.weight_grad.shard(j) = mesh.reduce_col(j, 0, partial[j], CostClass::Auxiliary);
  }
  return g;
}

}  // namespace tp2d

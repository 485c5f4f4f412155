// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tp2d/model.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include <fmt/format.h>

#include "tp2d/error.hpp"
#include "tp2d/layers.hpp"

namespace tp2d {

namespace {

void check_inputs(const Mesh& mesh, const ShardedModel& model, const Batch& batch,
                  const ModelConfig& cfg) {
  cfg.validate_for_mesh(mesh.q());
  if (model.layers.size() != cfg.layers) {
    throw ConfigError(fmt::format("model has {} layers, config {}", model.layers.size(),
                                  cfg.layers));
  }
  if (model.embedding.mesh_id() != mesh.id()) {
    throw ConfigError("model is distributed on another mesh");
  }
  if (batch.tokens.batch != cfg.b || batch.tokens.seq != cfg.s ||
      batch.labels.batch != cfg.b || batch.labels.seq != cfg.s) {
    throw ShapeError("batch does not match the config");
  }
}

struct HeadOutputs {
  double lm_loss = 0.0;
  double cls_loss = 0.0;
  ShardedMatrix final_hidden;
  ShardedMatrix logits;
  LayerNormContext lnf;
  CrossEntropyContext ce;
  ClassifierContext cls;
};

HeadOutputs head_forward(Mesh& mesh, const ShardedMatrix& x, const ShardedModel& model,
                         const Batch& batch, const std::vector<TokenGrid>& label_rows,
                         const ModelConfig& cfg, Workspace& ws) {
  HeadOutputs out;
  auto [f, lnf] = layernorm_forward(mesh, x, model.lnf_gamma, model.lnf_beta, cfg.eps);
  out.final_hidden = std::move(f);
  out.lnf = std::move(lnf);
  out.logits = lm_head_logits(mesh, out.final_hidden, model.embedding, ws);
  auto [lm, ce] = cross_entropy_forward(mesh, out.logits, label_rows, cfg.v);
  out.lm_loss = lm;
  out.ce = std::move(ce);
  if (batch.has_classification()) {
    auto [cl, cls] = classifier_forward(mesh, out.final_hidden, model.cls_weight,
                                        batch.cls_labels, batch.cls_position, cfg.s);
    out.cls_loss = cl;
    out.cls = std::move(cls);
  }
  return out;
}

}  // namespace

DistributedResult distributed_loss_and_grads(Mesh& mesh, ShardedModel& model, const Batch& batch,
                                             const ModelConfig& cfg, Workspace& ws,
                                             const DistributedOptions& opts) {
  check_inputs(mesh, model, batch, cfg);
  const auto token_rows = split_rows(batch.tokens, mesh.q());
  const auto label_rows = split_rows(batch.labels, mesh.q());

  const ShardedMatrix x0 = embedding_forward(mesh, token_rows, model.embedding, cfg.v, ws);
  ShardedMatrix x;
  std::vector<LayerContext> contexts;
  CheckpointStore store;
  if (opts.checkpointing) {
    x = checkpointed_forward(mesh, model.layers, x0, store, cfg, ws, opts.tracker);
  } else {
    x = x0;
    contexts.reserve(cfg.layers);
    for (const auto& layer : model.layers) {
      auto [y, ctx] = transformer_layer_forward(mesh, x, layer, cfg, ws);
      contexts.push_back(std::move(ctx));
      x = std::move(y);
    }
  }
  HeadOutputs head = head_forward(mesh, x, model, batch, label_rows, cfg, ws);

  DistributedResult r;
  r.lm_loss = head.lm_loss;
  r.cls_loss = head.cls_loss;
  r.loss = head.lm_loss + head.cls_loss;
  r.grads = ShardedModel::zeros(mesh, cfg);

  const ShardedMatrix logits_grad = cross_entropy_backward(mesh, head.ce, 1.0);
  ProductGrads pg = summa_abt_backward(mesh, logits_grad, head.final_hidden, model.embedding, ws);
  ShardedMatrix hidden_grad = std::move(pg.a_grad);
  ShardedMatrix table_grad = std::move(pg.b_grad);
  if (batch.has_classification()) {
    ClassifierGrads cg = classifier_backward(mesh, head.cls, 1.0);
    hidden_grad += cg.x_grad;
    r.grads.cls_weight = std::move(cg.weight_grad);
  }
  LayerNormGrads lnf = layernorm_backward(mesh, hidden_grad, head.lnf);
  r.grads.lnf_gamma = std::move(lnf.gamma_grad);
  r.grads.lnf_beta = std::move(lnf.beta_grad);

  ShardedMatrix g = std::move(lnf.x_grad);
  if (opts.checkpointing) {
    CheckpointedGrads cg = checkpointed_backward(mesh, model.layers, g, store, cfg, ws,
                                                 opts.tracker, opts.checkpoint);
    g = std::move(cg.input_grad);
    if (opts.checkpoint.eager_update) {
      r.grads.layers.clear();
    } else {
      r.grads.layers = std::move(cg.layers);
    }
  } else {
    for (std::size_t k = cfg.layers; k-- > 0;) {
      LayerGrads lg = transformer_layer_backward(mesh, g, contexts[k], model.layers[k], ws);
      g = std::move(lg.x_grad);
      r.grads.layers[k] = std::move(lg.params);
    }
  }
  table_grad += embedding_backward(mesh, g, token_rows, model.embedding);
  r.grads.embedding = std::move(table_grad);
  return r;
}

double distributed_loss(Mesh& mesh, const ShardedModel& model, const Batch& batch,
                        const ModelConfig& cfg, Workspace& ws) {
  check_inputs(mesh, model, batch, cfg);
  const auto token_rows = split_rows(batch.tokens, mesh.q());
  const auto label_rows = split_rows(batch.labels, mesh.q());
  ShardedMatrix x = embedding_forward(mesh, token_rows, model.embedding, cfg.v, ws);
  for (const auto& layer : model.layers) x = transformer_layer_forward(mesh, x, layer, cfg, ws).first;
  const HeadOutputs head = head_forward(mesh, x, model, batch, label_rows, cfg, ws);
  return head.lm_loss + head.cls_loss;
}

// --- checkpoint file ---------------------------------------------------------

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char bytes[8];
  for (int k = 0; k < 8; ++k) bytes[k] = static_cast<unsigned char>(v >> (8 * k));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw ConfigError("checkpoint: truncated stream");
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(bytes[k]) << (8 * k);
  return v;
}

}  // namespace

void save_checkpoint(const ModelWeights& w, const ModelConfig& cfg, std::ostream& out) {
  for (std::uint64_t v : {kCheckpointMagic, kCheckpointVersion, std::uint64_t{cfg.b},
                          std::uint64_t{cfg.s}, std::uint64_t{cfg.h}, std::uint64_t{cfg.n},
                          std::uint64_t{cfg.v}, std::uint64_t{cfg.layers},
                          std::bit_cast<std::uint64_t>(cfg.eps)}) {
    put_u64(out, v);
  }
  ModelWeights::for_each(w, [&](const std::string&, const Matrix& m) {
    for (double x : m.data()) put_u64(out, std::bit_cast<std::uint64_t>(x));
  });
  if (!out) throw ConfigError("checkpoint: write failed");
}

LoadedCheckpoint load_checkpoint(std::istream& in) {
  if (get_u64(in) != kCheckpointMagic) throw ConfigError("checkpoint: bad magic");
  const std::uint64_t version = get_u64(in);
  if (version != kCheckpointVersion) {
    throw ConfigError(fmt::format("checkpoint: unsupported version {}", version));
  }
  LoadedCheckpoint c;
  c.cfg.b = get_u64(in);
  c.cfg.s = get_u64(in);
  c.cfg.h = get_u64(in);
  c.cfg.n = get_u64(in);
  c.cfg.v = get_u64(in);
  c.cfg.layers = get_u64(in);
  c.cfg.eps = std::bit_cast<double>(get_u64(in));
  c.cfg.validate();
  c.weights = ModelWeights::zeros(c.cfg);
  ModelWeights::for_each(c.weights, [&](const std::string&, Matrix& m) {
    for (double& x : m.data()) x = std::bit_cast<double>(get_u64(in));
  });
  return c;
}

}  // namespace tp2d

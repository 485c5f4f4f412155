// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tp2d/membuf.hpp"

#include <algorithm>
#include <ostream>

#include <fmt/format.h>

#include "tp2d/error.hpp"

namespace tp2d {

std::string_view to_string(BufferCategory c) {
  switch (c) {
    case BufferCategory::Checkpoint: return "checkpoint";
    case BufferCategory::Forward: return "forward";
    case BufferCategory::Backward: return "backward";
    case BufferCategory::Workspace: return "workspace";
    case BufferCategory::ParamGrad: return "param_grad";
    case BufferCategory::Conjunction: return "conjunction";
    case BufferCategory::Free: return "free";
    case BufferCategory::Params: return "params";
  }
  return "unknown";
}

BufferPlan plan_buffers(const ModelConfig& cfg, const MeshConfig& mesh) {
  mesh.validate();
  cfg.validate_for_mesh(mesh.q);
  const std::size_t p = static_cast<std::size_t>(mesh.p());
  const std::size_t q = static_cast<std::size_t>(mesh.q);
  const std::size_t bs = cfg.b * cfg.s;
  const std::size_t h = cfg.h;
  const std::size_t v = cfg.padded_vocab(mesh.q);
  const std::size_t x = bs * h / p;

  BufferPlan plan;
  plan.forward_scalars = 9 * x;
  plan.backward_scalars = 7 * x;
  plan.conjunction_scalars = x;
  plan.checkpoint_scalars = cfg.layers * x;
  plan.merged_scalars = plan.forward_scalars + plan.backward_scalars - 2 * x;
  plan.param_grad_scalars = 12 * h * h / p + 13 * h / q;

  // Backward products stage no more than their forward product does.
  const auto stage = [&](std::size_t m, std::size_t k, std::size_t n) {
    return summa_staging_scalars(m, k, k, n, m, n, mesh.q);
  };
  plan.workspace_scalars = std::max({
      stage(bs, h, 3 * h),
      stage(bs, h, h),
      stage(bs, h, 4 * h),
      stage(bs, 4 * h, h),
      stage(bs, h, v),
  });
  return plan;
}

// ---------------------------------------------------------------------------

void Arena::acquire(std::size_t scalars) {
  const std::size_t next = in_use_ + scalars;
  if (capacity_ && next > *capacity_) {
    throw AccountingError(
        fmt::format("buffer overflow: {} scalars requested, plan allows {}", next, *capacity_));
  }
  in_use_ = next;
  peak_ = std::max(peak_, in_use_);
}

void Arena::release(std::size_t scalars) {
  if (scalars > in_use_) throw AccountingError("buffer release exceeds what is in use");
  in_use_ -= scalars;
}

void Arena::observe(std::size_t scalars) {
  if (capacity_ && scalars > *capacity_) {
    throw AccountingError(
        fmt::format("buffer overflow: observed {} scalars, plan allows {}", scalars, *capacity_));
  }
  peak_ = std::max(peak_, scalars);
}

std::size_t MemoryReport::max_peak(BufferCategory c) const {
  std::size_t m = 0;
  for (std::size_t d = 0; d < peaks.size(); ++d) m = std::max(m, peak(static_cast<int>(d), c));
  return m;
}

std::size_t MemoryReport::activation_peak(int device) const {
  return peak(device, BufferCategory::Checkpoint) + peak(device, BufferCategory::Forward) +
         peak(device, BufferCategory::Backward) + peak(device, BufferCategory::Conjunction);
}

void write_memory_csv(const MemoryReport& report, std::ostream& out) {
  out << "device,category,peak_scalars\n";
  for (std::size_t d = 0; d < report.peaks.size(); ++d) {
    for (std::size_t c = 0; c < kBufferCategories; ++c) {
      out << fmt::format("{},{},{}\n", d, to_string(static_cast<BufferCategory>(c)),
                         report.peaks[d][c]);
    }
  }
}

MemoryTracker::MemoryTracker(int devices) : arenas_(devices) {}

MemoryTracker::MemoryTracker(int devices, const BufferPlan& plan, const CheckpointOptions& opts,
                             std::size_t layers)
    : arenas_(devices) {
  for (auto& a : arenas_) {
    auto set = [&](BufferCategory c, std::size_t cap) {
      a[static_cast<std::size_t>(c)].set_capacity(cap);
    };
    set(BufferCategory::Checkpoint, plan.checkpoint_scalars);
    set(BufferCategory::Forward, opts.merge_buffers ? plan.merged_scalars : plan.forward_scalars);
    set(BufferCategory::Backward, opts.merge_buffers ? 0 : plan.backward_scalars);
    set(BufferCategory::Workspace, plan.workspace_scalars);
    set(BufferCategory::ParamGrad, plan.param_grad_scalars * (opts.eager_update ? 1 : layers));
    set(BufferCategory::Conjunction, plan.conjunction_scalars);
  }
}

void MemoryTracker::release_all(BufferCategory c) {
  for (int d = 0; d < devices(); ++d) at(d, c).release_all();
}

MemoryReport MemoryTracker::report() const {
  MemoryReport r;
  r.peaks.resize(arenas_.size());
  for (std::size_t d = 0; d < arenas_.size(); ++d) {
    for (std::size_t c = 0; c < kBufferCategories; ++c) r.peaks[d][c] = arenas_[d][c].peak();
  }
  return r;
}

const ShardedMatrix& CheckpointStore::at(std::size_t layer) const {
  if (layer >= saved_.size()) {
    throw StaleContextError(fmt::format("no checkpoint saved for layer {}", layer));
  }
  return saved_[layer];
}

std::size_t CheckpointStore::scalars_on(int row, int col) const {
  std::size_t total = 0;
  for (const auto& s : saved_) total += s.local(row, col).size();
  return total;
}

// ---------------------------------------------------------------------------

namespace {

std::size_t local_size(const ShardedMatrix& m, int i, int j) {
  return m.empty() ? 0 : m.local(i, j).size();
}

// Forward residency of one layer; see the table in the header.
void charge_forward(MemoryTracker& t, const Mesh& mesh, const LayerContext& ctx,
                    const ShardedMatrix& y) {
  const int q = mesh.q();
  for (int i = 0; i < q; ++i) {
    for (int j = 0; j < q; ++j) {
      const int d = mesh.index(i, j);
      const std::size_t x = ctx.attn.input.local(i, j).size();
      Arena& fwd = t.at(d, BufferCategory::Forward);
      fwd.acquire(ctx.attn.qkv.local(i, j).size());
      fwd.acquire(x);  // dense output, then the in-place residual
      fwd.acquire(ctx.mlp.pre_act.local(i, j).size());
      fwd.acquire(local_size(y, i, j));

      std::size_t probs = 0;
      for (const auto& pr : ctx.attn.probs[d]) probs += pr.size();
      Arena& free = t.at(d, BufferCategory::Free);
      free.acquire(ctx.ln1.x_hat.local(i, j).size() + x);  // normalized input and LN output
      free.acquire(2 * ctx.ln1.rstd[d].size());
      free.acquire(probs + ctx.attn.context.local(i, j).size());
      free.acquire(ctx.ln2.x_hat.local(i, j).size() + ctx.mlp.input.local(i, j).size());
      free.acquire(2 * ctx.ln2.rstd[d].size());
      free.acquire(ctx.mlp.act.local(i, j).size());
    }
  }
}

void charge_backward(MemoryTracker& t, const Mesh& mesh, const LayerContext& ctx, bool merged,
                     bool output_present) {
  const int q = mesh.q();
  for (int i = 0; i < q; ++i) {
    for (int j = 0; j < q; ++j) {
      const int d = mesh.index(i, j);
      const std::size_t x = ctx.attn.input.local(i, j).size();
      Arena* region = &t.at(d, BufferCategory::Backward);
      if (merged) {
        region = &t.at(d, BufferCategory::Forward);
        region->release(x);                      // dense output
        if (output_present) region->release(x);  // layer output
      }
      region->acquire(ctx.mlp.act.local(i, j).size());
      region->acquire(ctx.mlp.input.local(i, j).size());
      region->acquire(ctx.attn.context.local(i, j).size());
      region->acquire(x);
      t.at(d, BufferCategory::Free).acquire(ctx.attn.qkv.local(i, j).size());
    }
  }
}

void observe_workspace(MemoryTracker& t, const Workspace& ws) {
  for (int d = 0; d < t.devices(); ++d) t.at(d, BufferCategory::Workspace).observe(ws.peak(d));
}

}  // namespace

void account_parameters(MemoryTracker& tracker, const Mesh& mesh,
                        std::span<const ShardedLayer> layers) {
  for (int i = 0; i < mesh.q(); ++i) {
    for (int j = 0; j < mesh.q(); ++j) {
      for (const auto& l : layers) {
        tracker.at(mesh.index(i, j), BufferCategory::Params).acquire(l.local_scalars(i, j));
      }
    }
  }
}

ShardedMatrix checkpointed_forward(Mesh& mesh, std::span<const ShardedLayer> layers,
                                   const ShardedMatrix& x0, CheckpointStore& store,
                                   const ModelConfig& cfg, Workspace& ws,
                                   MemoryTracker* tracker) {
  store.clear();
  ShardedMatrix x = x0;
  for (const auto& layer : layers) {
    store.save(x);
    if (tracker != nullptr) {
      for (int i = 0; i < mesh.q(); ++i) {
        for (int j = 0; j < mesh.q(); ++j) {
          tracker->at(mesh.index(i, j), BufferCategory::Checkpoint).acquire(x.local(i, j).size());
        }
      }
      tracker->release_all(BufferCategory::Forward);
      tracker->release_all(BufferCategory::Free);
    }
    auto [y, ctx] = transformer_layer_forward(mesh, x, layer, cfg, ws);
    if (tracker != nullptr) charge_forward(*tracker, mesh, ctx, y);
    x = std::move(y);
  }
  if (tracker != nullptr) observe_workspace(*tracker, ws);
  return x;
}

CheckpointedGrads checkpointed_backward(Mesh& mesh, std::span<ShardedLayer> layers,
                                        const ShardedMatrix& out_grad,
                                        const CheckpointStore& store, const ModelConfig& cfg,
                                        Workspace& ws, MemoryTracker* tracker,
                                        const CheckpointOptions& opts) {
  if (store.size() != layers.size()) {
    throw StaleContextError(fmt::format("checkpointed_backward: {} checkpoints for {} layers",
                                        store.size(), layers.size()));
  }
  const int q = mesh.q();
  if (tracker != nullptr) {
    tracker->release_all(BufferCategory::Forward);
    tracker->release_all(BufferCategory::Free);
    for (int i = 0; i < q; ++i) {
      for (int j = 0; j < q; ++j) {
        tracker->at(mesh.index(i, j), BufferCategory::Conjunction).acquire(out_grad.local(i, j).size());
      }
    }
  }

  CheckpointedGrads out;
  if (!opts.eager_update) out.layers.resize(layers.size());
  ShardedMatrix grad = out_grad;
  const LayerForwardOptions fwd_opts{opts.skip_unneeded_recompute};
  for (std::size_t k = layers.size(); k-- > 0;) {
    if (tracker != nullptr) {
      tracker->release_all(BufferCategory::Forward);
      tracker->release_all(BufferCategory::Backward);
      tracker->release_all(BufferCategory::Free);
    }
    auto [y, ctx] = transformer_layer_forward(mesh, store.at(k), layers[k], cfg, ws, fwd_opts);
    if (tracker != nullptr) {
      charge_forward(*tracker, mesh, ctx, y);
      charge_backward(*tracker, mesh, ctx, opts.merge_buffers, !y.empty());
    }
    LayerGrads lg = transformer_layer_backward(mesh, grad, ctx, layers[k], ws);
    if (tracker != nullptr) {
      for (int i = 0; i < q; ++i) {
        for (int j = 0; j < q; ++j) {
          tracker->at(mesh.index(i, j), BufferCategory::ParamGrad)
              .acquire(lg.params.local_scalars(i, j));
        }
      }
    }
    if (opts.eager_update) {
      sgd_step(layers[k], lg.params, opts.learning_rate);
      if (tracker != nullptr) {
        for (int i = 0; i < q; ++i) {
          for (int j = 0; j < q; ++j) {
            tracker->at(mesh.index(i, j), BufferCategory::ParamGrad)
                .release(lg.params.local_scalars(i, j));
          }
        }
      }
    } else {
      out.layers[k] = std::move(lg.params);
    }
    // The input gradient is cloned into the conjunction region, replacing
    // the output gradient of this layer.
    grad = std::move(lg.x_grad);
  }
  if (tracker != nullptr) {
    tracker->release_all(BufferCategory::Forward);
    tracker->release_all(BufferCategory::Backward);
    tracker->release_all(BufferCategory::Free);
    observe_workspace(*tracker, ws);
  }
  out.input_grad = std::move(grad);
  return out;
}

}  // namespace tp2d

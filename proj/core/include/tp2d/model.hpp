// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Whole-model driver on the mesh: embedding, transformer stack, final layer
// norm, tied lm-head with cross entropy, and the optional classification
// head. Also the binary parameter checkpoint format.

#pragma once

#include <cstddef>
#include <iosfwd>

#include "tp2d/batch.hpp"
#include "tp2d/membuf.hpp"
#include "tp2d/mesh.hpp"
#include "tp2d/model_config.hpp"
#include "tp2d/params.hpp"
#include "tp2d/summa.hpp"

namespace tp2d {

struct DistributedOptions {
  /// Keep only layer inputs and recompute in backward.
  bool checkpointing = false;
  CheckpointOptions checkpoint{};
  MemoryTracker* tracker = nullptr;
};

struct DistributedResult {
  double loss = 0.0;
  double lm_loss = 0.0;
  double cls_loss = 0.0;
  /// Gradients in the mesh layout. With eager_update the layer entries are
  /// empty and the model's layers have already been stepped.
  ShardedModel grads;
};

DistributedResult distributed_loss_and_grads(Mesh& mesh, ShardedModel& model, const Batch& batch,
                                             const ModelConfig& cfg, Workspace& ws,
                                             const DistributedOptions& opts = {});

/// Forward only.
double distributed_loss(Mesh& mesh, const ShardedModel& model, const Batch& batch,
                        const ModelConfig& cfg, Workspace& ws);

// --- checkpoint file ---------------------------------------------------------
//
// Little-endian throughout. Header: nine u64 words
//   magic "TP2DCKPT", version, b, s, h, n, v, layers, bit pattern of eps (f64)
// followed by every tensor of ModelWeights::for_each in order as row-major f64.

inline constexpr std::uint64_t kCheckpointMagic = 0x54504b4344325054ULL;  // "TP2DCKPT"
inline constexpr std::uint64_t kCheckpointVersion = 1;

void save_checkpoint(const ModelWeights& w, const ModelConfig& cfg, std::ostream& out);

struct LoadedCheckpoint {
  ModelConfig cfg;
  ModelWeights weights;
};
/// Throws ConfigError on a bad magic, version, or truncated stream.
LoadedCheckpoint load_checkpoint(std::istream& in);

}  // namespace tp2d

// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Buffer planning and checkpointed execution of a layer stack.
//
// Memory is modelled, not allocated: every device has one arena per buffer
// category that records scalars in use and the high-water mark. Arenas with
// a planned capacity throw AccountingError when a run would exceed the plan.
//
// Residency per layer, in units of X = b*s*h/p scalars per device:
//   forward     QKV (3X), dense (X), h->4h (4X), 4h->h / layer output (X);
//               the residual adds are done in place in the dense and 4h->h
//               outputs
//   backward    gradients w.r.t. the SUMMA inputs: 4h->h (4X), h->4h (X),
//               dense (X), QKV (X)
//   conjunction the gradient handed from one layer to the previous (X)
//   checkpoint  one layer input per layer (X each)
//   free        layer-norm outputs and statistics, attention probabilities
//               and context, GELU output, attention-output gradients

#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "tp2d/layers.hpp"
#include "tp2d/mesh.hpp"
#include "tp2d/model_config.hpp"
#include "tp2d/params.hpp"
#include "tp2d/summa.hpp"

namespace tp2d {

enum class BufferCategory {
  Checkpoint,
  Forward,
  Backward,
  Workspace,
  ParamGrad,
  Conjunction,
  Free,
  Params,
};
inline constexpr std::size_t kBufferCategories = 8;

std::string_view to_string(BufferCategory c);

struct BufferPlan {
  std::size_t workspace_scalars = 0;
  std::size_t forward_scalars = 0;
  std::size_t backward_scalars = 0;
  std::size_t param_grad_scalars = 0;  // one layer, largest device (row 0)
  std::size_t conjunction_scalars = 0;
  std::size_t checkpoint_scalars = 0;  // all layers
  /// Forward and backward sharing one region: the dense and layer outputs
  /// are dead once backward of the layer starts.
  std::size_t merged_scalars = 0;
};

BufferPlan plan_buffers(const ModelConfig& cfg, const MeshConfig& mesh);

struct CheckpointOptions {
  /// Forward and backward buffers share one region sized merged_scalars.
  bool merge_buffers = false;
  /// Recompute skips the 4h->h product, whose output backward never reads.
  bool skip_unneeded_recompute = false;
  /// Apply an SGD step to each layer as soon as its gradients exist.
  bool eager_update = false;
  double learning_rate = 0.0;
};

class Arena {
 public:
  void set_capacity(std::optional<std::size_t> cap) { capacity_ = cap; }
  std::optional<std::size_t> capacity() const { return capacity_; }
  void acquire(std::size_t scalars);
  void release(std::size_t scalars);
  void release_all() { in_use_ = 0; }
  /// Records an externally measured high-water mark.
  void observe(std::size_t scalars);
  std::size_t in_use() const { return in_use_; }
  std::size_t peak() const { return peak_; }

 private:
  std::optional<std::size_t> capacity_;
  std::size_t in_use_ = 0;
  std::size_t peak_ = 0;
};

struct MemoryReport {
  std::vector<std::array<std::size_t, kBufferCategories>> peaks;  // per device

  std::size_t peak(int device, BufferCategory c) const {
    return peaks[device][static_cast<std::size_t>(c)];
  }
  /// Largest peak of the category over all devices.
  std::size_t max_peak(BufferCategory c) const;
  /// checkpoint + forward + backward + conjunction on one device.
  std::size_t activation_peak(int device) const;
};

/// Writes device,category,peak_scalars rows; device is the row-major rank.
void write_memory_csv(const MemoryReport& report, std::ostream& out);

class MemoryTracker {
 public:
  explicit MemoryTracker(int devices);
  /// Capacities from the plan for a stack of `layers` layers.
  MemoryTracker(int devices, const BufferPlan& plan, const CheckpointOptions& opts,
                std::size_t layers);

  Arena& at(int device, BufferCategory c) { return arenas_[device][static_cast<std::size_t>(c)]; }
  const Arena& at(int device, BufferCategory c) const {
    return arenas_[device][static_cast<std::size_t>(c)];
  }
  void release_all(BufferCategory c);
  int devices() const { return static_cast<int>(arenas_.size()); }
  MemoryReport report() const;

 private:
  std::vector<std::array<Arena, kBufferCategories>> arenas_;
};

class CheckpointStore {
 public:
  void save(ShardedMatrix x) { saved_.push_back(std::move(x)); }
  const ShardedMatrix& at(std::size_t layer) const;
  std::size_t size() const { return saved_.size(); }
  void clear() { saved_.clear(); }
  /// Scalars held by one device across all saved tensors.
  std::size_t scalars_on(int row, int col) const;

 private:
  std::vector<ShardedMatrix> saved_;
};

/// Charges every layer's parameters to the Params arenas.
void account_parameters(MemoryTracker& tracker, const Mesh& mesh,
                        std::span<const ShardedLayer> layers);

/// Runs the stack keeping only each layer's input. Returns the final output.
ShardedMatrix checkpointed_forward(Mesh& mesh, std::span<const ShardedLayer> layers,
                                   const ShardedMatrix& x0, CheckpointStore& store,
                                   const ModelConfig& cfg, Workspace& ws,
                                   MemoryTracker* tracker = nullptr);

struct CheckpointedGrads {
  ShardedMatrix input_grad;
  std::vector<ShardedLayer> layers;  // empty with eager_update
};

/// Recomputes each layer from its checkpoint and back-propagates, last layer
/// first. With eager_update the layers are updated in place.
CheckpointedGrads checkpointed_backward(Mesh& mesh, std::span<ShardedLayer> layers,
                                        const ShardedMatrix& out_grad,
                                        const CheckpointStore& store, const ModelConfig& cfg,
                                        Workspace& ws, MemoryTracker* tracker = nullptr,
                                        const CheckpointOptions& opts = {});

}  // namespace tp2d

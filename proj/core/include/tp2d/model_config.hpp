// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>

namespace tp2d {

struct ModelConfig {
  std::size_t b = 4;       // batch
  std::size_t s = 8;       // sequence length
  std::size_t h = 16;      // hidden size
  std::size_t n = 4;       // attention heads
  std::size_t v = 32;      // vocabulary
  std::size_t layers = 2;  // transformer layers
  double eps = 1e-5;       // layer-norm epsilon

  std::size_t head_dim() const { return h / n; }
  std::size_t tokens() const { return b * s; }
  /// Vocabulary rounded up to a multiple of q. Padding rows are never valid ids.
  std::size_t padded_vocab(int q) const;

  /// Mesh-independent checks.
  void validate() const;
  /// Checks for the 2D layout on a q x q mesh: b, h, n divisible by q.
  void validate_for_mesh(int q) const;
  /// Checks for the 1D layout over p devices: n and h divisible by p.
  void validate_for_baseline(int p) const;

  std::string describe() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace tp2d

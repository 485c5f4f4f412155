// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tp2d/model_config.hpp"

namespace tp2d {

/// Integer ids in a [batch, seq] grid, row-major.
struct TokenGrid {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int64_t> ids;

  std::int64_t at(std::size_t b, std::size_t s) const { return ids[b * seq + s]; }
};

/// Slice i holds sequences [i*batch/q, (i+1)*batch/q); every device in mesh
/// row i reads slice i.
std::vector<TokenGrid> split_rows(const TokenGrid& tokens, int q);

/// One training batch: language-model inputs and next-token targets, plus
/// optional 0/1 sequence labels for the classification branch.
struct Batch {
  TokenGrid tokens;
  TokenGrid labels;
  std::vector<int> cls_labels;  // empty: no classification loss
  std::size_t cls_position = 0;

  bool has_classification() const { return !cls_labels.empty(); }
};

/// Uniform ids in [0, v) and uniform 0/1 sequence labels.
Batch make_batch(const ModelConfig& cfg, std::uint64_t seed, bool with_classification = true);

}  // namespace tp2d

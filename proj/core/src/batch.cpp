// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tp2d/batch.hpp"

#include <fmt/format.h>

#include "tp2d/dense.hpp"
#include "tp2d/error.hpp"

namespace tp2d {

std::vector<TokenGrid> split_rows(const TokenGrid& tokens, int q) {
  if (q < 1 || tokens.batch % static_cast<std::size_t>(q) != 0) {
    throw ShapeError(fmt::format("batch {} cannot be split over {} mesh rows", tokens.batch, q));
  }
  if (tokens.ids.size() != tokens.batch * tokens.seq) {
    throw ShapeError("split_rows: id count does not match batch * seq");
  }
  const std::size_t per = tokens.batch / q;
  std::vector<TokenGrid> out(q);
  for (int i = 0; i < q; ++i) {
    out[i].batch = per;
    out[i].seq = tokens.seq;
    const auto first = tokens.ids.begin() + static_cast<std::ptrdiff_t>(i * per * tokens.seq);
    out[i].ids.assign(first, first + static_cast<std::ptrdiff_t>(per * tokens.seq));
  }
  return out;
}

Batch make_batch(const ModelConfig& cfg, std::uint64_t seed, bool with_classification) {
  cfg.validate();
  Rng rng(seed);
  Batch batch;
  for (TokenGrid* grid : {&batch.tokens, &batch.labels}) {
    grid->batch = cfg.b;
    grid->seq = cfg.s;
    grid->ids.resize(cfg.b * cfg.s);
    for (auto& id : grid->ids) id = static_cast<std::int64_t>(rng.below(cfg.v));
  }
  if (with_classification) {
    batch.cls_labels.resize(cfg.b);
    for (int& y : batch.cls_labels) y = static_cast<int>(rng.below(2));
  }
  return batch;
}

}  // namespace tp2d

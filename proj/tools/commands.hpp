// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tp2d/costmodel.hpp"
#include "tp2d/mesh.hpp"
#include "tp2d/model_config.hpp"

namespace tp2d::cli {

inline constexpr int kExitPass = 0;
inline constexpr int kExitNumerical = 1;
inline constexpr int kExitConfig = 2;

struct RunOptions {
  ModelConfig cfg;
  std::vector<int> q{2};
  std::uint64_t seed = 23;
  ExecutionMode mode = ExecutionMode::Lockstep;
  Placement placement = Placement::Natural;
  int node_size = 1;
  double beta = 1.0;
  std::string out;
  std::optional<double> tolerance;

  MeshConfig mesh(int side) const;
};

int cmd_verify(const RunOptions& opts, std::ostream& report);
int cmd_cost(const RunOptions& opts, std::ostream& csv);
int cmd_scaling(const RunOptions& opts, const std::string& mode, std::ostream& csv);
int cmd_bench(const RunOptions& opts, std::ostream& report);

}  // namespace tp2d::cli

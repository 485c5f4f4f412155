// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tp2d/model_config.hpp"

#include <fmt/format.h>

#include "tp2d/error.hpp"

namespace tp2d {

std::size_t ModelConfig::padded_vocab(int q) const {
  const auto qq = static_cast<std::size_t>(q);
  return (v + qq - 1) / qq * qq;
}

void ModelConfig::validate() const {
  if (b == 0 || s == 0 || h == 0 || n == 0 || v == 0) {
    throw ConfigError(fmt::format("all of b, s, h, n, v must be positive ({})", describe()));
  }
  if (h % n != 0) throw ConfigError(fmt::format("h = {} is not divisible by n = {}", h, n));
  if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
}

void ModelConfig::validate_for_mesh(int q) const {
  validate();
  if (q < 1) throw ConfigError(fmt::format("mesh side q must be >= 1, got {}", q));
  const auto qq = static_cast<std::size_t>(q);
  if (b % qq != 0) throw ConfigError(fmt::format("b = {} is not divisible by q = {}", b, q));
  if (h % qq != 0) throw ConfigError(fmt::format("h = {} is not divisible by q = {}", h, q));
  if (n % qq != 0) throw ConfigError(fmt::format("n = {} is not divisible by q = {}", n, q));
}

void ModelConfig::validate_for_baseline(int p) const {
  validate();
  if (p < 1) throw ConfigError(fmt::format("device count must be >= 1, got {}", p));
  const auto pp = static_cast<std::size_t>(p);
  if (n % pp != 0) throw ConfigError(fmt::format("n = {} is not divisible by p = {}", n, p));
  if (h % pp != 0) throw ConfigError(fmt::format("h = {} is not divisible by p = {}", h, p));
}

std::string ModelConfig::describe() const {
  return fmt::format("b={} s={} h={} n={} v={} layers={} eps={}", b, s, h, n, v, layers, eps);
}

}  // namespace tp2d

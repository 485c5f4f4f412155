// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace tp2d {

/// Operand shapes are incompatible (matmul inner dims, block divisibility, ...).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A model or mesh configuration violates its divisibility/range invariants.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Index or token id outside its valid range.
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// A planned buffer was exceeded, or a checkpoint is missing.
class AccountingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A backward pass was handed a context that does not belong to its forward.
class StaleContextError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Mathematical domain violation in the cost model (e.g. log of 1 as a ratio base).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace tp2d

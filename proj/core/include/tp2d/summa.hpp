// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0
//
// SUMMA products on a q x q mesh. A global matrix is cut into q x q blocks
// and device (i, j) owns block (i, j). The three supported forms
//
//   C = A B      A_grad = C_grad B^T,  B_grad = A^T C_grad
//   C = A B^T    A_grad = C_grad B,    B_grad = C_grad^T A
//   C = A^T B    A_grad = B C_grad^T,  B_grad = A C_grad
//
// are closed under differentiation, so every backward pass below is written
// in terms of the same three forward routines.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "tp2d/dense.hpp"
#include "tp2d/mesh.hpp"

namespace tp2d {

class ShardedMatrix {
 public:
  ShardedMatrix() = default;
  /// Zero-initialised; global dims must be divisible by the mesh side.
  ShardedMatrix(const Mesh& mesh, std::size_t global_rows, std::size_t global_cols);

  std::size_t global_rows() const { return rows_; }
  std::size_t global_cols() const { return cols_; }
  std::size_t block_rows() const { return q_ == 0 ? 0 : rows_ / q_; }
  std::size_t block_cols() const { return q_ == 0 ? 0 : cols_ / q_; }
  int q() const { return q_; }
  std::uint64_t mesh_id() const { return mesh_id_; }
  bool empty() const { return q_ == 0; }

  Matrix& local(int row, int col) { return blocks_[row * q_ + col]; }
  const Matrix& local(int row, int col) const { return blocks_[row * q_ + col]; }

  ShardedMatrix& operator+=(const ShardedMatrix& other);
  ShardedMatrix& operator*=(double s);

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  int q_ = 0;
  std::uint64_t mesh_id_ = 0;
  std::vector<Matrix> blocks_;
};

ShardedMatrix scatter(const Matrix& global, const Mesh& mesh);
Matrix gather(const ShardedMatrix& s);

/// Staging memory for broadcast/reduce temporaries. One set of slots per
/// device; slots keep their allocation between calls. With a capacity, any
/// staging that would push a device above it throws AccountingError.
class Workspace {
 public:
  enum class Slot { Left = 0, Right = 1, Product = 2 };

  explicit Workspace(int devices, std::optional<std::size_t> capacity = std::nullopt);

  /// Copies src into the slot and returns it.
  const Matrix& stage(int device, Slot slot, const Matrix& src);
  /// Zeroed rows x cols staging buffer.
  Matrix& stage_zero(int device, Slot slot, std::size_t rows, std::size_t cols);
  /// Marks every slot of the device free (allocations are kept).
  void release(int device);
  void release_all();

  std::size_t in_use(int device) const { return in_use_[device]; }
  std::size_t peak(int device) const { return peak_[device]; }
  std::size_t peak() const;
  std::optional<std::size_t> capacity() const { return capacity_; }
  int devices() const { return static_cast<int>(slots_.size()); }

 private:
  void account(int device, Slot slot, std::size_t scalars);

  std::optional<std::size_t> capacity_;
  std::vector<std::array<Matrix, 3>> slots_;
  std::vector<std::array<std::size_t, 3>> used_;
  std::vector<std::size_t> in_use_;
  std::vector<std::size_t> peak_;
};

ShardedMatrix summa_ab(Mesh& mesh, const ShardedMatrix& a, const ShardedMatrix& b, Workspace& ws);
ShardedMatrix summa_abt(Mesh& mesh, const ShardedMatrix& a, const ShardedMatrix& b, Workspace& ws);
ShardedMatrix summa_atb(Mesh& mesh, const ShardedMatrix& a, const ShardedMatrix& b, Workspace& ws);

struct ProductGrads {
  ShardedMatrix a_grad;
  ShardedMatrix b_grad;
};

ProductGrads summa_ab_backward(Mesh& mesh, const ShardedMatrix& c_grad, const ShardedMatrix& a,
                               const ShardedMatrix& b, Workspace& ws);
ProductGrads summa_abt_backward(Mesh& mesh, const ShardedMatrix& c_grad, const ShardedMatrix& a,
                                const ShardedMatrix& b, Workspace& ws);
ProductGrads summa_atb_backward(Mesh& mesh, const ShardedMatrix& c_grad, const ShardedMatrix& a,
                                const ShardedMatrix& b, Workspace& ws);

/// Per-device staging need of one SUMMA call: |A block| + |B block| + |C block|.
std::size_t summa_staging_scalars(std::size_t a_rows, std::size_t a_cols, std::size_t b_rows,
                                  std::size_t b_cols, std::size_t c_rows, std::size_t c_cols,
                                  int q);

}  // namespace tp2d

// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tp2d/summa.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "tp2d/error.hpp"

namespace tp2d {

namespace {

void require_divisible(std::size_t rows, std::size_t cols, int q) {
  if (rows % q != 0 || cols % q != 0) {
    throw ShapeError(fmt::format("{}x{} is not divisible into {}x{} blocks", rows, cols, q, q));
  }
}

void require_on_mesh(const Mesh& mesh, const ShardedMatrix& m, const char* what) {
  if (m.empty() || m.mesh_id() != mesh.id()) {
    throw ShapeError(fmt::format("{}: operand does not live on this mesh", what));
  }
}

}  // namespace

ShardedMatrix::ShardedMatrix(const Mesh& mesh, std::size_t global_rows, std::size_t global_cols)
    : rows_(global_rows), cols_(global_cols), q_(mesh.q()), mesh_id_(mesh.id()) {
  require_divisible(rows_, cols_, q_);
  blocks_.assign(static_cast<std::size_t>(q_) * q_, Matrix(rows_ / q_, cols_ / q_));
}

ShardedMatrix& ShardedMatrix::operator+=(const ShardedMatrix& other) {
  if (other.mesh_id_ != mesh_id_ || other.rows_ != rows_ || other.cols_ != cols_) {
    throw ShapeError("ShardedMatrix +=: operands differ in shape or mesh");
  }
  for (std::size_t k = 0; k < blocks_.size(); ++k) blocks_[k] += other.blocks_[k];
  return *this;
}

ShardedMatrix& ShardedMatrix::operator*=(double s) {
  for (auto& b : blocks_) b *= s;
  return *this;
}

ShardedMatrix scatter(const Matrix& global, const Mesh& mesh) {
  ShardedMatrix s(mesh, global.rows(), global.cols());
  const std::size_t br = s.block_rows();
  const std::size_t bc = s.block_cols();
  for (int i = 0; i < mesh.q(); ++i) {
    for (int j = 0; j < mesh.q(); ++j) s.local(i, j) = global.block(i * br, j * bc, br, bc);
  }
  return s;
}

Matrix gather(const ShardedMatrix& s) {
  Matrix out(s.global_rows(), s.global_cols());
  for (int i = 0; i < s.q(); ++i) {
    for (int j = 0; j < s.q(); ++j) {
      out.set_block(i * s.block_rows(), j * s.block_cols(), s.local(i, j));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

Workspace::Workspace(int devices, std::optional<std::size_t> capacity)
    : capacity_(capacity),
      slots_(devices),
      used_(devices, {0, 0, 0}),
      in_use_(devices, 0),
      peak_(devices, 0) {}

void Workspace::account(int device, Slot slot, std::size_t scalars) {
  auto& used = used_[device];
  const auto k = static_cast<std::size_t>(slot);
  const std::size_t next = in_use_[device] - used[k] + scalars;
  if (capacity_ && next > *capacity_) {
    throw AccountingError(fmt::format("workspace overflow on device {}: {} scalars staged, plan {}",
                                      device, next, *capacity_));
  }
  used[k] = scalars;
  in_use_[device] = next;
  peak_[device] = std::max(peak_[device], next);
}

const Matrix& Workspace::stage(int device, Slot slot, const Matrix& src) {
  account(device, slot, src.size());
  Matrix& dst = slots_[device][static_cast<std::size_t>(slot)];
  dst.assign(src);
  return dst;
}

Matrix& Workspace::stage_zero(int device, Slot slot, std::size_t rows, std::size_t cols) {
  account(device, slot, rows * cols);
  Matrix& dst = slots_[device][static_cast<std::size_t>(slot)];
  dst.reset(rows, cols);
  return dst;
}

void Workspace::release(int device) {
  used_[device] = {0, 0, 0};
  in_use_[device] = 0;
}

void Workspace::release_all() {
  for (int d = 0; d < devices(); ++d) release(d);
}

std::size_t Workspace::peak() const {
  return peak_.empty() ? 0 : *std::max_element(peak_.begin(), peak_.end());
}

std::size_t summa_staging_scalars(std::size_t a_rows, std::size_t a_cols, std::size_t b_rows,
                                  std::size_t b_cols, std::size_t c_rows, std::size_t c_cols,
                                  int q) {
  const auto qq = static_cast<std::size_t>(q) * q;
  return (a_rows * a_cols + b_rows * b_cols + c_rows * c_cols) / qq;
}

// ---------------------------------------------------------------------------

ShardedMatrix summa_ab(Mesh& mesh, const ShardedMatrix& a, const ShardedMatrix& b, Workspace& ws) {
  require_on_mesh(mesh, a, "summa_ab");
  require_on_mesh(mesh, b, "summa_ab");
  if (a.global_cols() != b.global_rows()) {
    throw ShapeError(fmt::format("summa_ab: {}x{} * {}x{}", a.global_rows(), a.global_cols(),
                                 b.global_rows(), b.global_cols()));
  }
  const int q = mesh.q();
  ShardedMatrix c(mesh, a.global_rows(), b.global_cols());
  const std::uint64_t step_macs = a.block_rows() * a.block_cols() * b.block_cols();

  std::vector<std::vector<Matrix>> a_recv(q), b_recv(q);
  for (int l = 0; l < q; ++l) {
    for (int i = 0; i < q; ++i) a_recv[i] = mesh.broadcast_row(i, l, a.local(i, l));
    for (int j = 0; j < q; ++j) b_recv[j] = mesh.broadcast_col(j, l, b.local(l, j));
    mesh.for_each_device([&](int i, int j) {
      const int dev = mesh.index(i, j);
      const Matrix& al = ws.stage(dev, Workspace::Slot::Left, a_recv[i][j]);
      const Matrix& bl = ws.stage(dev, Workspace::Slot::Right, b_recv[j][i]);
      Matrix& tmp = ws.stage_zero(dev, Workspace::Slot::Product, al.rows(), bl.cols());
      matmul_acc(tmp, al, bl);
      c.local(i, j) += tmp;
      mesh.add_macs(i, j, step_macs);
    });
  }
  ws.release_all();
  return c;
}

ShardedMatrix summa_abt(Mesh& mesh, const ShardedMatrix& a, const ShardedMatrix& b, Workspace& ws) {
  require_on_mesh(mesh, a, "summa_abt");
  require_on_mesh(mesh, b, "summa_abt");
  if (a.global_cols() != b.global_cols()) {
    throw ShapeError(fmt::format("summa_abt: {}x{} * ({}x{})^T", a.global_rows(), a.global_cols(),
                                 b.global_rows(), b.global_cols()));
  }
  const int q = mesh.q();
  ShardedMatrix c(mesh, a.global_rows(), b.global_rows());
  const std::uint64_t step_macs = a.block_rows() * a.block_cols() * b.block_rows();

  std::vector<std::vector<Matrix>> b_recv(q);
  std::vector<std::vector<Matrix>> partial(q, std::vector<Matrix>(q));
  for (int l = 0; l < q; ++l) {
    for (int j = 0; j < q; ++j) b_recv[j] = mesh.broadcast_col(j, l, b.local(l, j));
    mesh.for_each_device([&](int i, int j) {
      const int dev = mesh.index(i, j);
      const Matrix& bl = ws.stage(dev, Workspace::Slot::Right, b_recv[j][i]);
      Matrix& tmp = ws.stage_zero(dev, Workspace::Slot::Product, a.block_rows(), bl.rows());
      matmul_nt_acc(tmp, a.local(i, j), bl);
      partial[i][j] = tmp;
      mesh.add_macs(i, j, step_macs);
    });
    for (int i = 0; i < q; ++i) c.local(i, l) = mesh.reduce_row(i, l, partial[i]);
  }
  ws.release_all();
  return c;
}

ShardedMatrix summa_atb(Mesh& mesh, const ShardedMatrix& a, const ShardedMatrix& b, Workspace& ws) {
  require_on_mesh(mesh, a, "summa_atb");
  require_on_mesh(mesh, b, "summa_atb");
  if (a.global_rows() != b.global_rows()) {
    throw ShapeError(fmt::format("summa_atb: ({}x{})^T * {}x{}", a.global_rows(), a.global_cols(),
                                 b.global_rows(), b.global_cols()));
  }
  const int q = mesh.q();
  ShardedMatrix c(mesh, a.global_cols(), b.global_cols());
  const std::uint64_t step_macs = a.block_rows() * a.block_cols() * b.block_cols();

  std::vector<std::vector<Matrix>> a_recv(q);
  // partial[j][i]: contribution of device (i, j), grouped by column for the reduce.
  std::vector<std::vector<Matrix>> partial(q, std::vector<Matrix>(q));
  for (int l = 0; l < q; ++l) {
    for (int i = 0; i < q; ++i) a_recv[i] = mesh.broadcast_row(i, l, a.local(i, l));
    mesh.for_each_device([&](int i, int j) {
      const int dev = mesh.index(i, j);
      const Matrix& al = ws.stage(dev, Workspace::Slot::Left, a_recv[i][j]);
      Matrix& tmp = ws.stage_zero(dev, Workspace::Slot::Product, al.cols(), b.block_cols());
      matmul_tn_acc(tmp, al, b.local(i, j));
      partial[j][i] = tmp;
      mesh.add_macs(i, j, step_macs);
    });
    for (int j = 0; j < q; ++j) c.local(l, j) = mesh.reduce_col(j, l, partial[j]);
  }
  ws.release_all();
  return c;
}

ProductGrads summa_ab_backward(Mesh& mesh, const ShardedMatrix& c_grad, const ShardedMatrix& a,
                               const ShardedMatrix& b, Workspace& ws) {
  if (c_grad.global_rows() != a.global_rows() || c_grad.global_cols() != b.global_cols()) {
    throw ShapeError("summa_ab_backward: c_grad does not match A B");
  }
  return {summa_abt(mesh, c_grad, b, ws), summa_atb(mesh, a, c_grad, ws)};
}

ProductGrads summa_abt_backward(Mesh& mesh, const ShardedMatrix& c_grad, const ShardedMatrix& a,
                                const ShardedMatrix& b, Workspace& ws) {
  if (c_grad.global_rows() != a.global_rows() || c_grad.global_cols() != b.global_rows()) {
    throw ShapeError("summa_abt_backward: c_grad does not match A B^T");
  }
  return {summa_ab(mesh, c_grad, b, ws), summa_atb(mesh, c_grad, a, ws)};
}

ProductGrads summa_atb_backward(Mesh& mesh, const ShardedMatrix& c_grad, const ShardedMatrix& a,
                                const ShardedMatrix& b, Workspace& ws) {
  if (c_grad.global_rows() != a.global_cols() || c_grad.global_cols() != b.global_cols()) {
    throw ShapeError("summa_atb_backward: c_grad does not match A^T B");
  }
  return {summa_abt(mesh, b, c_grad, ws), summa_ab(mesh, a, c_grad, ws)};
}

}  // namespace tp2d

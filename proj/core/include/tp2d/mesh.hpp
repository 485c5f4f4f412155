// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Simulated q x q device mesh. Workers own their local blocks and meet only
// in row/column/world collectives, each of which is charged to a per-device
// ledger using the tree (broadcast/reduce) and ring (all-reduce) cost laws:
//
//   broadcast, reduce in a group of g:  log2(g) * beta * B
//   ring all-reduce in a group of g:    2 * beta * (g - 1) * B / g
//
// where B is the payload in scalars. Latency is not folded into the costs;
// the ledger keeps step counts so alpha can be applied afterwards.

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tp2d/dense.hpp"

namespace tp2d {

enum class Placement { Natural, Bunched };
enum class ExecutionMode { Lockstep, Threaded };
enum class Axis { Row, Col };
enum class ReduceOp { Sum, Max };

/// Which ledger bucket a collective is charged to. `Modeled` traffic is what
/// the closed-form cost model accounts for (SUMMA broadcasts/reduces, the 1D
/// baseline all-reduces); `Auxiliary` covers bias/layer-norm/loss traffic.
enum class CostClass { Modeled, Auxiliary };

std::string_view to_string(Placement p);
std::string_view to_string(ExecutionMode m);
Placement parse_placement(std::string_view s);
ExecutionMode parse_execution_mode(std::string_view s);

struct CostParams {
  double beta = 1.0;   // time per scalar
  double alpha = 0.0;  // time per message step
};

struct MeshConfig {
  int q = 1;
  int node_size = 1;
  Placement placement = Placement::Natural;
  ExecutionMode mode = ExecutionMode::Lockstep;
  CostParams cost{};

  int p() const { return q * q; }
  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
};

struct DeviceRank {
  int row = 0;
  int col = 0;
  int node = 0;
};

struct CommCounters {
  double broadcast_cost = 0.0;
  double reduce_cost = 0.0;
  double allreduce_cost = 0.0;
  std::uint64_t latency_steps = 0;

  double total() const { return broadcast_cost + reduce_cost + allreduce_cost; }
  CommCounters& operator+=(const CommCounters& o);
  CommCounters& operator-=(const CommCounters& o);
  friend bool operator==(const CommCounters&, const CommCounters&) = default;
};

struct DeviceLedger {
  CommCounters modeled;
  CommCounters auxiliary;
  std::uint64_t scalars_internode = 0;
  std::uint64_t scalars_intranode = 0;
  std::uint64_t macs = 0;

  double broadcast_cost() const { return modeled.broadcast_cost + auxiliary.broadcast_cost; }
  double reduce_cost() const { return modeled.reduce_cost + auxiliary.reduce_cost; }
  double allreduce_cost() const { return modeled.allreduce_cost + auxiliary.allreduce_cost; }
  std::uint64_t latency_steps() const {
    return modeled.latency_steps + auxiliary.latency_steps;
  }

  DeviceLedger& operator+=(const DeviceLedger& o);
  DeviceLedger& operator-=(const DeviceLedger& o);
  friend bool operator==(const DeviceLedger&, const DeviceLedger&) = default;
};

/// Snapshot of every device's ledger, indexed row-major by (row, col).
struct CommReport {
  int q = 0;
  std::vector<DeviceLedger> devices;

  const DeviceLedger& at(int row, int col) const { return devices[row * q + col]; }
  DeviceLedger total() const;
  /// Latency-inclusive total for one device: costs plus alpha per step.
  double time_with_latency(int row, int col, double alpha) const;

  /// Counter-wise difference, for measuring what a region of code charged.
  friend CommReport operator-(CommReport a, const CommReport& b);
  friend bool operator==(const CommReport&, const CommReport&) = default;
};

/// Writes one line per device per counter: rank_row,rank_col,counter_name,value.
void write_ledger_csv(const CommReport& report, std::ostream& out);

struct Traffic {
  std::uint64_t internode = 0;
  std::uint64_t intranode = 0;
};

/// Inter- vs intra-node scalars summed over all senders.
Traffic placement_traffic(const CommReport& report);

class DevicePool;

class Mesh {
 public:
  explicit Mesh(MeshConfig cfg);
  ~Mesh();
  Mesh(const Mesh&) = delete;
  Mesh& operator=(const Mesh&) = delete;

  const MeshConfig& config() const { return cfg_; }
  int q() const { return cfg_.q; }
  int p() const { return cfg_.p(); }
  double beta() const { return cfg_.cost.beta; }
  std::uint64_t id() const { return id_; }

  int index(int row, int col) const { return row * cfg_.q + col; }
  DeviceRank rank(int row, int col) const;
  int node_of(int row, int col) const;
  /// Number of distinct nodes touched by a row or column group.
  int group_node_span(Axis axis, int index) const;

  /// Runs fn(row, col) for every device: in rank order in lockstep mode, on one
  /// execution context per device in threaded mode. Returns after all finish.
  void for_each_device(const std::function<void(int row, int col)>& fn);

  // Collectives. `blocks` spans are indexed by position within the group
  // (column index for rows, row index for columns, row-major rank for world).
  std::vector<Matrix> broadcast_row(int row, int root_col, const Matrix& block,
                                    CostClass cls = CostClass::Modeled);
  std::vector<Matrix> broadcast_col(int col, int root_row, const Matrix& block,
                                    CostClass cls = CostClass::Modeled);
  Matrix reduce_row(int row, int dest_col, std::span<const Matrix> blocks,
                    CostClass cls = CostClass::Modeled);
  Matrix reduce_col(int col, int dest_row, std::span<const Matrix> blocks,
                    CostClass cls = CostClass::Modeled);
  std::vector<Matrix> all_reduce_row(int row, std::span<const Matrix> blocks,
                                     ReduceOp op = ReduceOp::Sum,
                                     CostClass cls = CostClass::Modeled);
  std::vector<Matrix> all_reduce_col(int col, std::span<const Matrix> blocks,
                                     ReduceOp op = ReduceOp::Sum,
                                     CostClass cls = CostClass::Modeled);
  std::vector<Matrix> all_reduce_world(std::span<const Matrix> blocks,
                                       ReduceOp op = ReduceOp::Sum,
                                       CostClass cls = CostClass::Modeled);

  /// Records multiply-accumulates performed locally by one device. Safe to
  /// call concurrently for distinct devices.
  void add_macs(int row, int col, std::uint64_t macs) { ledger_[index(row, col)].macs += macs; }

  CommReport ledger_report() const;
  void reset_ledger();

 private:
  std::vector<int> group_ranks(Axis axis, int index) const;
  Matrix fold(std::span<const Matrix> blocks, ReduceOp op, const char* what) const;
  void charge_tree(const std::vector<int>& group, int root_pos, std::size_t scalars,
                   bool toward_root, CostClass cls);
  void charge_ring(const std::vector<int>& group, std::size_t scalars, CostClass cls);
  std::vector<Matrix> broadcast(Axis axis, int index, int root_pos, const Matrix& block,
                                CostClass cls);
  Matrix reduce(Axis axis, int index, int dest_pos, std::span<const Matrix> blocks,
                CostClass cls);
  std::vector<Matrix> all_reduce(const std::vector<int>& group, std::span<const Matrix> blocks,
                                 ReduceOp op, CostClass cls);

  MeshConfig cfg_;
  std::uint64_t id_;
  int tile_rows_ = 1;
  int tile_cols_ = 1;
  std::vector<DeviceLedger> ledger_;
  std::unique_ptr<DevicePool> pool_;
};

}  // namespace tp2d

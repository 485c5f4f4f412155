// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tp2d/mesh.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <condition_variable>
#include <exception>
#include <mutex>
#include <ostream>
#include <set>
#include <thread>

#include <fmt/format.h>

#include "tp2d/error.hpp"

namespace tp2d {

std::string_view to_string(Placement p) {
  return p == Placement::Natural ? "natural" : "bunched";
}

std::string_view to_string(ExecutionMode m) {
  return m == ExecutionMode::Lockstep ? "lockstep" : "threaded";
}

Placement parse_placement(std::string_view s) {
  if (s == "natural") return Placement::Natural;
  if (s == "bunched") return Placement::Bunched;
  throw ConfigError(fmt::format("unknown placement '{}'", s));
}

ExecutionMode parse_execution_mode(std::string_view s) {
  if (s == "lockstep") return ExecutionMode::Lockstep;
  if (s == "threaded") return ExecutionMode::Threaded;
  throw ConfigError(fmt::format("unknown execution mode '{}'", s));
}

namespace {

// Bunched tiles: tr x tc devices per node with tr*tc == node_size, as square
// as possible, both sides dividing q.
bool bunched_tiles(int q, int node_size, int& tr, int& tc) {
  for (int r = static_cast<int>(std::sqrt(static_cast<double>(node_size))); r >= 1; --r) {
    if (node_size % r != 0) continue;
    const int c = node_size / r;
    if (q % r == 0 && q % c == 0) {
      tr = r;
      tc = c;
      return true;
    }
  }
  return false;
}

std::uint64_t next_mesh_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

}  // namespace

void MeshConfig::validate() const {
  if (q < 1) throw ConfigError(fmt::format("mesh side q must be >= 1, got {}", q));
  if (node_size < 1) throw ConfigError(fmt::format("node_size must be >= 1, got {}", node_size));
  if (p() % node_size != 0) {
    throw ConfigError(fmt::format("p = {} is not divisible by node_size = {}", p(), node_size));
  }
  if (placement == Placement::Bunched) {
    int tr = 0, tc = 0;
    if (!bunched_tiles(q, node_size, tr, tc)) {
      throw ConfigError(fmt::format("node_size {} cannot tile a {}x{} mesh", node_size, q, q));
    }
  }
  if (!(cost.beta > 0.0)) throw ConfigError("beta must be > 0");
  if (cost.alpha < 0.0) throw ConfigError("alpha must be >= 0");
}

// ---------------------------------------------------------------------------

CommCounters& CommCounters::operator+=(const CommCounters& o) {
  broadcast_cost += o.broadcast_cost;
  reduce_cost += o.reduce_cost;
  allreduce_cost += o.allreduce_cost;
  latency_steps += o.latency_steps;
  return *this;
}

CommCounters& CommCounters::operator-=(const CommCounters& o) {
  broadcast_cost -= o.broadcast_cost;
  reduce_cost -= o.reduce_cost;
  allreduce_cost -= o.allreduce_cost;
  latency_steps -= o.latency_steps;
  return *this;
}

DeviceLedger& DeviceLedger::operator+=(const DeviceLedger& o) {
  modeled += o.modeled;
  auxiliary += o.auxiliary;
  scalars_internode += o.scalars_internode;
  scalars_intranode += o.scalars_intranode;
  macs += o.macs;
  return *this;
}

DeviceLedger& DeviceLedger::operator-=(const DeviceLedger& o) {
  modeled -= o.modeled;
  auxiliary -= o.auxiliary;
  scalars_internode -= o.scalars_internode;
  scalars_intranode -= o.scalars_intranode;
  macs -= o.macs;
  return *this;
}

DeviceLedger CommReport::total() const {
  DeviceLedger t;
  for (const auto& d : devices) t += d;
  return t;
}

double CommReport::time_with_latency(int row, int col, double alpha) const {
  const auto& d = at(row, col);
  return d.modeled.total() + d.auxiliary.total() + alpha * static_cast<double>(d.latency_steps());
}

CommReport operator-(CommReport a, const CommReport& b) {
  if (a.q != b.q) throw ShapeError("ledger reports come from different meshes");
  for (std::size_t i = 0; i < a.devices.size(); ++i) a.devices[i] -= b.devices[i];
  return a;
}

void write_ledger_csv(const CommReport& report, std::ostream& out) {
  out << "rank_row,rank_col,counter_name,value\n";
  for (int r = 0; r < report.q; ++r) {
    for (int c = 0; c < report.q; ++c) {
      const auto& d = report.at(r, c);
      auto line = [&](std::string_view name, auto value) {
        out << fmt::format("{},{},{},{}\n", r, c, name, value);
      };
      line("broadcast_cost", d.broadcast_cost());
      line("reduce_cost", d.reduce_cost());
      line("allreduce_cost", d.allreduce_cost());
      line("modeled_broadcast_cost", d.modeled.broadcast_cost);
      line("modeled_reduce_cost", d.modeled.reduce_cost);
      line("modeled_allreduce_cost", d.modeled.allreduce_cost);
      line("latency_steps", d.latency_steps());
      line("scalars_sent_internode", d.scalars_internode);
      line("scalars_sent_intranode", d.scalars_intranode);
      line("macs", d.macs);
    }
  }
}

Traffic placement_traffic(const CommReport& report) {
  Traffic t;
  for (const auto& d : report.devices) {
    t.internode += d.scalars_internode;
    t.intranode += d.scalars_intranode;
  }
  return t;
}

// ---------------------------------------------------------------------------

class DevicePool {
 public:
  explicit DevicePool(int workers) : errors_(workers) {
    threads_.reserve(workers);
    for (int i = 0; i < workers; ++i) threads_.emplace_back([this, i] { loop(i); });
  }

  ~DevicePool() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    start_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(const std::function<void(int)>& fn) {
    std::unique_lock lock(mu_);
    task_ = &fn;
    remaining_ = static_cast<int>(threads_.size());
    ++generation_;
    start_.notify_all();
    done_.wait(lock, [this] { return remaining_ == 0; });
    task_ = nullptr;
    for (auto& e : errors_) {
      if (e) {
        auto err = e;
        std::fill(errors_.begin(), errors_.end(), nullptr);
        std::rethrow_exception(err);
      }
    }
  }

 private:
  void loop(int index) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(int)>* task;
      {
        std::unique_lock lock(mu_);
        start_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        task = task_;
      }
      try {
        (*task)(index);
      } catch (...) {
        errors_[index] = std::current_exception();
      }
      std::lock_guard lock(mu_);
      if (--remaining_ == 0) done_.notify_one();
    }
  }

  std::mutex mu_;
  std::condition_variable start_;
  std::condition_variable done_;
  const std::function<void(int)>* task_ = nullptr;
  std::uint64_t generation_ = 0;
  int remaining_ = 0;
  bool stop_ = false;
  std::vector<std::exception_ptr> errors_;
  std::vector<std::thread> threads_;
};

Mesh::Mesh(MeshConfig cfg) : cfg_(cfg), id_(next_mesh_id()) {
  cfg_.validate();
  if (cfg_.placement == Placement::Bunched) bunched_tiles(cfg_.q, cfg_.node_size, tile_rows_, tile_cols_);
  ledger_.resize(cfg_.p());
  if (cfg_.mode == ExecutionMode::Threaded) pool_ = std::make_unique<DevicePool>(cfg_.p());
}

Mesh::~Mesh() = default;

int Mesh::node_of(int row, int col) const {
  if (cfg_.placement == Placement::Natural) return index(row, col) / cfg_.node_size;
  const int tiles_per_row = cfg_.q / tile_cols_;
  return (row / tile_rows_) * tiles_per_row + col / tile_cols_;
}

DeviceRank Mesh::rank(int row, int col) const {
  if (row < 0 || row >= q() || col < 0 || col >= q()) {
    throw RangeError(fmt::format("device ({}, {}) outside {}x{} mesh", row, col, q(), q()));
  }
  return {row, col, node_of(row, col)};
}

int Mesh::group_node_span(Axis axis, int idx) const {
  std::set<int> nodes;
  for (int rank : group_ranks(axis, idx)) nodes.insert(node_of(rank / q(), rank % q()));
  return static_cast<int>(nodes.size());
}

void Mesh::for_each_device(const std::function<void(int, int)>& fn) {
  if (!pool_) {
    for (int r = 0; r < q(); ++r) {
      for (int c = 0; c < q(); ++c) fn(r, c);
    }
    return;
  }
  const int side = q();
  pool_->run([&](int i) { fn(i / side, i % side); });
}

std::vector<int> Mesh::group_ranks(Axis axis, int idx) const {
  if (idx < 0 || idx >= q()) {
    throw RangeError(fmt::format("{} {} outside mesh of side {}", axis == Axis::Row ? "row" : "col",
                                 idx, q()));
  }
  std::vector<int> ranks(q());
  for (int k = 0; k < q(); ++k) ranks[k] = axis == Axis::Row ? index(idx, k) : index(k, idx);
  return ranks;
}

Matrix Mesh::fold(std::span<const Matrix> blocks, ReduceOp op, const char* what) const {
  if (blocks.empty()) throw ShapeError(std::string(what) + ": empty group");
  Matrix acc = blocks[0];
  for (std::size_t k = 1; k < blocks.size(); ++k) {
    if (!blocks[k].same_shape(acc)) {
      throw ShapeError(fmt::format("{}: block {} is {}x{}, expected {}x{}", what, k,
                                   blocks[k].rows(), blocks[k].cols(), acc.rows(), acc.cols()));
    }
    if (op == ReduceOp::Sum) {
      acc += blocks[k];
    } else {
      auto a = acc.data();
      auto b = blocks[k].data();
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::max(a[i], b[i]);
    }
  }
  return acc;
}

// Binomial tree over positions in the group. For power-of-two groups the
// relative rank is pos XOR root (hypercube pairing), otherwise it is the
// rotation (pos - root) mod g. Parent of relative rank r is r with its lowest
// set bit cleared.
void Mesh::charge_tree(const std::vector<int>& group, int root_pos, std::size_t scalars,
                       bool toward_root, CostClass cls) {
  const int g = static_cast<int>(group.size());
  if (g <= 1) return;
  const bool pow2 = std::has_single_bit(static_cast<unsigned>(g));
  auto to_pos = [&](int rel) { return pow2 ? (rel ^ root_pos) : (rel + root_pos) % g; };

  const double cost = std::log2(static_cast<double>(g)) * cfg_.cost.beta * static_cast<double>(scalars);
  const auto depth = static_cast<std::uint64_t>(std::bit_width(static_cast<unsigned>(g - 1)));
  for (int rank : group) {
    auto& counters = cls == CostClass::Modeled ? ledger_[rank].modeled : ledger_[rank].auxiliary;
    (toward_root ? counters.reduce_cost : counters.broadcast_cost) += cost;
    counters.latency_steps += depth;
  }
  for (int rel = 1; rel < g; ++rel) {
    const int parent_rel = rel & (rel - 1);
    const int child = group[to_pos(rel)];
    const int parent = group[to_pos(parent_rel)];
    const int sender = toward_root ? child : parent;
    const bool same_node =
        node_of(child / q(), child % q()) == node_of(parent / q(), parent % q());
    (same_node ? ledger_[sender].scalars_intranode : ledger_[sender].scalars_internode) += scalars;
  }
}

// Ring all-reduce: reduce-scatter then all-gather, each device sending to its
// successor. Device at position r sends every chunk except (r+1) mod g in the
// first phase and every chunk except (r+2) mod g in the second.
void Mesh::charge_ring(const std::vector<int>& group, std::size_t scalars, CostClass cls) {
  const int g = static_cast<int>(group.size());
  if (g <= 1) return;
  const double cost = 2.0 * cfg_.cost.beta * static_cast<double>(g - 1) *
                      static_cast<double>(scalars) / static_cast<double>(g);
  auto chunk = [&](int c) {
    return scalars / g + (static_cast<std::size_t>(c) < scalars % g ? 1 : 0);
  };
  for (int pos = 0; pos < g; ++pos) {
    const int rank = group[pos];
    auto& counters = cls == CostClass::Modeled ? ledger_[rank].modeled : ledger_[rank].auxiliary;
    counters.allreduce_cost += cost;
    counters.latency_steps += 2 * static_cast<std::uint64_t>(g - 1);
    const std::size_t sent = 2 * scalars - chunk((pos + 1) % g) - chunk((pos + 2) % g);
    const int next = group[(pos + 1) % g];
    const bool same_node = node_of(rank / q(), rank % q()) == node_of(next / q(), next % q());
    (same_node ? ledger_[rank].scalars_intranode : ledger_[rank].scalars_internode) += sent;
  }
}

std::vector<Matrix> Mesh::broadcast(Axis axis, int idx, int root_pos, const Matrix& block,
                                    CostClass cls) {
  auto group = group_ranks(axis, idx);
  if (root_pos < 0 || root_pos >= q()) {
    throw RangeError(fmt::format("broadcast root {} outside group of {}", root_pos, q()));
  }
  charge_tree(group, root_pos, block.size(), /*toward_root=*/false, cls);
  return std::vector<Matrix>(group.size(), block);
}

Matrix Mesh::reduce(Axis axis, int idx, int dest_pos, std::span<const Matrix> blocks,
                    CostClass cls) {
  auto group = group_ranks(axis, idx);
  if (dest_pos < 0 || dest_pos >= q()) {
    throw RangeError(fmt::format("reduce destination {} outside group of {}", dest_pos, q()));
  }
  if (blocks.size() != group.size()) {
    throw ShapeError(fmt::format("reduce: {} blocks for a group of {}", blocks.size(), group.size()));
  }
  Matrix out = fold(blocks, ReduceOp::Sum, "reduce");
  charge_tree(group, dest_pos, out.size(), /*toward_root=*/true, cls);
  return out;
}

std::vector<Matrix> Mesh::all_reduce(const std::vector<int>& group, std::span<const Matrix> blocks,
                                     ReduceOp op, CostClass cls) {
  if (blocks.size() != group.size()) {
    throw ShapeError(
        fmt::format("all_reduce: {} blocks for a group of {}", blocks.size(), group.size()));
  }
  Matrix out = fold(blocks, op, "all_reduce");
  charge_ring(group, out.size(), cls);
  return std::vector<Matrix>(group.size(), out);
}

std::vector<Matrix> Mesh::broadcast_row(int row, int root_col, const Matrix& block, CostClass cls) {
  return broadcast(Axis::Row, row, root_col, block, cls);
}

std::vector<Matrix> Mesh::broadcast_col(int col, int root_row, const Matrix& block, CostClass cls) {
  return broadcast(Axis::Col, col, root_row, block, cls);
}

Matrix Mesh::reduce_row(int row, int dest_col, std::span<const Matrix> blocks, CostClass cls) {
  return reduce(Axis::Row, row, dest_col, blocks, cls);
}

Matrix Mesh::reduce_col(int col, int dest_row, std::span<const Matrix> blocks, CostClass cls) {
  return reduce(Axis::Col, col, dest_row, blocks, cls);
}

std::vector<Matrix> Mesh::all_reduce_row(int row, std::span<const Matrix> blocks, ReduceOp op,
                                         CostClass cls) {
  return all_reduce(group_ranks(Axis::Row, row), blocks, op, cls);
}

std::vector<Matrix> Mesh::all_reduce_col(int col, std::span<const Matrix> blocks, ReduceOp op,
                                         CostClass cls) {
  return all_reduce(group_ranks(Axis::Col, col), blocks, op, cls);
}

std::vector<Matrix> Mesh::all_reduce_world(std::span<const Matrix> blocks, ReduceOp op,
                                           CostClass cls) {
  std::vector<int> group(p());
  for (int i = 0; i < p(); ++i) group[i] = i;
  return all_reduce(group, blocks, op, cls);
}

CommReport Mesh::ledger_report() const { return CommReport{q(), ledger_}; }

void Mesh::reset_ledger() { std::fill(ledger_.begin(), ledger_.end(), DeviceLedger{}); }

}  // namespace tp2d

// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "test_util.hpp"
#include "tp2d/error.hpp"
#include "tp2d/mesh.hpp"

namespace tp2d {
namespace {

using testing::mesh_config;
using testing::random_matrix;

TEST(MeshConfig, RejectsInvalid) {
  MeshConfig c;
  c.q = 0;
  EXPECT_THROW(Mesh{c}, ConfigError);
  c.q = 2;
  c.node_size = 0;
  EXPECT_THROW(Mesh{c}, ConfigError);
  c.node_size = 3;
  EXPECT_THROW(Mesh{c}, ConfigError);
  c.node_size = 1;
  c.cost.beta = 0.0;
  EXPECT_THROW(Mesh{c}, ConfigError);
}

TEST(Mesh, SingleDeviceCollectivesAreFree) {
  Mesh mesh(mesh_config(1));
  const Matrix x = random_matrix(3, 3, 1);
  EXPECT_EQ(mesh.broadcast_row(0, 0, x)[0], x);
  const std::vector<Matrix> one{x};
  EXPECT_EQ(mesh.reduce_col(0, 0, one), x);
  EXPECT_EQ(mesh.all_reduce_row(0, one)[0], x);
  EXPECT_EQ(mesh.ledger_report().total().broadcast_cost(), 0.0);
  EXPECT_EQ(mesh.ledger_report().total().reduce_cost(), 0.0);
  EXPECT_EQ(mesh.ledger_report().total().allreduce_cost(), 0.0);
}

TEST(Mesh, GroupsOfTwo) {
  Mesh mesh(mesh_config(2));
  EXPECT_EQ(mesh.p(), 4);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      EXPECT_EQ(mesh.rank(i, j).row, i);
      EXPECT_EQ(mesh.rank(i, j).col, j);
    }
  }
}

TEST(Mesh, BunchedPlacementTiles) {
  MeshConfig c = mesh_config(4);
  c.node_size = 4;
  c.placement = Placement::Bunched;
  Mesh mesh(c);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) EXPECT_EQ(mesh.node_of(i, j), 0);
  }
  EXPECT_NE(mesh.node_of(0, 2), 0);
  EXPECT_NE(mesh.node_of(2, 0), 0);
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(mesh.group_node_span(Axis::Row, k), 2);
    EXPECT_EQ(mesh.group_node_span(Axis::Col, k), 2);
  }
  c.placement = Placement::Natural;
  Mesh natural(c);
  EXPECT_EQ(natural.group_node_span(Axis::Row, 0), 1);
  EXPECT_EQ(natural.group_node_span(Axis::Col, 0), 4);
}

TEST(Mesh, BroadcastRowCost) {
  Mesh mesh(mesh_config(2));
  const Matrix block = random_matrix(2, 2, 2);
  const auto copies = mesh.broadcast_row(1, 0, block);
  for (const auto& c : copies) EXPECT_EQ(c, block);
  const CommReport r = mesh.ledger_report();
  EXPECT_EQ(r.at(1, 0).broadcast_cost(), 4.0);
  EXPECT_EQ(r.at(1, 1).broadcast_cost(), 4.0);
  EXPECT_EQ(r.at(0, 0).broadcast_cost(), 0.0);
  EXPECT_EQ(r.at(0, 1).broadcast_cost(), 0.0);
}

TEST(Mesh, BroadcastCostFourWide) {
  Mesh mesh(mesh_config(4));
  mesh.broadcast_row(0, 2, Matrix(10, 10, 1.0));
  EXPECT_NEAR(mesh.ledger_report().at(0, 3).broadcast_cost(), 200.0, 1e-12);
}

TEST(Mesh, BroadcastColCost) {
  Mesh mesh(mesh_config(2));
  mesh.broadcast_col(0, 1, Matrix(3, 3, 1.0));
  EXPECT_EQ(mesh.ledger_report().at(0, 0).broadcast_cost(), 9.0);
  EXPECT_EQ(mesh.ledger_report().at(1, 0).broadcast_cost(), 9.0);
}

TEST(Mesh, RowThenColumnReachesEveryDevice) {
  Mesh mesh(mesh_config(3));
  const Matrix x = random_matrix(2, 2, 3);
  const auto row_copies = mesh.broadcast_row(1, 1, x);
  for (int j = 0; j < 3; ++j) {
    for (const auto& c : mesh.broadcast_col(j, 1, row_copies[j])) EXPECT_EQ(c, x);
  }
}

TEST(Mesh, ReduceSumsInRankOrder) {
  Mesh mesh(mesh_config(2));
  const std::vector<Matrix> blocks{Matrix(1, 1, 1.0), Matrix(1, 1, 2.0)};
  EXPECT_EQ(mesh.reduce_row(0, 1, blocks)(0, 0), 3.0);

  Mesh big(mesh_config(4));
  std::vector<Matrix> rnd;
  for (int k = 0; k < 4; ++k) rnd.push_back(random_matrix(3, 2, 10 + k));
  Matrix fold = rnd[0];
  for (int k = 1; k < 4; ++k) fold += rnd[k];
  EXPECT_EQ(big.reduce_col(2, 3, rnd), fold);
  EXPECT_EQ(big.reduce_row(1, 0, rnd), fold);
  EXPECT_NEAR(big.ledger_report().at(0, 2).reduce_cost(), 2.0 * 6, 1e-12);
}

TEST(Mesh, ReduceShapeMismatchThrows) {
  Mesh mesh(mesh_config(2));
  const std::vector<Matrix> blocks{Matrix(1, 2), Matrix(2, 1)};
  EXPECT_THROW(mesh.reduce_row(0, 0, blocks), ShapeError);
  EXPECT_THROW(mesh.all_reduce_col(0, blocks), ShapeError);
}

TEST(Mesh, RootOutOfRangeThrows) {
  Mesh mesh(mesh_config(2));
  EXPECT_THROW(mesh.broadcast_row(0, 2, Matrix(1, 1)), RangeError);
  EXPECT_THROW(mesh.broadcast_col(-1, 0, Matrix(1, 1)), RangeError);
}

TEST(Mesh, AllReduceRingCost) {
  Mesh mesh(mesh_config(4));
  std::vector<Matrix> blocks;
  for (int k = 0; k < 4; ++k) blocks.push_back(random_matrix(10, 10, 20 + k));
  const auto out = mesh.all_reduce_row(2, blocks);
  for (const auto& o : out) EXPECT_EQ(o, out[0]);
  EXPECT_NEAR(mesh.ledger_report().at(2, 1).allreduce_cost(), 150.0, 1e-12);
}

TEST(Mesh, AllReduceMax) {
  Mesh mesh(mesh_config(2));
  const std::vector<Matrix> blocks{Matrix::from_rows({{1, 5}}), Matrix::from_rows({{3, 2}})};
  EXPECT_EQ(mesh.all_reduce_row(0, blocks, ReduceOp::Max)[1], Matrix::from_rows({{3, 5}}));
}

TEST(Mesh, AllReduceWorldUsesGroupOfP) {
  Mesh mesh(mesh_config(2));
  std::vector<Matrix> blocks(4, Matrix(1, 8, 1.0));
  const auto out = mesh.all_reduce_world(blocks);
  EXPECT_EQ(out[3], Matrix(1, 8, 4.0));
  EXPECT_NEAR(mesh.ledger_report().at(1, 1).allreduce_cost(), 2.0 * 3.0 * 8.0 / 4.0, 1e-12);
}

TEST(Ledger, FreshIsZeroAndAdditive) {
  Mesh mesh(mesh_config(2));
  EXPECT_EQ(mesh.ledger_report().total(), DeviceLedger{});
  mesh.broadcast_row(0, 0, Matrix(2, 2));
  const CommReport one = mesh.ledger_report();
  mesh.broadcast_row(0, 0, Matrix(2, 2));
  mesh.broadcast_row(0, 0, Matrix(2, 2));
  EXPECT_EQ(mesh.ledger_report().at(0, 1).broadcast_cost(), 3 * one.at(0, 1).broadcast_cost());
  mesh.reset_ledger();
  EXPECT_EQ(mesh.ledger_report().total(), DeviceLedger{});
}

TEST(Ledger, AuxiliaryKeptSeparate) {
  Mesh mesh(mesh_config(2));
  mesh.broadcast_col(0, 0, Matrix(1, 4), CostClass::Auxiliary);
  const auto& d = mesh.ledger_report().at(1, 0);
  EXPECT_EQ(d.modeled.broadcast_cost, 0.0);
  EXPECT_EQ(d.auxiliary.broadcast_cost, 4.0);
  EXPECT_EQ(d.broadcast_cost(), 4.0);
}

TEST(Ledger, LatencyAppliedAfterwards) {
  Mesh mesh(mesh_config(4));
  mesh.broadcast_row(0, 0, Matrix(1, 1));
  const CommReport r = mesh.ledger_report();
  EXPECT_GT(r.at(0, 0).latency_steps(), 0u);
  EXPECT_DOUBLE_EQ(r.time_with_latency(0, 0, 0.0), r.at(0, 0).broadcast_cost());
  EXPECT_GT(r.time_with_latency(0, 0, 1.0), r.at(0, 0).broadcast_cost());
}

TEST(Ledger, CsvHeaderAndRows) {
  Mesh mesh(mesh_config(2));
  mesh.broadcast_row(0, 0, Matrix(2, 2));
  std::ostringstream out;
  write_ledger_csv(mesh.ledger_report(), out);
  const std::string s = out.str();
  EXPECT_EQ(s.rfind("rank_row,rank_col,counter_name,value\n", 0), 0u);
  EXPECT_NE(s.find("0,1,broadcast_cost,4\n"), std::string::npos);
}

TEST(Placement, SingleNodeHasNoInternodeTraffic) {
  MeshConfig c = mesh_config(2);
  c.node_size = 4;
  Mesh mesh(c);
  mesh.broadcast_row(0, 0, Matrix(3, 3));
  mesh.broadcast_col(1, 1, Matrix(3, 3));
  const Traffic t = placement_traffic(mesh.ledger_report());
  EXPECT_EQ(t.internode, 0u);
  EXPECT_GT(t.intranode, 0u);
}

TEST(Placement, ColumnBroadcastCrossesFewerNodesWhenBunched) {
  for (Placement pl : {Placement::Natural, Placement::Bunched}) {
    MeshConfig c = mesh_config(4);
    c.node_size = 4;
    c.placement = pl;
    Mesh mesh(c);
    mesh.broadcast_col(0, 0, Matrix(1, 10));
    const Traffic t = placement_traffic(mesh.ledger_report());
    // Binomial tree over 4 members: 3 edges of 10 scalars.
    EXPECT_EQ(t.internode + t.intranode, 30u);
    EXPECT_EQ(t.internode, pl == Placement::Natural ? 30u : 10u);
  }
}

TEST(Modes, ThreadedMatchesLockstep) {
  std::vector<CommReport> reports;
  std::vector<Matrix> sums;
  for (ExecutionMode m : {ExecutionMode::Lockstep, ExecutionMode::Threaded}) {
    Mesh mesh(mesh_config(3, m));
    std::vector<Matrix> partial(9);
    mesh.for_each_device([&](int i, int j) {
      partial[mesh.index(i, j)] = random_matrix(2, 2, 100 + mesh.index(i, j));
      mesh.add_macs(i, j, 7);
    });
    sums.push_back(mesh.all_reduce_world(partial)[0]);
    reports.push_back(mesh.ledger_report());
  }
  EXPECT_EQ(sums[0], sums[1]);
  EXPECT_EQ(reports[0], reports[1]);
}

TEST(Modes, ParseNames) {
  EXPECT_EQ(parse_execution_mode("threaded"), ExecutionMode::Threaded);
  EXPECT_EQ(parse_placement("bunched"), Placement::Bunched);
  EXPECT_THROW(parse_placement("diagonal"), ConfigError);
}

}  // namespace
}  // namespace tp2d

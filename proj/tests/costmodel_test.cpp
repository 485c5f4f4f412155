// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "test_util.hpp"
#include "tp2d/baseline.hpp"
#include "tp2d/costmodel.hpp"
#include "tp2d/error.hpp"
#include "tp2d/membuf.hpp"

namespace tp2d {
namespace {

using testing::mesh_config;
using testing::random_matrix;

const ProblemSize kSmall{2, 8, 16, 4};

TEST(MegatronCosts, SingleDeviceHasNoCommunication) {
  const CostBreakdown c = megatron_costs(kSmall, 1);
  EXPECT_EQ(c.comm(), 0.0);
  EXPECT_EQ(c.fwd_comp, 53248.0);
}

TEST(MegatronCosts, FourDevices) {
  const CostBreakdown c = megatron_costs(kSmall, 4);
  EXPECT_EQ(c.fwd_comm, 768.0);
  EXPECT_EQ(c.bwd_comm, 1536.0);
  EXPECT_EQ(c.fwd_comp, 13312.0);
  EXPECT_EQ(c.bwd_comp, 3 * 13312.0);
  EXPECT_EQ(megatron_costs(kSmall, 4, 2.5).fwd_comm, 2.5 * 768.0);
}

TEST(Summa2dCosts, SingleDeviceHasNoCommunication) {
  EXPECT_EQ(summa2d_costs(kSmall, 1).comm(), 0.0);
}

TEST(Summa2dCosts, FourDevices) {
  const CostBreakdown c = summa2d_costs(kSmall, 4);
  EXPECT_EQ(c.fwd_comm, 2432.0);
  EXPECT_EQ(c.bwd_comm, 7296.0);
  EXPECT_EQ(c.fwd_comp, megatron_costs(kSmall, 4).fwd_comp);
}

TEST(Summa2dCosts, NeedsSquareDeviceCount) {
  EXPECT_THROW(summa2d_costs(kSmall, 8), ConfigError);
  EXPECT_THROW(megatron_costs(kSmall, 0), ConfigError);
  EXPECT_EQ(parse_scheme("summa2d"), Scheme::Summa2d);
  EXPECT_THROW(parse_scheme("optimal"), ConfigError);
}

// The per-device SUMMA charge of one layer is the closed form at every square p.
TEST(Summa2dCosts, LedgerConformance) {
  ModelConfig cfg;
  cfg.b = 4;
  cfg.s = 8;
  cfg.h = 32;
  cfg.n = 4;
  cfg.v = 32;
  cfg.layers = 1;
  for (int q : {2, 4}) {
    Mesh mesh(mesh_config(q));
    Workspace ws(mesh.p());
    std::vector<ShardedLayer> layers{distribute(ModelWeights::init(cfg, 1).layers[0], mesh)};
    CheckpointStore store;
    const ShardedMatrix x = scatter(random_matrix(cfg.tokens(), cfg.h, 2), mesh);
    checkpointed_forward(mesh, layers, x, store, cfg, ws);
    const CommReport fwd = mesh.ledger_report();
    mesh.reset_ledger();
    checkpointed_backward(mesh, layers, x, store, cfg, ws);
    const CommReport bwd = mesh.ledger_report();
    const CostBreakdown want = summa2d_costs(ProblemSize::from(cfg), mesh.p());
    for (std::size_t d = 0; d < fwd.devices.size(); ++d) {
      EXPECT_NEAR(fwd.devices[d].modeled.total(), want.fwd_comm, 1e-9 * want.fwd_comm);
      EXPECT_NEAR(bwd.devices[d].modeled.total(), want.bwd_comm, 1e-9 * want.bwd_comm);
      EXPECT_EQ(static_cast<double>(fwd.devices[d].macs), want.fwd_comp);
      EXPECT_EQ(static_cast<double>(bwd.devices[d].macs), want.bwd_comp);
    }
  }
}

// Backward with recomputation: one forward replay plus the backward pass.
TEST(MegatronCosts, LedgerConformance) {
  ModelConfig cfg;
  cfg.b = 2;
  cfg.s = 8;
  cfg.h = 16;
  cfg.n = 4;
  cfg.v = 32;
  cfg.layers = 1;
  Mesh mesh(mesh_config(2));
  const BaselineLayer layer = distribute_baseline(ModelWeights::init(cfg, 1).layers[0], 4, cfg);
  const Matrix x = random_matrix(cfg.tokens(), cfg.h, 2);
  baseline_1d_layer_forward(mesh, x, layer, cfg);
  const double fwd = mesh.ledger_report().at(0, 0).modeled.total();
  mesh.reset_ledger();
  auto [y, ctx] = baseline_1d_layer_forward(mesh, x, layer, cfg);
  baseline_1d_layer_backward(mesh, y, ctx, layer, cfg);
  const double bwd = mesh.ledger_report().at(0, 0).modeled.total();
  const CostBreakdown want = megatron_costs(ProblemSize::from(cfg), 4);
  EXPECT_EQ(fwd, want.fwd_comm);
  EXPECT_EQ(bwd, want.bwd_comm);
}

// --- efficiency ----------------------------------------------------------------

TEST(Efficiency, Basics) {
  EXPECT_EQ(efficiency(1000, 4, 0).E, 1.0);
  EXPECT_DOUBLE_EQ(efficiency(1000, 4, 250).E, 0.5);
  const EfficiencyPoint e = efficiency(1000, 4, 50);
  EXPECT_NEAR(e.E, 1.0 / 1.2, 1e-15);
  EXPECT_DOUBLE_EQ(e.T_p, 300.0);
  EXPECT_DOUBLE_EQ(e.E, e.W / (e.p * e.T_p));
}

TEST(Efficiency, DomainErrors) {
  EXPECT_THROW(efficiency(0, 4, 1), DomainError);
  EXPECT_THROW(efficiency(10, 0, 1), DomainError);
  EXPECT_THROW(efficiency(10, 4, -1), DomainError);
}

TEST(Efficiency, WorkIsFourLayerForwards) {
  EXPECT_EQ(kSmall.work(), 4 * 53248.0);
  const EfficiencyPoint e = predicted_efficiency(Scheme::Megatron, kSmall, 4);
  EXPECT_EQ(e.T_comm, 3 * 768.0);
}

// --- isoefficiency -------------------------------------------------------------

TEST(Isoefficiency, GrowthFactors) {
  EXPECT_EQ(isoefficiency_growth(Scheme::Megatron, 4, 16), 64.0);
  EXPECT_DOUBLE_EQ(isoefficiency_growth(Scheme::Summa2d, 4, 16), 64.0);
  EXPECT_DOUBLE_EQ(isoefficiency_growth(Scheme::Summa2d, 16, 64), 27.0);
  EXPECT_EQ(isoefficiency_growth(Scheme::Megatron, 16, 64), 64.0);
  EXPECT_THROW(isoefficiency_growth(Scheme::Summa2d, 1, 4), DomainError);
  EXPECT_EQ(isoefficiency_growth(Scheme::Megatron, 1, 4), 64.0);
}

TEST(Isoefficiency, RequiredWork) {
  const EfficiencyPoint ref = predicted_efficiency(Scheme::Megatron, kSmall, 4);
  EXPECT_DOUBLE_EQ(isoefficiency_required_W(Scheme::Megatron, 16, ref), 64 * ref.W);
}

TEST(Isoefficiency, ScaleToWorkHitsTarget) {
  const ProblemSize base{8, 512, 1024, 16};
  const ProblemSize z = scale_to_work(base, 27 * base.work());
  EXPECT_NEAR(z.work() / base.work(), 27.0, 1e-9);
  EXPECT_EQ(z.s, base.s);
  EXPECT_NEAR(z.h / base.h, z.b / base.b, 1e-12);
  EXPECT_NEAR(z.n / base.n, z.b / base.b, 1e-12);
  EXPECT_THROW(scale_to_work(base, 0), DomainError);
}

TEST(Isoefficiency, Summa2dRoundTripHoldsRatio) {
  const ProblemSize base{8, 512, 1024, 16};
  const int p0 = 4;
  const EfficiencyPoint ref = predicted_efficiency(Scheme::Summa2d, base, p0);
  const double ref_ratio = comm_work_ratio(Scheme::Summa2d, base, p0);
  for (int p : {16, 64}) {
    const ProblemSize z = scale_to_work(base, isoefficiency_required_W(Scheme::Summa2d, p, ref));
    const double ratio = comm_work_ratio(Scheme::Summa2d, z, p);
    EXPECT_LE(std::abs(ratio / ref_ratio - 1.0), 0.10) << "p=" << p;
  }
}

// --- scaling tables ------------------------------------------------------------

ModelConfig scaling_base() {
  ModelConfig cfg;
  cfg.b = 8;
  cfg.s = 64;
  cfg.h = 256;
  cfg.n = 8;
  cfg.v = 1024;
  cfg.layers = 4;
  return cfg;
}

TEST(ScalingTable, SingleDeviceRowsAgree) {
  const int ps[] = {1};
  const auto rows = scaling_table(ScalingMode::Strong, scaling_base(), ps);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].T_p, rows[1].T_p);
  EXPECT_EQ(rows[0].efficiency, 1.0);
}

TEST(ScalingTable, StrongModeCommunication) {
  const int ps[] = {4, 16, 36, 64};
  ModelConfig cfg = scaling_base();
  cfg.n = 576;  // divisible by every p for the 1D rows
  cfg.h = 1152;
  cfg.b = 48;
  cfg.v = 1152;
  const auto rows = scaling_table(ScalingMode::Strong, cfg, ps);
  std::vector<double> megatron, summa;
  for (const auto& r : rows) (r.scheme == Scheme::Megatron ? megatron : summa).push_back(r.cost.comm());
  // Megatron approaches 12 bsh from below.
  const double limit = 12.0 * cfg.b * cfg.s * cfg.h;
  for (std::size_t k = 1; k < megatron.size(); ++k) {
    EXPECT_GT(megatron[k], megatron[k - 1]);
    EXPECT_LT(megatron[k], limit);
  }
  // log2(p) / (2 sqrt p) is 1/2 at both 4 and 16, then falls.
  EXPECT_DOUBLE_EQ(summa[0], summa[1]);
  EXPECT_LT(summa[2], summa[1]);
  EXPECT_LT(summa[3], summa[2]);
}

TEST(ScalingTable, WeakModeScalesDimensions) {
  const int ps[] = {4, 16, 64};
  const auto rows = scaling_table(ScalingMode::Weak, scaling_base(), ps);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[3].cfg.h, 512u);
  EXPECT_EQ(rows[3].cfg.b, 16u);
  EXPECT_EQ(rows[3].cfg.n, 32u);
  EXPECT_EQ(rows[2].cfg.b, 8u);  // megatron keeps its batch
  EXPECT_EQ(rows[5].q, 8);
  const int bad[] = {4, 8};
  EXPECT_THROW(scaling_table(ScalingMode::Weak, scaling_base(), bad), ConfigError);
}

// Throughput ratio b2 T1 / (b1 T2) evaluated by hand for the p = 4 row.
TEST(ScalingTable, PublishedConfigurationRatio) {
  const auto rows = published_weak_scaling();
  ASSERT_EQ(rows.size(), 8u);
  const double s = 512, h = 2048, p = 4;
  const double comp = 4 * (12 * s * h * h + 2 * s * s * h) / p;
  const double t_meg = 60 * comp + 60 * 12 * (p - 1) / p * s * h;
  const double t_2d = 96 * comp + 0.5 * 4 * (7 * 96 * s * h + 12 * h * h);
  const double want = (96 / t_2d) / (60 / t_meg);
  const auto ratios = throughput_ratios(rows);
  ASSERT_EQ(ratios.size(), 4u);
  EXPECT_EQ(ratios[0].first, 4);
  EXPECT_NEAR(ratios[0].second, want, 1e-12);
}

TEST(ScalingTable, CsvIsStable) {
  const int ps[] = {1, 4};
  const auto rows = scaling_table(ScalingMode::Strong, scaling_base(), ps);
  std::ostringstream a, b;
  write_scaling_csv(rows, a);
  write_scaling_csv(rows, b);
  EXPECT_EQ(a.str(), b.str());
  std::istringstream in(a.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "scheme,p,q,b,s,h,n,fwd_comm,bwd_comm,fwd_comp,bwd_comp,T_p,efficiency");
  std::getline(in, line);
  EXPECT_EQ(line.rfind("megatron,1,1,8,64,256,8,0,0,", 0), 0u) << line;
}

}  // namespace
}  // namespace tp2d

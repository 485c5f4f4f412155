// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion. `--criterion N` runs a
// single criterion; the exit code is 0 iff every criterion that ran passed.

#include <algorithm>
#include <cfloat>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "tp2d/baseline.hpp"
#include "tp2d/batch.hpp"
#include "tp2d/costmodel.hpp"
#include "tp2d/membuf.hpp"
#include "tp2d/model.hpp"
#include "tp2d/serial.hpp"

namespace tp2d {
namespace {

// Tolerances.
constexpr double kLossTol = 1e-9;
constexpr double kGradTol = 1e-8;
constexpr double kOracleSeconds = 60.0;
constexpr double kKernelTol = 1e-12;
constexpr double kKernelSeconds = 30.0;
constexpr double kFiniteDiffStep = 1e-4;
constexpr double kFiniteDiffRel = 1e-6;
constexpr std::size_t kFiniteDiffSamples = 20;
constexpr double kLedgerRel = 1e-9;
constexpr double kIsoRoundTrip = 0.10;
constexpr double kThreadedTol = 1e-9;

struct Outcome {
  bool pass = true;
  std::string detail;
};

MeshConfig lockstep(int q) {
  MeshConfig m;
  m.q = q;
  return m;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  return random_uniform(rows, cols, rng);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double rel_diff(double got, double want) {
  return std::abs(got - want) / std::max(std::abs(want), 1e-300);
}

// --- 1 -------------------------------------------------------------------------

Outcome oracle_equivalence() {
  ModelConfig cfg;
  cfg.b = 6;
  cfg.s = 8;
  cfg.h = 48;
  cfg.n = 6;
  cfg.v = 36;
  cfg.layers = 2;
  const ModelWeights w = ModelWeights::init(cfg, 23);
  const Batch batch = make_batch(cfg, 23);
  const SerialResult want = serial_loss_and_grads(w, batch, cfg);

  Outcome out;
  for (int q : {1, 2, 3}) {
    const auto t0 = std::chrono::steady_clock::now();
    Mesh mesh(lockstep(q));
    Workspace ws(mesh.p());
    ShardedModel model = distribute(w, mesh, cfg);
    const DistributedResult got = distributed_loss_and_grads(mesh, model, batch, cfg, ws);
    const double elapsed = seconds_since(t0);
    const double loss_diff = std::abs(got.loss - want.loss);
    const double grad_diff = max_abs_diff(collect(got.grads, cfg), want.grads);
    out.pass = out.pass && loss_diff <= kLossTol && grad_diff <= kGradTol && elapsed < kOracleSeconds;
    out.detail += fmt::format("q={}: loss {:.1e} grad {:.1e} {:.2f}s; ", q, loss_diff, grad_diff, elapsed);
  }
  return out;
}

// --- 2 -------------------------------------------------------------------------

Outcome kernel_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng pick(2024);
  double forward_err = 0.0;
  double backward_err = 0.0;
  int cases = 0;
  for (int c = 0; c < 20; ++c) {
    const int q = 1 + static_cast<int>(pick.below(4));
    const std::size_t m = q * (1 + pick.below(4));
    const std::size_t k = q * (1 + pick.below(4));
    const std::size_t n = q * (1 + pick.below(4));
    const std::uint64_t seed = pick.next_u64();
    Mesh mesh(lockstep(q));
    Workspace ws(mesh.p());

    // C = A B with A m x k, B k x n.
    const Matrix a = random_matrix(m, k, seed);
    const Matrix b = random_matrix(k, n, seed + 1);
    const Matrix g = random_matrix(m, n, seed + 2);
    const ShardedMatrix as = scatter(a, mesh), bs = scatter(b, mesh), gs = scatter(g, mesh);
    forward_err = std::max(forward_err, max_abs_diff(gather(summa_ab(mesh, as, bs, ws)), matmul(a, b)));
    ProductGrads pg = summa_ab_backward(mesh, gs, as, bs, ws);
    backward_err = std::max({backward_err, max_abs_diff(gather(pg.a_grad), matmul_nt(g, b)),
                             max_abs_diff(gather(pg.b_grad), matmul_tn(a, g))});

    // C = A B^T with A m x k, B n x k.
    const Matrix bt = random_matrix(n, k, seed + 3);
    const ShardedMatrix bts = scatter(bt, mesh);
    forward_err = std::max(forward_err, max_abs_diff(gather(summa_abt(mesh, as, bts, ws)), matmul_nt(a, bt)));
    pg = summa_abt_backward(mesh, gs, as, bts, ws);
    backward_err = std::max({backward_err, max_abs_diff(gather(pg.a_grad), matmul(g, bt)),
                             max_abs_diff(gather(pg.b_grad), matmul_tn(g, a))});

    // C = A^T B with A k x m, B k x n.
    const Matrix at = random_matrix(k, m, seed + 4);
    const ShardedMatrix ats = scatter(at, mesh);
    forward_err = std::max(forward_err, max_abs_diff(gather(summa_atb(mesh, ats, bs, ws)), matmul_tn(at, b)));
    pg = summa_atb_backward(mesh, gs, ats, bs, ws);
    backward_err = std::max({backward_err, max_abs_diff(gather(pg.a_grad), matmul_nt(b, g)),
                             max_abs_diff(gather(pg.b_grad), matmul(at, g))});
    ++cases;
  }
  const double elapsed = seconds_since(t0);
  return {forward_err <= kKernelTol && backward_err <= kKernelTol && elapsed < kKernelSeconds,
          fmt::format("{} cases x 3 products: forward {:.1e} backward {:.1e} {:.2f}s", cases,
                      forward_err, backward_err, elapsed)};
}

// --- 3 -------------------------------------------------------------------------

Outcome gradient_checks() {
  ModelConfig cfg;
  cfg.b = 4;
  cfg.s = 8;
  cfg.h = 16;
  cfg.n = 4;
  cfg.v = 32;
  cfg.layers = 2;
  ModelWeights w = ModelWeights::init(cfg, 23);
  const Batch batch = make_batch(cfg, 23);

  Mesh mesh(lockstep(2));
  Workspace ws(mesh.p());
  ShardedModel model = distribute(w, mesh, cfg);
  const ModelWeights grads = collect(distributed_loss_and_grads(mesh, model, batch, cfg, ws).grads, cfg);
  std::vector<const Matrix*> analytic;
  ModelWeights::for_each(grads, [&](const std::string&, const Matrix& m) { analytic.push_back(&m); });

  const auto loss = [&] {
    Mesh m(lockstep(2));
    Workspace wsm(m.p());
    return distributed_loss(m, distribute(w, m, cfg), batch, cfg, wsm);
  };
  // Smallest gradient a central difference can resolve: a few ulps of the
  // loss over the 2 step span. Coordinates whose analytic and numeric values
  // are both below it (the key bias, which softmax ignores) are checked
  // absolutely against it.
  const double base_loss = loss();
  const double resolution = 4.0 * DBL_EPSILON * std::abs(base_loss) / (2.0 * kFiniteDiffStep);
  double worst = 0.0;
  double worst_zero = 0.0;
  std::string worst_name;
  std::size_t coords = 0;
  std::size_t zero = 0;
  std::size_t tensor = 0;
  Rng pick(31);
  ModelWeights::for_each(w, [&](const std::string& name, Matrix& param) {
    std::vector<std::size_t> idx(param.size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    for (std::size_t k = 0; k + 1 < idx.size(); ++k) {
      std::swap(idx[k], idx[k + pick.below(idx.size() - k)]);
    }
    idx.resize(std::min(idx.size(), kFiniteDiffSamples));
    const auto fd = finite_diff_grad(loss, param, idx, kFiniteDiffStep);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double a = analytic[tensor]->data()[idx[k]];
      if (std::abs(a) <= resolution && std::abs(fd[k]) <= resolution) {
        ++zero;
        worst_zero = std::max(worst_zero, std::abs(a - fd[k]));
        continue;
      }
      const double e = rel_diff(a, fd[k]);
      if (e > worst) {
        worst = e;
        worst_name = fmt::format("{}[{}]", name, idx[k]);
      }
    }
    coords += idx.size();
    ++tensor;
  });
  return {worst <= kFiniteDiffRel && worst_zero <= resolution,
          fmt::format("{} coordinates over {} tensors: worst relative {:.2e} at {}; {} zero-gradient "
                      "coordinates within {:.1e} absolute (worst {:.1e})",
                      coords, tensor, worst, worst_name, zero, resolution, worst_zero)};
}

// --- 4 -------------------------------------------------------------------------

ModelConfig ledger_config() {
  ModelConfig cfg;
  cfg.b = 4;
  cfg.s = 8;
  cfg.h = 64;
  cfg.n = 16;
  cfg.v = 64;
  cfg.layers = 1;
  return cfg;
}

Outcome ledger_vs_cost_table() {
  const ModelConfig cfg = ledger_config();
  const LayerWeights lw = ModelWeights::init(cfg, 4).layers[0];
  const Matrix x = random_matrix(cfg.tokens(), cfg.h, 5);
  Outcome out;
  for (int q : {2, 4}) {
    const int p = q * q;
    const CostBreakdown want2d = summa2d_costs(ProblemSize::from(cfg), p);
    Mesh mesh(lockstep(q));
    Workspace ws(p);
    std::vector<ShardedLayer> layers{distribute(lw, mesh)};
    CheckpointStore store;
    const ShardedMatrix xs = scatter(x, mesh);
    checkpointed_forward(mesh, layers, xs, store, cfg, ws);
    const CommReport fwd = mesh.ledger_report();
    mesh.reset_ledger();
    checkpointed_backward(mesh, layers, xs, store, cfg, ws);
    const CommReport bwd = mesh.ledger_report();
    double fwd_err = 0.0, ratio_err = 0.0;
    for (std::size_t d = 0; d < fwd.devices.size(); ++d) {
      const double f = fwd.devices[d].modeled.broadcast_cost + fwd.devices[d].modeled.reduce_cost;
      const double b = bwd.devices[d].modeled.broadcast_cost + bwd.devices[d].modeled.reduce_cost;
      fwd_err = std::max(fwd_err, rel_diff(f, want2d.fwd_comm));
      ratio_err = std::max(ratio_err, rel_diff(b, 3.0 * f));
    }

    const CostBreakdown want1d = megatron_costs(ProblemSize::from(cfg), p);
    Mesh flat(lockstep(q));
    const BaselineLayer bl = distribute_baseline(lw, p, cfg);
    baseline_1d_layer_forward(flat, x, bl, cfg);
    const CommReport bf = flat.ledger_report();
    flat.reset_ledger();
    auto [y, ctx] = baseline_1d_layer_forward(flat, x, bl, cfg);  // replay
    baseline_1d_layer_backward(flat, y, ctx, bl, cfg);
    const CommReport bb = flat.ledger_report();
    double base_err = 0.0, base_ratio = 0.0;
    for (std::size_t d = 0; d < bf.devices.size(); ++d) {
      const double f = bf.devices[d].modeled.allreduce_cost;
      base_err = std::max(base_err, rel_diff(f, want1d.fwd_comm));
      base_ratio = std::max(base_ratio, rel_diff(bb.devices[d].modeled.allreduce_cost, 2.0 * f));
    }
    out.pass = out.pass && fwd_err <= kLedgerRel && ratio_err <= kLedgerRel && base_err <= kLedgerRel &&
               base_ratio <= kLedgerRel;
    out.detail += fmt::format("p={}: 2d fwd {:.1e} bwd/3fwd {:.1e}, 1d fwd {:.1e} bwd/2fwd {:.1e}; ", p,
                              fwd_err, ratio_err, base_err, base_ratio);
  }
  return out;
}

// --- 5 -------------------------------------------------------------------------

Outcome computation_counters() {
  const ModelConfig cfg = ledger_config();
  Outcome out;
  for (int q : {1, 2, 4}) {
    const std::uint64_t p = static_cast<std::uint64_t>(q * q);
    const std::uint64_t b = cfg.b, s = cfg.s, h = cfg.h;
    const std::uint64_t want = (12 * b * s * h * h + 2 * b * s * s * h) / p;
    Mesh mesh(lockstep(q));
    Workspace ws(mesh.p());
    std::vector<ShardedLayer> layers{distribute(ModelWeights::init(cfg, 4).layers[0], mesh)};
    CheckpointStore store;
    const ShardedMatrix xs = scatter(random_matrix(cfg.tokens(), cfg.h, 5), mesh);
    checkpointed_forward(mesh, layers, xs, store, cfg, ws);
    const CommReport fwd = mesh.ledger_report();
    mesh.reset_ledger();
    checkpointed_backward(mesh, layers, xs, store, cfg, ws);
    const CommReport bwd = mesh.ledger_report();
    bool ok = true;
    for (std::size_t d = 0; d < fwd.devices.size(); ++d) {
      ok = ok && fwd.devices[d].macs == want && bwd.devices[d].macs == 3 * want;
    }
    out.pass = out.pass && ok;
    out.detail += fmt::format("p={}: fwd {} (want {}) bwd {}; ", p, fwd.devices[0].macs, want,
                              bwd.devices[0].macs);
  }
  return out;
}

// --- 6 -------------------------------------------------------------------------

MemoryReport memory_run(const ModelConfig& cfg, int q) {
  Mesh mesh(lockstep(q));
  const BufferPlan plan = plan_buffers(cfg, mesh.config());
  MemoryTracker tracker(mesh.p(), plan, {}, cfg.layers);
  Workspace ws(mesh.p());
  const ModelWeights w = ModelWeights::init(cfg, 6);
  std::vector<ShardedLayer> layers;
  for (const auto& l : w.layers) layers.push_back(distribute(l, mesh));
  const ShardedMatrix x = scatter(random_matrix(cfg.tokens(), cfg.h, 7), mesh);
  CheckpointStore store;
  checkpointed_forward(mesh, layers, x, store, cfg, ws, &tracker);
  checkpointed_backward(mesh, layers, x, store, cfg, ws, &tracker);
  return tracker.report();
}

Outcome memory_accounting() {
  ModelConfig cfg = ledger_config();
  const std::size_t bsh = cfg.b * cfg.s * cfg.h;
  bool ok = true;
  std::string detail;
  for (std::size_t n : {1, 3}) {
    cfg.layers = n;
    const MemoryReport r = memory_run(cfg, 2);
    for (int d = 0; d < 4; ++d) {
      ok = ok && r.peak(d, BufferCategory::Checkpoint) == n * bsh / 4 &&
           r.peak(d, BufferCategory::Forward) == 9 * bsh / 4;
    }
    detail += fmt::format("N={}: checkpoint {} forward {}; ", n, r.max_peak(BufferCategory::Checkpoint),
                          r.max_peak(BufferCategory::Forward));
  }
  cfg.layers = 2;
  const MemoryReport one = memory_run(cfg, 1);
  const MemoryReport four = memory_run(cfg, 2);
  for (int d = 0; d < 4; ++d) ok = ok && one.activation_peak(0) == 4 * four.activation_peak(d);
  detail += fmt::format("activation peak q=1 {} q=2 {}", one.activation_peak(0), four.activation_peak(0));
  return {ok, detail};
}

// --- 7 -------------------------------------------------------------------------

Outcome scaling_predictions() {
  const ProblemSize strong{48, 512, 4608, 576};
  std::vector<double> comm;
  bool decreasing = true;
  for (int p : {4, 16, 36, 64}) {
    comm.push_back(summa2d_costs(strong, p).comm());
    if (comm.size() > 1 && !(comm.back() < comm[comm.size() - 2])) decreasing = false;
  }
  bool crossover = true;
  std::string ratios;
  for (const auto& [p, r] : throughput_ratios(published_weak_scaling())) {
    if (p >= 16 && !(r > 1.0)) crossover = false;
    ratios += fmt::format(" p={}:{:.5f}", p, r);
  }
  return {decreasing && crossover,
          fmt::format("strong T_comm {:.4g} {:.4g} {:.4g} {:.4g} (strictly decreasing: {}); weak "
                      "throughput ratio{} (>1 from p=16: {})",
                      comm[0], comm[1], comm[2], comm[3], decreasing ? "yes" : "no", ratios,
                      crossover ? "yes" : "no")};
}

// --- 8 -------------------------------------------------------------------------

Outcome isoefficiency_laws() {
  const double meg = isoefficiency_growth(Scheme::Megatron, 4, 16);
  const double two_d = isoefficiency_growth(Scheme::Summa2d, 16, 64);
  const ProblemSize base{8, 512, 1024, 16};
  const EfficiencyPoint ref = predicted_efficiency(Scheme::Summa2d, base, 4);
  const double ref_ratio = comm_work_ratio(Scheme::Summa2d, base, 4);
  double drift = 0.0;
  for (int p : {4, 16, 64}) {
    const ProblemSize z = scale_to_work(base, isoefficiency_required_W(Scheme::Summa2d, p, ref));
    drift = std::max(drift, std::abs(comm_work_ratio(Scheme::Summa2d, z, p) / ref_ratio - 1.0));
  }
  return {meg == 64.0 && two_d == 27.0 && drift <= kIsoRoundTrip,
          fmt::format("megatron 4->16 x{}, summa2d 16->64 x{}, round-trip drift {:.2f}%", meg, two_d,
                      100 * drift)};
}

// --- 9 -------------------------------------------------------------------------

Outcome placement_accounting() {
  ModelConfig cfg = ledger_config();
  const LayerWeights lw = ModelWeights::init(cfg, 9).layers[0];
  const Matrix x = random_matrix(cfg.tokens(), cfg.h, 9);
  std::uint64_t internode[2] = {0, 0};
  int span[2] = {0, 0};
  int k = 0;
  for (Placement pl : {Placement::Natural, Placement::Bunched}) {
    MeshConfig mc = lockstep(4);
    mc.node_size = 4;
    mc.placement = pl;
    Mesh mesh(mc);
    Workspace ws(mesh.p());
    transformer_layer_forward(mesh, scatter(x, mesh), distribute(lw, mesh), cfg, ws);
    internode[k] = placement_traffic(mesh.ledger_report()).internode;
    span[k] = mesh.group_node_span(Axis::Col, 0);
    ++k;
  }
  return {internode[1] < internode[0] && span[0] == 4 && span[1] == 2,
          fmt::format("internode scalars natural {} bunched {}; column node span {} -> {}",
                      internode[0], internode[1], span[0], span[1])};
}

// --- 10 ------------------------------------------------------------------------

struct DeterminismRun {
  double loss = 0.0;
  ModelWeights grads;
  std::string csv;
};

DeterminismRun determinism_run(ExecutionMode mode) {
  ModelConfig cfg = ledger_config();
  cfg.layers = 2;
  MeshConfig mc = lockstep(2);
  mc.mode = mode;
  Mesh mesh(mc);
  Workspace ws(mesh.p());
  ShardedModel model = distribute(ModelWeights::init(cfg, 5), mesh, cfg);
  DeterminismRun r;
  const DistributedResult got = distributed_loss_and_grads(mesh, model, make_batch(cfg, 5), cfg, ws);
  r.loss = got.loss;
  r.grads = collect(got.grads, cfg);
  std::ostringstream out;
  write_ledger_csv(mesh.ledger_report(), out);
  const int ps[] = {4, 16, 64};
  write_scaling_csv(scaling_table(ScalingMode::Weak, cfg, ps), out);
  write_memory_csv(memory_run(cfg, 2), out);
  r.csv = out.str();
  return r;
}

Outcome determinism() {
  const DeterminismRun a = determinism_run(ExecutionMode::Lockstep);
  const DeterminismRun b = determinism_run(ExecutionMode::Lockstep);
  const DeterminismRun t = determinism_run(ExecutionMode::Threaded);
  const bool bytes = a.csv == b.csv;
  const bool bits = a.loss == b.loss && max_abs_diff(a.grads, b.grads) == 0.0;
  const double threaded = std::max(std::abs(t.loss - a.loss), max_abs_diff(t.grads, a.grads));
  return {bytes && bits && threaded <= kThreadedTol,
          fmt::format("csv {} bytes identical: {}; loss/grads bit-identical: {}; threaded diff {:.1e}",
                      a.csv.size(), bytes ? "yes" : "no", bits ? "yes" : "no", threaded)};
}

struct Criterion {
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace
}  // namespace tp2d

int main(int argc, char** argv) {
  using namespace tp2d;
  CLI::App app{"tp2d acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-10)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria = {
      {"oracle equivalence", oracle_equivalence},
      {"SUMMA kernel equivalence", kernel_equivalence},
      {"gradient checks", gradient_checks},
      {"ledger vs cost table", ledger_vs_cost_table},
      {"computation counters", computation_counters},
      {"memory accounting", memory_accounting},
      {"cost-model scaling predictions", scaling_predictions},
      {"isoefficiency laws", isoefficiency_laws},
      {"placement accounting", placement_accounting},
      {"determinism", determinism},
  };
  bool all = true;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    if (only != 0 && static_cast<int>(k) + 1 != only) continue;
    Outcome o;
    try {
      o = criteria[k].run();
    } catch (const std::exception& e) {
      o = {false, fmt::format("exception: {}", e.what())};
    }
    all = all && o.pass;
    if (o.detail.ends_with("; ")) o.detail.resize(o.detail.size() - 2);
    fmt::print("criterion {:>2} {:<32} {}  {}\n", k + 1, criteria[k].name, o.pass ? "PASS" : "FAIL",
               o.detail);
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}

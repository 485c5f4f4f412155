// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "tp2d/batch.hpp"
#include "tp2d/error.hpp"
#include "tp2d/membuf.hpp"
#include "tp2d/model.hpp"
#include "tp2d/serial.hpp"

namespace tp2d::cli {

namespace {

constexpr double kDefaultLossTol = 1e-9;
constexpr double kDefaultGradTol = 1e-8;
constexpr double kLedgerTol = 1e-9;
constexpr double kDefaultModeTol = 1e-9;

double residual(double got, double want) {
  return std::abs(got - want) / std::max(std::abs(want), 1.0);
}

const char* verdict(bool ok) { return ok ? "PASS" : "FAIL"; }

struct LayerLedger {
  CommReport forward;
  CommReport backward;
};

// One checkpointed layer, forward then backward with recompute.
LayerLedger layer_ledger(const RunOptions& opts, int q) {
  ModelConfig cfg = opts.cfg;
  cfg.layers = 1;
  Mesh mesh(opts.mesh(q));
  Workspace ws(mesh.p());
  std::vector<ShardedLayer> layers{distribute(ModelWeights::init(cfg, opts.seed).layers[0], mesh)};
  Rng rng(opts.seed);
  const ShardedMatrix x = scatter(random_uniform(cfg.tokens(), cfg.h, rng), mesh);
  CheckpointStore store;
  checkpointed_forward(mesh, layers, x, store, cfg, ws);
  LayerLedger out;
  out.forward = mesh.ledger_report();
  mesh.reset_ledger();
  checkpointed_backward(mesh, layers, x, store, cfg, ws);
  out.backward = mesh.ledger_report();
  return out;
}

std::ostream* open_output(const std::string& path, std::ofstream& file, std::ostream& fallback) {
  if (path.empty()) return &fallback;
  file.open(path, std::ios::binary);
  if (!file) throw ConfigError(fmt::format("cannot open '{}' for writing", path));
  return &file;
}

}  // namespace

MeshConfig RunOptions::mesh(int side) const {
  MeshConfig m;
  m.q = side;
  m.mode = mode;
  m.placement = placement;
  m.node_size = node_size;
  m.cost.beta = beta;
  m.validate();
  return m;
}

int cmd_verify(const RunOptions& opts, std::ostream& report) {
  const double loss_tol = opts.tolerance.value_or(kDefaultLossTol);
  const double grad_tol = opts.tolerance.value_or(kDefaultGradTol);
  for (int q : opts.q) opts.cfg.validate_for_mesh(q);

  const ModelWeights w = ModelWeights::init(opts.cfg, opts.seed);
  const Batch batch = make_batch(opts.cfg, opts.seed);
  const SerialResult want = serial_loss_and_grads(w, batch, opts.cfg);

  if (!opts.out.empty() && opts.q.size() != 1) {
    throw ConfigError("verify --out writes one ledger and needs a single --q");
  }
  std::ofstream file;
  bool all = true;
  for (int q : opts.q) {
    const MeshConfig mc = opts.mesh(q);
    Mesh mesh(mc);
    Workspace ws(mesh.p());
    ShardedModel model = distribute(w, mesh, opts.cfg);
    const DistributedResult got = distributed_loss_and_grads(mesh, model, batch, opts.cfg, ws);
    if (!opts.out.empty()) write_ledger_csv(mesh.ledger_report(), *open_output(opts.out, file, report));

    const double loss_diff = std::abs(got.loss - want.loss);
    const double grad_diff = max_abs_diff(collect(got.grads, opts.cfg), want.grads);

    const int p = q * q;
    const CostBreakdown formula = summa2d_costs(ProblemSize::from(opts.cfg), p, opts.beta);
    const LayerLedger ll = layer_ledger(opts, q);
    double fwd_res = 0.0, bwd_res = 0.0, mac_res = 0.0;
    for (std::size_t d = 0; d < ll.forward.devices.size(); ++d) {
      fwd_res = std::max(fwd_res, residual(ll.forward.devices[d].modeled.total(), formula.fwd_comm));
      bwd_res = std::max(bwd_res, residual(ll.backward.devices[d].modeled.total(), formula.bwd_comm));
      mac_res = std::max(mac_res, residual(static_cast<double>(ll.forward.devices[d].macs), formula.fwd_comp));
    }
    const bool loss_ok = loss_diff <= loss_tol;
    const bool grad_ok = grad_diff <= grad_tol;
    const bool ledger_ok = fwd_res <= kLedgerTol && bwd_res <= kLedgerTol && mac_res == 0.0;
    all = all && loss_ok && grad_ok && ledger_ok;

    fmt::print(report, "verify q={} ({} devices, {}, {} placement, node size {})\n", q, p,
               to_string(mc.mode), to_string(mc.placement), mc.node_size);
    fmt::print(report, "  config               {}\n", opts.cfg.describe());
    fmt::print(report, "  loss                 serial {:.17g} mesh {:.17g}\n", want.loss, got.loss);
    fmt::print(report, "  max abs loss diff    {:.3e}  (tol {:.1e})  {}\n", loss_diff, loss_tol, verdict(loss_ok));
    fmt::print(report, "  max abs grad diff    {:.3e}  (tol {:.1e})  {}\n", grad_diff, grad_tol, verdict(grad_ok));
    fmt::print(report, "  ledger fwd residual  {:.3e}  (formula {:.6g})\n", fwd_res, formula.fwd_comm);
    fmt::print(report, "  ledger bwd residual  {:.3e}  (formula {:.6g})\n", bwd_res, formula.bwd_comm);
    fmt::print(report, "  forward MAC residual {:.3e}  (formula {:.6g})  {}\n", mac_res, formula.fwd_comp,
               verdict(ledger_ok));
  }
  fmt::print(report, "result: {}\n", verdict(all));
  return all ? kExitPass : kExitNumerical;
}

int cmd_cost(const RunOptions& opts, std::ostream& out) {
  opts.cfg.validate();
  std::vector<ScalingRow> rows;
  for (int q : opts.q) {
    if (q < 1) throw ConfigError(fmt::format("mesh side must be >= 1, got {}", q));
    const auto r = cost_rows(opts.cfg, q * q, {.beta = opts.beta});
    rows.insert(rows.end(), r.begin(), r.end());
  }
  std::ofstream file;
  write_scaling_csv(rows, *open_output(opts.out, file, out));
  return kExitPass;
}

int cmd_scaling(const RunOptions& opts, const std::string& mode, std::ostream& out) {
  const ScalingOptions scaling{.beta = opts.beta};
  std::vector<ScalingRow> rows;
  if (mode == "published") {
    rows = published_weak_scaling(scaling);
  } else {
    std::vector<int> ps;
    for (int q : opts.q) ps.push_back(q * q);
    rows = scaling_table(parse_scaling_mode(mode), opts.cfg, ps, scaling);
  }
  std::ofstream file;
  write_scaling_csv(rows, *open_output(opts.out, file, out));
  for (const auto& [p, ratio] : throughput_ratios(rows)) {
    fmt::print(std::cerr, "# p={} predicted throughput summa2d/megatron {:.6f}\n", p, ratio);
  }
  return kExitPass;
}

int cmd_bench(const RunOptions& opts, std::ostream& report) {
  const double tol = opts.tolerance.value_or(kDefaultModeTol);
  ModelConfig cfg = opts.cfg;
  cfg.layers = 1;
  for (int q : opts.q) cfg.validate_for_mesh(q);
  const LayerWeights lw = ModelWeights::init(cfg, opts.seed).layers[0];
  Rng rng(opts.seed + 1);
  const Matrix x = random_uniform(cfg.tokens(), cfg.h, rng);
  const Matrix up = random_uniform(cfg.tokens(), cfg.h, rng);

  struct Timed {
    Matrix y;
    Matrix x_grad;
    LayerWeights grads;
    CommReport ledger;
    double forward_ms = 0.0;
    double backward_ms = 0.0;
  };
  const auto run = [&](int q, ExecutionMode mode) {
    RunOptions o = opts;
    o.mode = mode;
    Mesh mesh(o.mesh(q));
    Workspace ws(mesh.p());
    const ShardedLayer layer = distribute(lw, mesh);
    const ShardedMatrix xs = scatter(x, mesh);
    const ShardedMatrix us = scatter(up, mesh);
    Timed t;
    auto t0 = std::chrono::steady_clock::now();
    auto [y, ctx] = transformer_layer_forward(mesh, xs, layer, cfg, ws);
    auto t1 = std::chrono::steady_clock::now();
    LayerGrads g = transformer_layer_backward(mesh, us, ctx, layer, ws);
    auto t2 = std::chrono::steady_clock::now();
    t.forward_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    t.backward_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
    t.y = gather(y);
    t.x_grad = gather(g.x_grad);
    t.grads = collect(g.params);
    t.ledger = mesh.ledger_report();
    return t;
  };

  std::ofstream file;
  std::ostream& out = *open_output(opts.out, file, report);
  bool all = true;
  for (int q : opts.q) {
    const Timed lock = run(q, ExecutionMode::Lockstep);
    const Timed thr = run(q, ExecutionMode::Threaded);
    double diff = std::max(max_abs_diff(lock.y, thr.y), max_abs_diff(lock.x_grad, thr.x_grad));
    LayerWeights::for_each(lock.grads, [&](const char* name, const Matrix& m) {
      LayerWeights::for_each(thr.grads, [&](const char* n2, const Matrix& m2) {
        if (std::string_view(name) == n2) diff = std::max(diff, max_abs_diff(m, m2));
      });
    });
    const bool same_ledger = lock.ledger == thr.ledger;
    const bool ok = diff <= tol && same_ledger;
    all = all && ok;
    const DeviceLedger d = lock.ledger.at(0, 0);
    fmt::print(out, "bench q={} ({} devices) {}\n", q, q * q, cfg.describe());
    fmt::print(out, "  lockstep  forward {:9.3f} ms  backward {:9.3f} ms\n", lock.forward_ms, lock.backward_ms);
    fmt::print(out, "  threaded  forward {:9.3f} ms  backward {:9.3f} ms\n", thr.forward_ms, thr.backward_ms);
    fmt::print(out, "  device (0,0) ledger: broadcast {:.6g} reduce {:.6g} allreduce {:.6g} auxiliary {:.6g} macs {}\n",
               d.modeled.broadcast_cost, d.modeled.reduce_cost, d.modeled.allreduce_cost,
               d.auxiliary.total(), d.macs);
    fmt::print(out, "  threaded vs lockstep max diff {:.3e} (tol {:.1e}), ledgers identical: {}  {}\n", diff,
               tol, same_ledger ? "yes" : "no", verdict(ok));
  }
  fmt::print(out, "result: {}\n", verdict(all));
  return all ? kExitPass : kExitNumerical;
}

}  // namespace tp2d::cli

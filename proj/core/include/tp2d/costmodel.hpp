// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Closed-form per-device, per-layer costs of the two schemes, in units of
// beta * scalars (communication) and multiply-accumulates (computation):
//
//   megatron  fwd_comm = 4 (p-1)/p * bsh
//   summa2d   fwd_comm = log2(p) / (2 sqrt(p)) * (7bsh + 12h^2)
//   both      fwd_comp = (12bsh^2 + 2bs^2h) / p,  bwd_comp = 3 fwd_comp
//
// Backward communication is 2x forward for megatron and 3x for summa2d, which
// recomputes the forward products during backward.

#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

#include "tp2d/model_config.hpp"

namespace tp2d {

enum class Scheme { Megatron, Summa2d };

std::string_view to_string(Scheme s);
Scheme parse_scheme(std::string_view s);

/// Problem dimensions as reals, so growth laws can scale them continuously.
struct ProblemSize {
  double b = 0.0;
  double s = 0.0;
  double h = 0.0;
  double n = 0.0;

  static ProblemSize from(const ModelConfig& cfg);
  /// Serial forward+backward MACs of one layer: 4 (12bsh^2 + 2bs^2h).
  double work() const;
};

struct CostBreakdown {
  double fwd_comm = 0.0;
  double bwd_comm = 0.0;
  double fwd_comp = 0.0;
  double bwd_comp = 0.0;

  double comm() const { return fwd_comm + bwd_comm; }
  double comp() const { return fwd_comp + bwd_comp; }
};

CostBreakdown megatron_costs(const ProblemSize& size, int p, double beta = 1.0);
/// Throws ConfigError unless p is a perfect square.
CostBreakdown summa2d_costs(const ProblemSize& size, int p, double beta = 1.0);
CostBreakdown scheme_costs(Scheme scheme, const ProblemSize& size, int p, double beta = 1.0);

struct EfficiencyPoint {
  int p = 1;
  double W = 0.0;
  double T_comm = 0.0;
  double T_p = 0.0;
  double E = 1.0;
};

/// T_p = W/p + t_comm, E = 1 / (1 + p t_comm / W). Throws DomainError for
/// W <= 0, p < 1 or t_comm < 0.
EfficiencyPoint efficiency(double W, int p, double t_comm);

/// One layer of `size` on p devices: W = size.work(), T_comm from the formulas.
EfficiencyPoint predicted_efficiency(Scheme scheme, const ProblemSize& size, int p,
                                     double beta = 1.0);

/// Factor by which W must grow from p0 to p to hold efficiency:
/// megatron (p/p0)^3, summa2d ((sqrt(p) log2 p) / (sqrt(p0) log2 p0))^3.
/// Throws DomainError for summa2d when p0 or p is 1.
double isoefficiency_growth(Scheme scheme, int p0, int p);
double isoefficiency_required_W(Scheme scheme, int p, const EfficiencyPoint& reference);

/// `base` with b, n and h multiplied by one factor (s fixed) so that work()
/// equals W.
ProblemSize scale_to_work(const ProblemSize& base, double W);

/// p T_comm / W through the cost formulas.
double comm_work_ratio(Scheme scheme, const ProblemSize& size, int p, double beta = 1.0);

// --- scaling tables ----------------------------------------------------------

enum class ScalingMode { Weak, Strong };
std::string_view to_string(ScalingMode m);
ScalingMode parse_scaling_mode(std::string_view s);

struct ScalingRow {
  Scheme scheme = Scheme::Summa2d;
  int p = 1;
  int q = 1;
  ModelConfig cfg;
  CostBreakdown cost;
  double T_p = 0.0;         // layers * (gamma * comp + comm)
  double efficiency = 1.0;  // serial time / (p T_p)
  double throughput = 0.0;  // sequences per unit time, b / T_p
};

struct ScalingOptions {
  double beta = 1.0;
  double gamma = 1.0;  // time per MAC
};

/// One row per scheme for one configuration on p devices.
std::vector<ScalingRow> cost_rows(const ModelConfig& cfg, int p, const ScalingOptions& opts = {});

/// Weak mode: starting from `base` at p_list[0], h and b scale with sqrt(p)
/// and n with p; megatron rows keep base.b. Strong mode: `base` on every p.
/// Throws ConfigError when a scaled config breaks divisibility.
std::vector<ScalingRow> scaling_table(ScalingMode mode, const ModelConfig& base,
                                      std::span<const int> p_list,
                                      const ScalingOptions& opts = {});

/// The published weak-scaling configurations (p = 4, 16, 36, 64; s = 512,
/// 24 layers) with their per-scheme batch sizes.
std::vector<ScalingRow> published_weak_scaling(const ScalingOptions& opts = {});

/// summa2d throughput over megatron throughput for rows with matching p.
std::vector<std::pair<int, double>> throughput_ratios(std::span<const ScalingRow> rows);

/// Header scheme,p,q,b,s,h,n,fwd_comm,bwd_comm,fwd_comp,bwd_comp,T_p,efficiency.
void write_scaling_csv(std::span<const ScalingRow> rows, std::ostream& out);

bool is_perfect_square(int p);
int integer_sqrt(int p);

}  // namespace tp2d

// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tp2d/costmodel.hpp"

#include <cmath>
#include <ostream>

#include <fmt/format.h>

#include "tp2d/error.hpp"

namespace tp2d {

std::string_view to_string(Scheme s) {
  return s == Scheme::Megatron ? "megatron" : "summa2d";
}

Scheme parse_scheme(std::string_view s) {
  if (s == "megatron") return Scheme::Megatron;
  if (s == "summa2d") return Scheme::Summa2d;
  throw ConfigError(fmt::format("unknown scheme '{}'", s));
}

std::string_view to_string(ScalingMode m) { return m == ScalingMode::Weak ? "weak" : "strong"; }

ScalingMode parse_scaling_mode(std::string_view s) {
  if (s == "weak") return ScalingMode::Weak;
  if (s == "strong") return ScalingMode::Strong;
  throw ConfigError(fmt::format("unknown scaling mode '{}'", s));
}

bool is_perfect_square(int p) {
  if (p < 1) return false;
  const int r = integer_sqrt(p);
  return r * r == p;
}

int integer_sqrt(int p) {
  int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(p))));
  while (r > 0 && r * r > p) --r;
  while ((r + 1) * (r + 1) <= p) ++r;
  return r;
}

ProblemSize ProblemSize::from(const ModelConfig& cfg) {
  return {static_cast<double>(cfg.b), static_cast<double>(cfg.s), static_cast<double>(cfg.h),
          static_cast<double>(cfg.n)};
}

double ProblemSize::work() const { return 4.0 * (12.0 * b * s * h * h + 2.0 * b * s * s * h); }

namespace {

double forward_comp(const ProblemSize& z, int p) {
  return (12.0 * z.b * z.s * z.h * z.h + 2.0 * z.b * z.s * z.s * z.h) / p;
}

void check_p(int p) {
  if (p < 1) throw ConfigError(fmt::format("device count must be >= 1, got {}", p));
}

}  // namespace

CostBreakdown megatron_costs(const ProblemSize& size, int p, double beta) {
  check_p(p);
  CostBreakdown c;
  c.fwd_comm = 4.0 * (p - 1) / p * size.b * size.s * size.h * beta;
  c.bwd_comm = 2.0 * c.fwd_comm;
  c.fwd_comp = forward_comp(size, p);
  c.bwd_comp = 3.0 * c.fwd_comp;
  return c;
}

CostBreakdown summa2d_costs(const ProblemSize& size, int p, double beta) {
  check_p(p);
  if (!is_perfect_square(p)) {
    throw ConfigError(fmt::format("summa2d needs a square device count, got {}", p));
  }
  const double factor = std::log2(static_cast<double>(p)) / (2.0 * integer_sqrt(p));
  CostBreakdown c;
  c.fwd_comm = factor * (7.0 * size.b * size.s * size.h + 12.0 * size.h * size.h) * beta;
  c.bwd_comm = 3.0 * c.fwd_comm;
  c.fwd_comp = forward_comp(size, p);
  c.bwd_comp = 3.0 * c.fwd_comp;
  return c;
}

CostBreakdown scheme_costs(Scheme scheme, const ProblemSize& size, int p, double beta) {
  return scheme == Scheme::Megatron ? megatron_costs(size, p, beta)
                                    : summa2d_costs(size, p, beta);
}

EfficiencyPoint efficiency(double W, int p, double t_comm) {
  if (!(W > 0.0)) throw DomainError("efficiency: W must be > 0");
  if (p < 1) throw DomainError("efficiency: p must be >= 1");
  if (!(t_comm >= 0.0)) throw DomainError("efficiency: t_comm must be >= 0");
  EfficiencyPoint e;
  e.p = p;
  e.W = W;
  e.T_comm = t_comm;
  e.T_p = W / p + t_comm;
  e.E = 1.0 / (1.0 + p * t_comm / W);
  return e;
}

EfficiencyPoint predicted_efficiency(Scheme scheme, const ProblemSize& size, int p,
                                     double beta) {
  return efficiency(size.work(), p, scheme_costs(scheme, size, p, beta).comm());
}

double isoefficiency_growth(Scheme scheme, int p0, int p) {
  check_p(p0);
  check_p(p);
  if (scheme == Scheme::Megatron) {
    const double r = static_cast<double>(p) / p0;
    return r * r * r;
  }
  if (p0 == 1 || p == 1) {
    throw DomainError("summa2d isoefficiency is undefined at p = 1 (log2 p = 0)");
  }
  const auto law = [](int x) { return std::sqrt(static_cast<double>(x)) * std::log2(x); };
  const double r = law(p) / law(p0);
  return r * r * r;
}

double isoefficiency_required_W(Scheme scheme, int p, const EfficiencyPoint& reference) {
  return reference.W * isoefficiency_growth(scheme, reference.p, p);
}

ProblemSize scale_to_work(const ProblemSize& base, double W) {
  if (!(W > 0.0) || !(base.work() > 0.0)) throw DomainError("scale_to_work: W must be > 0");
  const auto scaled = [&](double c) {
    return ProblemSize{base.b * c, base.s, base.h * c, base.n * c};
  };
  // work() is increasing in c; bracket then bisect.
  double lo = 1.0;
  double hi = 1.0;
  while (scaled(lo).work() > W) lo /= 2.0;
  while (scaled(hi).work() < W) hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (scaled(mid).work() < W ? lo : hi) = mid;
  }
  return scaled(0.5 * (lo + hi));
}

double comm_work_ratio(Scheme scheme, const ProblemSize& size, int p, double beta) {
  return p * scheme_costs(scheme, size, p, beta).comm() / size.work();
}

// --- scaling tables ----------------------------------------------------------

namespace {

ScalingRow make_row(Scheme scheme, const ModelConfig& cfg, int p, const ScalingOptions& opts) {
  ScalingRow r;
  r.scheme = scheme;
  r.p = p;
  r.q = is_perfect_square(p) ? integer_sqrt(p) : 0;
  r.cfg = cfg;
  r.cost = scheme_costs(scheme, ProblemSize::from(cfg), p, opts.beta);
  const double compute = opts.gamma * r.cost.comp();
  r.T_p = static_cast<double>(cfg.layers) * (compute + r.cost.comm());
  r.efficiency = compute / (compute + r.cost.comm());
  r.throughput = static_cast<double>(cfg.b) / r.T_p;
  return r;
}

void validate_row_config(Scheme scheme, const ModelConfig& cfg, int p) {
  if (scheme == Scheme::Summa2d) {
    cfg.validate_for_mesh(integer_sqrt(p));
  } else {
    cfg.validate_for_baseline(p);
  }
}

}  // namespace

std::vector<ScalingRow> cost_rows(const ModelConfig& cfg, int p, const ScalingOptions& opts) {
  cfg.validate();
  std::vector<ScalingRow> rows;
  rows.push_back(make_row(Scheme::Megatron, cfg, p, opts));
  if (is_perfect_square(p)) rows.push_back(make_row(Scheme::Summa2d, cfg, p, opts));
  return rows;
}

std::vector<ScalingRow> scaling_table(ScalingMode mode, const ModelConfig& base,
                                      std::span<const int> p_list, const ScalingOptions& opts) {
  if (p_list.empty()) throw ConfigError("scaling_table: empty device list");
  base.validate();
  const int p0 = p_list.front();
  std::vector<ScalingRow> rows;
  for (int p : p_list) {
    check_p(p);
    if (!is_perfect_square(p)) {
      throw ConfigError(fmt::format("scaling_table: device count {} is not square", p));
    }
    ModelConfig cfg = base;
    ModelConfig megatron_cfg = base;
    if (mode == ScalingMode::Weak) {
      if (p % p0 != 0 || !is_perfect_square(p / p0)) {
        throw ConfigError(
            fmt::format("weak scaling from {} to {} devices needs a square ratio", p0, p));
      }
      const std::size_t f = static_cast<std::size_t>(integer_sqrt(p / p0));
      cfg.h = base.h * f;
      cfg.b = base.b * f;
      cfg.n = base.n * static_cast<std::size_t>(p / p0);
      megatron_cfg = cfg;
      megatron_cfg.b = base.b;
    }
    validate_row_config(Scheme::Megatron, megatron_cfg, p);
    validate_row_config(Scheme::Summa2d, cfg, p);
    rows.push_back(make_row(Scheme::Megatron, megatron_cfg, p, opts));
    rows.push_back(make_row(Scheme::Summa2d, cfg, p, opts));
  }
  return rows;
}

std::vector<ScalingRow> published_weak_scaling(const ScalingOptions& opts) {
  struct Entry {
    int p;
    std::size_t megatron_b;
    std::size_t summa2d_b;
    std::size_t h;
    std::size_t n;
  };
  static constexpr Entry kEntries[] = {
      {4, 60, 96, 2048, 32},
      {16, 60, 192, 4096, 64},
      {36, 40, 288, 6120, 72},
      {64, 30, 384, 8192, 128},
  };
  std::vector<ScalingRow> rows;
  for (const Entry& e : kEntries) {
    ModelConfig cfg;
    cfg.s = 512;
    cfg.h = e.h;
    cfg.n = e.n;
    cfg.v = 51200;
    cfg.layers = 24;
    cfg.b = e.megatron_b;
    validate_row_config(Scheme::Megatron, cfg, e.p);
    rows.push_back(make_row(Scheme::Megatron, cfg, e.p, opts));
    cfg.b = e.summa2d_b;
    validate_row_config(Scheme::Summa2d, cfg, e.p);
    rows.push_back(make_row(Scheme::Summa2d, cfg, e.p, opts));
  }
  return rows;
}

std::vector<std::pair<int, double>> throughput_ratios(std::span<const ScalingRow> rows) {
  std::vector<std::pair<int, double>> out;
  for (const auto& a : rows) {
    if (a.scheme != Scheme::Summa2d) continue;
    for (const auto& b : rows) {
      if (b.scheme == Scheme::Megatron && b.p == a.p) {
        out.emplace_back(a.p, a.throughput / b.throughput);
        break;
      }
    }
  }
  return out;
}

void write_scaling_csv(std::span<const ScalingRow> rows, std::ostream& out) {
  out << "scheme,p,q,b,s,h,n,fwd_comm,bwd_comm,fwd_comp,bwd_comp,T_p,efficiency\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{},{},{},{},{},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n",
                       to_string(r.scheme), r.p, r.q, r.cfg.b, r.cfg.s, r.cfg.h, r.cfg.n,
                       r.cost.fwd_comm, r.cost.bwd_comm, r.cost.fwd_comp, r.cost.bwd_comp, r.T_p,
                       r.efficiency);
  }
}

}  // namespace tp2d

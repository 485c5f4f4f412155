// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <exception>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include "commands.hpp"
#include "tp2d/error.hpp"

namespace {

using tp2d::cli::RunOptions;

struct Defaults {
  std::size_t b, s, h, n, v, layers;
  std::vector<int> q;
};

// Flags shared by every subcommand. Values land in `opts` after parsing.
void add_run_flags(CLI::App& cmd, RunOptions& opts, const Defaults& d, std::string& mode,
                   std::string& placement, double& tolerance) {
  opts.cfg.b = d.b;
  opts.cfg.s = d.s;
  opts.cfg.h = d.h;
  opts.cfg.n = d.n;
  opts.cfg.v = d.v;
  opts.cfg.layers = d.layers;
  opts.q = d.q;
  cmd.add_option("--q", opts.q, "mesh side(s); p = q^2")->capture_default_str()->expected(1, -1);
  cmd.add_option("--b", opts.cfg.b, "sequences per batch")->capture_default_str();
  cmd.add_option("--s", opts.cfg.s, "sequence length")->capture_default_str();
  cmd.add_option("--h", opts.cfg.h, "hidden size")->capture_default_str();
  cmd.add_option("--n", opts.cfg.n, "attention heads")->capture_default_str();
  cmd.add_option("--v", opts.cfg.v, "vocabulary size")->capture_default_str();
  cmd.add_option("--layers", opts.cfg.layers, "transformer layers")->capture_default_str();
  cmd.add_option("--seed", opts.seed, "parameter and batch seed")->capture_default_str();
  cmd.add_option("--mode", mode, "lockstep or threaded (default: $SUMMA_MESH_MODE, else lockstep)")
      ->check(CLI::IsMember({"lockstep", "threaded"}));
  cmd.add_option("--placement", placement, "natural or bunched")
      ->capture_default_str()
      ->check(CLI::IsMember({"natural", "bunched"}));
  cmd.add_option("--node-size", opts.node_size, "devices per node")->capture_default_str();
  cmd.add_option("--beta", opts.beta, "time per scalar sent")->capture_default_str();
  cmd.add_option("--out", opts.out, "output file");
  cmd.add_option("--tolerance", tolerance, "override the numerical tolerance");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tp2d: 2D SUMMA tensor-parallel transformer on a simulated device mesh"};
  app.require_subcommand(1);
  app.set_help_flag("--help", "print this help and exit");  // -h would clash with --h

  const Defaults verify_defaults{4, 8, 16, 4, 32, 2, {2}};
  const Defaults cost_defaults{2, 8, 16, 4, 32, 1, {1, 2}};
  const Defaults scaling_defaults{16, 512, 1024, 64, 51200, 24, {2, 4, 8}};

  std::map<std::string, RunOptions> runs;
  std::map<std::string, std::string> modes, placements;
  std::map<std::string, double> tolerances;
  std::string scaling_mode = "weak";

  const auto sub = [&](const char* name, const char* help, const Defaults& d) {
    CLI::App* cmd = app.add_subcommand(name, help);
    placements[name] = "natural";
    tolerances[name] = -1.0;
    add_run_flags(*cmd, runs[name], d, modes[name], placements[name], tolerances[name]);
    return cmd;
  };
  CLI::App* verify = sub("verify", "compare the mesh run against the serial oracle", verify_defaults);
  CLI::App* cost = sub("cost", "per-layer cost formulas for both schemes as CSV", cost_defaults);
  CLI::App* scaling = sub("scaling", "weak or strong scaling predictions as CSV", scaling_defaults);
  scaling->add_option("kind", scaling_mode, "weak, strong, or published")
      ->capture_default_str()
      ->check(CLI::IsMember({"weak", "strong", "published"}));
  CLI::App* bench = sub("bench", "time one layer in lockstep and threaded mode", verify_defaults);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return tp2d::cli::kExitConfig;
  }

  try {
    for (auto* cmd : {verify, cost, scaling, bench}) {
      if (!cmd->parsed()) continue;
      const std::string name = cmd->get_name();
      RunOptions& opts = runs[name];
      std::string mode = modes[name];
      if (mode.empty()) {
        const char* env = std::getenv("SUMMA_MESH_MODE");
        mode = env != nullptr && *env != '\0' ? env : "lockstep";
      }
      opts.mode = tp2d::parse_execution_mode(mode);
      opts.placement = tp2d::parse_placement(placements[name]);
      if (tolerances[name] >= 0.0) opts.tolerance = tolerances[name];
      if (cmd == verify) return tp2d::cli::cmd_verify(opts, std::cout);
      if (cmd == cost) return tp2d::cli::cmd_cost(opts, std::cout);
      if (cmd == scaling) return tp2d::cli::cmd_scaling(opts, scaling_mode, std::cout);
      return tp2d::cli::cmd_bench(opts, std::cout);
    }
  } catch (const std::invalid_argument& e) {  // ConfigError, ShapeError
    fmt::print(std::cerr, "config error: {}\n", e.what());
    return tp2d::cli::kExitConfig;
  } catch (const std::domain_error& e) {
    fmt::print(std::cerr, "config error: {}\n", e.what());
    return tp2d::cli::kExitConfig;
  } catch (const std::exception& e) {
    fmt::print(std::cerr, "error: {}\n", e.what());
    return tp2d::cli::kExitNumerical;
  }
  return tp2d::cli::kExitConfig;
}

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "avalanche/cli.hpp"
#include "avalanche/error.hpp"
#include "avalanche/io.hpp"
#include "avalanche/verify.hpp"

namespace {

using avalanche::cli::RunConfig;

struct FlagValues {
  std::optional<std::string> config;
  std::optional<double> r;
  std::optional<std::string> thresholds;
  std::optional<int> depth;
  std::optional<double> x0;
  std::optional<std::string> sizes;
  std::optional<double> t_end;
  std::optional<std::uint64_t> replicas;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> clip_policy;
  std::optional<int> level;
  std::optional<double> alpha;
  std::optional<std::string> phi;
  std::optional<std::uint64_t> population_cap;
  std::optional<unsigned> workers;
  std::optional<std::string> out;
};

void add_common_options(CLI::App* cmd, FlagValues& flags) {
  cmd->add_option("--config", flags.config, "sectioned key=value config file");
  cmd->add_option("--r", flags.r, "rupture ratio in (0,1)");
  cmd->add_option("--thresholds", flags.thresholds, "comma-separated decreasing thresholds");
  cmd->add_option("--depth", flags.depth, "number of thresholds for the geometric rule");
  cmd->add_option("--x0", flags.x0, "initial size");
  cmd->add_option("--sizes", flags.sizes, "comma-separated initial sizes");
  cmd->add_option("--t-end", flags.t_end, "simulation horizon");
  cmd->add_option("--replicas", flags.replicas, "number of independent replicas");
  cmd->add_option("--seed", flags.seed, "master seed (fallback: FRAG_AVALANCHE_SEED, then 1)");
  cmd->add_option("--clip-policy", flags.clip_policy, "edge | conditioned");
  cmd->add_option("--level", flags.level, "projection level for simulate-sizes");
  cmd->add_option("--alpha", flags.alpha, "resolvent parameter");
  cmd->add_option("--phi", flags.phi, "cumulant initial data: one | exp-neg");
  cmd->add_option("--population-cap", flags.population_cap, "branching population cap");
  cmd->add_option("--workers", flags.workers, "worker threads (default: available parallelism)");
  cmd->add_option("--out", flags.out, "output directory");
}

RunConfig build_config(const FlagValues& flags) {
  RunConfig cfg;
  if (flags.config) cfg = avalanche::cli::load_config_file(*flags.config, cfg);
  if (flags.r) cfg.r = *flags.r;
  if (flags.thresholds) cfg.thresholds = avalanche::cli::parse_double_list(*flags.thresholds);
  if (flags.depth) cfg.depth = *flags.depth;
  if (flags.x0) cfg.x0 = *flags.x0;
  if (flags.sizes) cfg.sizes = avalanche::cli::parse_double_list(*flags.sizes);
  if (flags.t_end) cfg.t_end = *flags.t_end;
  if (flags.replicas) cfg.replicas = *flags.replicas;
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.clip_policy) cfg.clip_policy = avalanche::cli::parse_clip_policy(*flags.clip_policy);
  if (flags.level) cfg.level = *flags.level;
  if (flags.alpha) cfg.alpha = *flags.alpha;
  if (flags.phi) cfg.phi = *flags.phi;
  if (flags.population_cap) cfg.population_cap = *flags.population_cap;
  if (flags.workers) cfg.workers = *flags.workers;
  if (flags.out) cfg.out_dir = *flags.out;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"simulator and numerical verifier for the avalanche fragmentation-branching model"};
  app.require_subcommand(1);

  FlagValues flags;
  int exit_code = 0;

  const auto run_guarded = [&](auto&& body) {
    try {
      body();
    } catch (const avalanche::error& e) {
      std::cerr << "error: " << e.what() << "\n";
      exit_code = 1;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      exit_code = 1;
    }
  };

  auto* params_cmd = app.add_subcommand("params", "validate parameters and print the band table");
  add_common_options(params_cmd, flags);
  params_cmd->callback([&] {
    run_guarded([&] { avalanche::cli::run_params(build_config(flags), std::cout); });
  });

  auto* support_cmd = app.add_subcommand("support", "emit the reachable support of x0");
  add_common_options(support_cmd, flags);
  support_cmd->callback([&] {
    run_guarded([&] { avalanche::cli::run_support(build_config(flags)); });
  });

  auto* semigroup_cmd =
      app.add_subcommand("semigroup", "emit transition matrix, resolvent and cumulant solution");
  add_common_options(semigroup_cmd, flags);
  semigroup_cmd->callback([&] {
    run_guarded([&] { avalanche::cli::run_semigroup(build_config(flags)); });
  });

  const auto add_simulate = [&](const char* name, const char* help,
                                avalanche::cli::SimulateKind kind) {
    auto* cmd = app.add_subcommand(name, help);
    add_common_options(cmd, flags);
    cmd->callback([&flags, kind, &run_guarded] {
      run_guarded([&] { avalanche::cli::run_simulate(kind, build_config(flags)); });
    });
  };
  add_simulate("simulate-chain", "uniformized banded size chain",
               avalanche::cli::SimulateKind::chain);
  add_simulate("simulate-sde", "Poisson-measure fragmentation SDE",
               avalanche::cli::SimulateKind::sde);
  add_simulate("simulate-branching", "branching particle system",
               avalanche::cli::SimulateKind::branching);
  add_simulate("simulate-sizes", "projected size-sequence process",
               avalanche::cli::SimulateKind::sizes);

  auto* verify_cmd = app.add_subcommand("verify", "run the full acceptance suite");
  add_common_options(verify_cmd, flags);
  verify_cmd->callback([&] {
    run_guarded([&] {
      const RunConfig cfg = build_config(flags);
      avalanche::verify::VerifyOptions opts;
      opts.seed = avalanche::cli::resolve_seed(cfg);
      opts.workers = cfg.workers;
      const auto results = avalanche::verify::run_all(opts);
      avalanche::verify::print_table(results, std::cout);
      const auto report = avalanche::verify::report_json(results, opts);
      avalanche::io::write_file(std::filesystem::path(cfg.out_dir) / "verify_report.json",
                                report.dump(2) + "\n");
      if (!avalanche::verify::all_pass(results)) exit_code = 2;
    });
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}

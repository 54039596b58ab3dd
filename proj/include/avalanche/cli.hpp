#pragma once

#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "avalanche/error.hpp"
#include "avalanche/io.hpp"
#include "avalanche/kernels.hpp"
#include "avalanche/model.hpp"
#include "avalanche/montecarlo.hpp"
#include "avalanche/semigroup.hpp"
#include "avalanche/stats.hpp"

// Experiment configuration and artifact emission. Artifacts are deterministic
// given (config, seed) for any worker count; the only nondeterministic output
// field is summary.json's wall_time_seconds.

namespace avalanche::cli {

using json = nlohmann::ordered_json;
using kernels::ClipPolicy;
using model::FractalCoord;
using model::ModelParams;

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kSeedEnvVar = "FRAG_AVALANCHE_SEED";
inline constexpr std::uint64_t kDefaultSeed = 1;

struct RunConfig {
  // [model]
  double r = 0.5;
  std::optional<std::vector<double>> thresholds;  // explicit list overrides the rule
  std::string threshold_rule = "geometric:0.25";
  int depth = 2;
  // [run]
  double x0 = 1.0;
  std::vector<double> sizes = {1.0};
  double t_end = 1.0;
  std::uint64_t replicas = 10000;
  std::optional<std::uint64_t> seed;
  ClipPolicy clip_policy = ClipPolicy::edge;
  int level = 0;  // 0 means depth
  double alpha = 2.0;
  std::string phi = "one";  // one | exp-neg
  double semigroup_tol = 1e-12;
  double cumulant_tol = 1e-8;
  std::size_t population_cap = 1'000'000;
  unsigned workers = 0;  // 0 means available parallelism
  // [output]
  std::string out_dir = "out";
};

inline double parse_number(const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    require(used == text.size(), errc::config_error, "bad number '" + text + "'");
    return v;
  } catch (const error&) {
    throw;
  } catch (const std::exception&) {
    fail(errc::config_error, "bad number '" + text + "'");
  }
}

inline std::uint64_t parse_unsigned(const std::string& text) {
  try {
    std::size_t used = 0;
    const std::uint64_t v = std::stoull(text, &used);
    require(used == text.size(), errc::config_error, "bad integer '" + text + "'");
    return v;
  } catch (const error&) {
    throw;
  } catch (const std::exception&) {
    fail(errc::config_error, "bad integer '" + text + "'");
  }
}

inline std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(parse_number(item));
  }
  require(!out.empty(), errc::config_error, "empty number list");
  return out;
}

inline ClipPolicy parse_clip_policy(const std::string& name) {
  if (name == "edge") return ClipPolicy::edge;
  if (name == "conditioned") return ClipPolicy::conditioned;
  fail(errc::config_error, "clip policy must be 'edge' or 'conditioned'");
}

inline std::vector<double> thresholds_from_rule(const std::string& rule, int depth) {
  const std::string prefix = "geometric:";
  require(rule.rfind(prefix, 0) == 0, errc::config_error,
          "unknown threshold rule '" + rule + "' (expected geometric:<base>)");
  const double base = parse_number(rule.substr(prefix.size()));
  return model::geometric_thresholds(base, depth);
}

inline ModelParams make_model(const RunConfig& cfg) {
  if (cfg.thresholds) return model::make_params(cfg.r, *cfg.thresholds);
  return model::make_params(cfg.r, thresholds_from_rule(cfg.threshold_rule, cfg.depth));
}

inline std::uint64_t resolve_seed(const RunConfig& cfg) {
  if (cfg.seed) return *cfg.seed;
  if (const char* env = std::getenv(kSeedEnvVar)) {
    return std::strtoull(env, nullptr, 10);
  }
  return kDefaultSeed;
}

inline unsigned resolve_workers(const RunConfig& cfg) {
  if (cfg.workers > 0) return cfg.workers;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

inline int resolve_level(const RunConfig& cfg, const ModelParams& p) {
  return cfg.level > 0 ? cfg.level : p.depth;
}

/// Applies one key of the sectioned key-value config file; unknown keys and
/// sections are errors.
inline void apply_config_entry(RunConfig& cfg, const std::string& section, const std::string& key,
                               const std::string& value) {
  const auto bad_key = [&]() -> void {
    fail(errc::config_error, "unknown key '" + key + "' in section [" + section + "]");
  };
  if (section == "model") {
    if (key == "r") {
      cfg.r = parse_number(value);
    } else if (key == "thresholds") {
      cfg.thresholds = parse_double_list(value);
    } else if (key == "threshold_rule") {
      cfg.threshold_rule = value;
    } else if (key == "depth") {
      cfg.depth = static_cast<int>(parse_unsigned(value));
    } else {
      bad_key();
    }
  } else if (section == "run") {
    if (key == "x0") {
      cfg.x0 = parse_number(value);
    } else if (key == "sizes") {
      cfg.sizes = parse_double_list(value);
    } else if (key == "t_end") {
      cfg.t_end = parse_number(value);
    } else if (key == "replicas") {
      cfg.replicas = parse_unsigned(value);
    } else if (key == "seed") {
      cfg.seed = parse_unsigned(value);
    } else if (key == "clip_policy") {
      cfg.clip_policy = parse_clip_policy(value);
    } else if (key == "level") {
      cfg.level = static_cast<int>(parse_unsigned(value));
    } else if (key == "alpha") {
      cfg.alpha = parse_number(value);
    } else if (key == "phi") {
      cfg.phi = value;
    } else if (key == "semigroup_tol") {
      cfg.semigroup_tol = parse_number(value);
    } else if (key == "cumulant_tol") {
      cfg.cumulant_tol = parse_number(value);
    } else if (key == "population_cap") {
      cfg.population_cap = parse_unsigned(value);
    } else if (key == "workers") {
      cfg.workers = static_cast<unsigned>(parse_unsigned(value));
    } else {
      bad_key();
    }
  } else if (section == "output") {
    if (key == "dir") {
      cfg.out_dir = value;
    } else {
      bad_key();
    }
  } else {
    fail(errc::config_error, "unknown section [" + section + "]");
  }
}

/// Serializes a RunConfig in the sectioned key=value format accepted by
/// load_config_file; the round trip is lossless.
inline std::string save_config(const RunConfig& cfg) {
  std::ostringstream out;
  out << "[model]\n";
  out << "r = " << io::float17(cfg.r) << "\n";
  if (cfg.thresholds) {
    out << "thresholds = ";
    for (std::size_t k = 0; k < cfg.thresholds->size(); ++k) {
      if (k > 0) out << ",";
      out << io::float17((*cfg.thresholds)[k]);
    }
    out << "\n";
  } else {
    out << "threshold_rule = " << cfg.threshold_rule << "\n";
  }
  out << "depth = " << cfg.depth << "\n";
  out << "\n[run]\n";
  out << "x0 = " << io::float17(cfg.x0) << "\n";
  out << "sizes = ";
  for (std::size_t k = 0; k < cfg.sizes.size(); ++k) {
    if (k > 0) out << ",";
    out << io::float17(cfg.sizes[k]);
  }
  out << "\n";
  out << "t_end = " << io::float17(cfg.t_end) << "\n";
  out << "replicas = " << cfg.replicas << "\n";
  if (cfg.seed) out << "seed = " << *cfg.seed << "\n";
  out << "clip_policy = " << kernels::clip_policy_name(cfg.clip_policy) << "\n";
  if (cfg.level > 0) out << "level = " << cfg.level << "\n";
  out << "alpha = " << io::float17(cfg.alpha) << "\n";
  out << "phi = " << cfg.phi << "\n";
  out << "semigroup_tol = " << io::float17(cfg.semigroup_tol) << "\n";
  out << "cumulant_tol = " << io::float17(cfg.cumulant_tol) << "\n";
  out << "population_cap = " << cfg.population_cap << "\n";
  if (cfg.workers > 0) out << "workers = " << cfg.workers << "\n";
  out << "\n[output]\n";
  out << "dir = " << cfg.out_dir << "\n";
  return out.str();
}

inline RunConfig load_config_file(const std::filesystem::path& path, RunConfig cfg = {}) {
  const std::string text = io::read_file(path);
  std::stringstream ss(text);
  std::string line;
  std::string section;
  int line_no = 0;
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      require(line.back() == ']', errc::config_error,
              "bad section header at line " + std::to_string(line_no));
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, errc::config_error,
            "expected key = value at line " + std::to_string(line_no));
    require(!section.empty(), errc::config_error,
            "key outside a section at line " + std::to_string(line_no));
    apply_config_entry(cfg, section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Artifact encoding

/// Coordinate columns of the event-log CSV keep the pre-clip exponent record
/// next to the clipped_band marker.
inline void append_coord_full(std::vector<std::string>& row, const FractalCoord& c) {
  row.push_back(std::to_string(c.root));
  row.push_back(std::to_string(c.i));
  row.push_back(std::to_string(c.j));
  row.push_back(std::to_string(c.clipped_band));
}

/// Terminal-distribution rows identify clipped coordinates by value alone;
/// root/i/j are -1 because aggregation by identity collapses pre-clip records.
inline void append_coord_terminal(std::vector<std::string>& row, const FractalCoord& c) {
  if (c.clipped()) {
    row.push_back("-1");
    row.push_back("-1");
    row.push_back("-1");
  } else {
    row.push_back(std::to_string(c.root));
    row.push_back(std::to_string(c.i));
    row.push_back(std::to_string(c.j));
  }
}

inline json model_json(const ModelParams& p) {
  json j;
  j["r"] = p.r;
  j["beta"] = p.beta;
  j["lambda0"] = p.lambda0;
  j["thresholds"] = p.thresholds;
  j["depth"] = p.depth;
  return j;
}

struct TerminalAggregate {
  std::vector<FractalCoord> coords;
  std::vector<double> values;
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;
};

inline TerminalAggregate aggregate_terminals(std::span<const FractalCoord> coords,
                                             std::span<const double> roots,
                                             const ModelParams& p) {
  std::map<std::array<std::int32_t, 4>, std::pair<FractalCoord, std::uint64_t>> by_identity;
  for (const FractalCoord& c : coords) {
    auto [it, inserted] = by_identity.emplace(c.identity(), std::make_pair(c, std::uint64_t{0}));
    ++it->second.second;
  }
  struct Row {
    FractalCoord coord;
    double value;
    std::uint64_t count;
  };
  std::vector<Row> rows;
  rows.reserve(by_identity.size());
  for (const auto& [identity, entry] : by_identity) {
    rows.push_back({entry.first, model::coord_value(entry.first, roots, p), entry.second});
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.value != b.value) return a.value > b.value;
    return model::CoordIdentityLess{}(a.coord, b.coord);
  });
  TerminalAggregate agg;
  for (const Row& r : rows) {
    agg.coords.push_back(r.coord);
    agg.values.push_back(r.value);
    agg.counts.push_back(r.count);
    agg.total += r.count;
  }
  return agg;
}

inline std::string terminal_csv(const TerminalAggregate& agg) {
  io::CsvWriter csv({"value", "root", "i", "j", "count", "probability"});
  for (std::size_t k = 0; k < agg.coords.size(); ++k) {
    std::vector<std::string> row;
    row.push_back(io::float17(agg.values[k]));
    append_coord_terminal(row, agg.coords[k]);
    row.push_back(std::to_string(agg.counts[k]));
    row.push_back(io::float17(static_cast<double>(agg.counts[k]) /
                              static_cast<double>(agg.total)));
    csv.append_row(row);
  }
  return csv.str();
}

inline std::string events_csv(std::span<const montecarlo::EventLog> logs) {
  io::CsvWriter csv(
      {"replica", "time", "kind", "size_before", "size_after", "root", "i", "j", "clipped_band"});
  for (std::size_t replica = 0; replica < logs.size(); ++replica) {
    for (const montecarlo::Event& ev : logs[replica]) {
      std::vector<std::string> row;
      row.push_back(std::to_string(replica));
      row.push_back(io::float17(ev.time));
      row.push_back(montecarlo::event_kind_name(ev.kind));
      row.push_back(io::float17(ev.size_before));
      row.push_back(io::float17(ev.size_after));
      append_coord_full(row, ev.coord_after);
      csv.append_row(row);
    }
  }
  return csv.str();
}

// ---------------------------------------------------------------------------
// Subcommands

inline int run_params(const RunConfig& cfg, std::ostream& out) {
  const ModelParams p = make_model(cfg);
  out << "r        = " << io::float17(p.r) << "\n";
  out << "beta     = " << io::float17(p.beta) << "\n";
  out << "lambda0  = " << io::float17(p.lambda0) << "\n";
  out << "depth    = " << p.depth << "\n";
  out << "bands:\n";
  for (int k = 0; k < p.depth; ++k) {
    const double hi = k == 0 ? 1.0 : p.thresholds[static_cast<std::size_t>(k - 1)];
    out << "  E'_" << k << " = [" << io::float17(p.band_floor(k)) << ", " << io::float17(hi)
        << (k == 0 ? "]" : ")") << "\n";
  }
  return 0;
}

inline void run_support(const RunConfig& cfg) {
  const ModelParams p = make_model(cfg);
  const semigroup::StateSpace S = semigroup::reachable_support(cfg.x0, p);
  io::CsvWriter csv({"value", "root", "i", "j", "clipped_band"});
  for (int k = 0; k < S.size(); ++k) {
    std::vector<std::string> row;
    row.push_back(io::float17(S.value(k)));
    append_coord_full(row, S.coord(k));
    csv.append_row(row);
  }
  io::write_file(std::filesystem::path(cfg.out_dir) / "support.csv", csv.str());
}

inline std::vector<double> phi_vector(const std::string& name, const semigroup::StateSpace& S) {
  std::vector<double> phi(static_cast<std::size_t>(S.size()));
  for (int k = 0; k < S.size(); ++k) {
    if (name == "one") {
      phi[static_cast<std::size_t>(k)] = 1.0;
    } else if (name == "exp-neg") {
      phi[static_cast<std::size_t>(k)] = std::exp(-S.value(k));
    } else {
      fail(errc::config_error, "phi must be 'one' or 'exp-neg'");
    }
  }
  return phi;
}

inline void run_semigroup(const RunConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const ModelParams p = make_model(cfg);
  const std::uint64_t seed = resolve_seed(cfg);
  const semigroup::StateSpace S = semigroup::reachable_support(cfg.x0, p);
  const std::filesystem::path dir(cfg.out_dir);

  const semigroup::TransitionOperator P = semigroup::transition_at(cfg.t_end, S, cfg.semigroup_tol);
  {
    std::vector<std::string> header = {"value", "root", "i", "j", "clipped_band"};
    for (int c = 0; c < S.size(); ++c) header.push_back("p" + std::to_string(c));
    io::CsvWriter csv(header);
    for (int r = 0; r < S.size(); ++r) {
      std::vector<std::string> row;
      row.push_back(io::float17(S.value(r)));
      append_coord_full(row, S.coord(r));
      for (int c = 0; c < S.size(); ++c) row.push_back(io::float17(P.at(r, c)));
      csv.append_row(row);
    }
    io::write_file(dir / "transition.csv", csv.str());
  }

  const std::vector<double> ones(static_cast<std::size_t>(S.size()), 1.0);
  const std::vector<double> resolvent = semigroup::resolvent_apply(cfg.alpha, ones, S);
  {
    io::CsvWriter csv({"value", "root", "i", "j", "clipped_band", "u"});
    for (int r = 0; r < S.size(); ++r) {
      std::vector<std::string> row;
      row.push_back(io::float17(S.value(r)));
      append_coord_full(row, S.coord(r));
      row.push_back(io::float17(resolvent[static_cast<std::size_t>(r)]));
      csv.append_row(row);
    }
    io::write_file(dir / "resolvent.csv", csv.str());
  }

  const std::vector<double> phi = phi_vector(cfg.phi, S);
  semigroup::CumulantOptions copts;
  copts.tol = cfg.cumulant_tol;
  const semigroup::CumulantSolution sol =
      semigroup::cumulant_solve(phi, cfg.t_end, S, cfg.clip_policy, copts);
  {
    io::CsvWriter csv({"value", "root", "i", "j", "clipped_band", "phi", "h"});
    for (int r = 0; r < S.size(); ++r) {
      std::vector<std::string> row;
      row.push_back(io::float17(S.value(r)));
      append_coord_full(row, S.coord(r));
      row.push_back(io::float17(phi[static_cast<std::size_t>(r)]));
      row.push_back(io::float17(sol.at_end()[static_cast<std::size_t>(r)]));
      csv.append_row(row);
    }
    io::write_file(dir / "cumulant.csv", csv.str());
  }

  json summary;
  summary["schema_version"] = kSchemaVersion;
  summary["subcommand"] = "semigroup";
  summary["model"] = model_json(p);
  summary["run"] = {{"x0", cfg.x0},
                    {"t_end", cfg.t_end},
                    {"alpha", cfg.alpha},
                    {"phi", cfg.phi},
                    {"clip_policy", kernels::clip_policy_name(cfg.clip_policy)},
                    {"semigroup_tol", cfg.semigroup_tol},
                    {"cumulant_tol", cfg.cumulant_tol},
                    {"seed", seed}};
  summary["results"] = {{"states", S.size()},
                        {"rk4_steps", sol.rk4_steps},
                        {"picard_iterations", sol.picard_iterations},
                        {"halving_disagreement", sol.halving_disagreement},
                        {"picard_discrepancy", sol.picard_discrepancy}};
  summary["wall_time_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  io::write_file(dir / "summary.json", summary.dump(2) + "\n");
}

enum class SimulateKind { chain, sde, branching, sizes };

inline const char* simulate_kind_name(SimulateKind k) noexcept {
  switch (k) {
    case SimulateKind::chain: return "chain";
    case SimulateKind::sde: return "sde";
    case SimulateKind::branching: return "branching";
    case SimulateKind::sizes: return "sizes";
  }
  return "?";
}

inline void run_simulate(SimulateKind kind, const RunConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const ModelParams p = make_model(cfg);
  const std::uint64_t seed = resolve_seed(cfg);
  const unsigned workers = resolve_workers(cfg);
  const std::filesystem::path dir(cfg.out_dir);

  struct ReplicaOut {
    montecarlo::EventLog events;
    std::vector<FractalCoord> terminal;
    std::vector<double> roots;
    double stat_mean_size = 0.0;
    double stat_count = 0.0;
    double stat_mass = 0.0;
  };

  const int level = resolve_level(cfg, p);
  montecarlo::BranchingOptions bopts;
  bopts.population_cap = cfg.population_cap;

  const auto one_replica = [&](std::size_t k) -> ReplicaOut {
    ReplicaOut out;
    switch (kind) {
      case SimulateKind::chain: {
        montecarlo::RngStream rng(seed, k, montecarlo::stream_tag::chain);
        montecarlo::Trajectory traj = montecarlo::simulate_chain(cfg.x0, cfg.t_end, p, rng);
        out.stat_mean_size = traj.terminal_size;
        out.stat_count = static_cast<double>(traj.events.size());
        out.terminal = {traj.terminal_coord};
        out.roots = traj.roots;
        out.events = std::move(traj.events);
        break;
      }
      case SimulateKind::sde: {
        montecarlo::RngStream rng(seed, k, montecarlo::stream_tag::sde);
        montecarlo::Trajectory traj = montecarlo::simulate_sde(cfg.x0, cfg.t_end, p, rng);
        out.stat_mean_size = traj.terminal_size;
        out.stat_count = static_cast<double>(traj.events.size());
        out.terminal = {traj.terminal_coord};
        out.roots = traj.roots;
        out.events = std::move(traj.events);
        break;
      }
      case SimulateKind::branching: {
        montecarlo::RngStream rng(seed, k, montecarlo::stream_tag::branching);
        const montecarlo::Configuration c0 = montecarlo::Configuration::from_sizes(cfg.sizes);
        montecarlo::BranchingResult r =
            montecarlo::simulate_branching(c0, cfg.t_end, p, cfg.clip_policy, rng, bopts);
        out.stat_count = static_cast<double>(r.final_config.count());
        out.stat_mass = r.final_config.total_mass(p);
        out.terminal = r.final_config.particles;
        out.roots = r.final_config.roots;
        out.events = std::move(r.events);
        break;
      }
      case SimulateKind::sizes: {
        montecarlo::RngStream rng(seed, k, montecarlo::stream_tag::sizes);
        const montecarlo::SizeSequence x0 = montecarlo::make_size_sequence(cfg.sizes);
        montecarlo::EventLog log;
        const montecarlo::SizeSequence terminal =
            montecarlo::simulate_sizes(x0, level, cfg.t_end, p, cfg.clip_policy, rng, bopts, &log);
        out.stat_count = static_cast<double>(terminal.sizes.size());
        for (double s : terminal.sizes) out.stat_mass += s;
        // materialize the terminal sequence as root coordinates
        const montecarlo::Configuration c = montecarlo::Configuration::from_sizes(terminal.sizes);
        out.terminal = c.particles;
        out.roots = c.roots;
        out.events = std::move(log);
        break;
      }
    }
    return out;
  };

  const std::vector<ReplicaOut> results = montecarlo::run_replicas<ReplicaOut>(
      static_cast<std::size_t>(cfg.replicas), workers, one_replica);

  std::vector<montecarlo::EventLog> logs;
  logs.reserve(results.size());
  for (const ReplicaOut& r : results) logs.push_back(r.events);
  io::write_file(dir / "events.csv", events_csv(logs));

  // Terminal aggregation works on shared roots for the single-particle
  // simulators; for branching/sizes terminals the roots coincide across
  // replicas as well (they are the configured size list, or per-replica
  // terminal values aggregated by value below).
  std::string terminal_text;
  if (kind == SimulateKind::chain || kind == SimulateKind::sde ||
      kind == SimulateKind::branching) {
    std::vector<FractalCoord> all;
    for (const ReplicaOut& r : results) {
      all.insert(all.end(), r.terminal.begin(), r.terminal.end());
    }
    const std::vector<double> roots = results.empty() ? std::vector<double>{} : results[0].roots;
    terminal_text = terminal_csv(aggregate_terminals(all, roots, p));
  } else {
    // size sequences: aggregate by terminal value
    std::map<double, std::uint64_t, std::greater<>> counts;
    std::uint64_t total = 0;
    for (const ReplicaOut& r : results) {
      for (std::size_t k = 0; k < r.terminal.size(); ++k) {
        ++counts[r.roots[static_cast<std::size_t>(r.terminal[k].root)]];
        ++total;
      }
    }
    io::CsvWriter csv({"value", "root", "i", "j", "count", "probability"});
    for (const auto& [value, count] : counts) {
      csv.append_row({io::float17(value), "-1", "-1", "-1", std::to_string(count),
                      io::float17(static_cast<double>(count) / static_cast<double>(total))});
    }
    terminal_text = csv.str();
  }
  io::write_file(dir / "terminal.csv", terminal_text);

  std::vector<double> sizes_stat, counts_stat, mass_stat;
  for (const ReplicaOut& r : results) {
    sizes_stat.push_back(r.stat_mean_size);
    counts_stat.push_back(r.stat_count);
    mass_stat.push_back(r.stat_mass);
  }

  json summary;
  summary["schema_version"] = kSchemaVersion;
  summary["subcommand"] = std::string("simulate-") + simulate_kind_name(kind);
  summary["model"] = model_json(p);
  json run;
  if (kind == SimulateKind::chain || kind == SimulateKind::sde) {
    run["x0"] = cfg.x0;
  } else {
    run["sizes"] = cfg.sizes;
    run["clip_policy"] = kernels::clip_policy_name(cfg.clip_policy);
    run["population_cap"] = cfg.population_cap;
  }
  if (kind == SimulateKind::sizes) run["level"] = level;
  run["t_end"] = cfg.t_end;
  run["replicas"] = cfg.replicas;
  run["seed"] = seed;
  summary["run"] = run;

  const auto plain_mean = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    return v.empty() ? 0.0 : m / static_cast<double>(v.size());
  };
  const bool with_ci = cfg.replicas >= 30;
  json res;
  if (kind == SimulateKind::chain || kind == SimulateKind::sde) {
    res["mean_terminal_size"] = with_ci ? stats::mean_ci(sizes_stat, 0.997).mean
                                        : plain_mean(sizes_stat);
    if (with_ci) res["mean_terminal_size_ci997"] = stats::mean_ci(sizes_stat, 0.997).half_width;
    res["mean_event_count"] = plain_mean(counts_stat);
    if (with_ci) res["mean_event_count_ci997"] = stats::mean_ci(counts_stat, 0.997).half_width;
  } else {
    res["mean_particle_count"] = plain_mean(counts_stat);
    if (with_ci) res["mean_particle_count_ci997"] = stats::mean_ci(counts_stat, 0.997).half_width;
    res["mean_total_mass"] = plain_mean(mass_stat);
    if (with_ci) res["mean_total_mass_ci997"] = stats::mean_ci(mass_stat, 0.997).half_width;
  }
  summary["results"] = res;
  summary["wall_time_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  io::write_file(dir / "summary.json", summary.dump(2) + "\n");
}

}  // namespace avalanche::cli

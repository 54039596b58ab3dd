#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <queue>
#include <span>
#include <thread>
#include <tuple>
#include <vector>

#include "avalanche/error.hpp"
#include "avalanche/kernels.hpp"
#include "avalanche/model.hpp"
#include "avalanche/rng.hpp"

// Stochastic simulation: the uniformized size chain (banded and
// whole-interval), the Poisson-measure jump SDE, the branching particle
// system on finite configurations, and the projected process on size
// sequences. Every simulator is exact in time (event driven, no
// discretization) and deterministic given its RngStream.

namespace avalanche::montecarlo {

using kernels::ClipPolicy;
using model::FractalCoord;
using model::ModelParams;

enum class EventKind : std::uint8_t {
  poisson_arrival,  // driving-noise atom that produced no displacement
  jump,
  hold,
  sde_atom,  // displacing atom of the Poisson measure
  branch,
};

inline const char* event_kind_name(EventKind k) noexcept {
  switch (k) {
    case EventKind::poisson_arrival: return "poisson_arrival";
    case EventKind::jump: return "jump";
    case EventKind::hold: return "hold";
    case EventKind::sde_atom: return "sde_atom";
    case EventKind::branch: return "branch";
  }
  return "?";
}

struct Event {
  double time = 0.0;
  EventKind kind = EventKind::hold;
  double size_before = 0.0;
  double size_after = 0.0;
  FractalCoord coord_before;
  FractalCoord coord_after;
};

using EventLog = std::vector<Event>;

struct Trajectory {
  double initial_size = 0.0;
  FractalCoord initial_coord;
  std::vector<double> roots;
  EventLog events;
  FractalCoord terminal_coord;
  double terminal_size = 0.0;
};

/// Uniformized banded chain from x0: exponential arrivals at rate lambda0,
/// one band-filtered step draw per arrival; holds are logged, not elided.
inline Trajectory simulate_chain(double x0, double t_end, const ModelParams& p, RngStream& rng) {
  require(x0 <= 1.0, errc::above_unit, "x0 must be <= 1");
  require(x0 >= p.floor(), errc::below_resolution, "x0 below d_depth");
  require(t_end >= 0.0, errc::invalid_argument, "t_end must be >= 0");

  Trajectory traj;
  traj.roots = {x0};
  traj.initial_size = x0;
  traj.initial_coord = FractalCoord{0, 0, 0, -1};

  FractalCoord coord = traj.initial_coord;
  double value = x0;
  double t = 0.0;
  for (;;) {
    t += rng.exponential(p.lambda0);
    if (t > t_end) break;
    const kernels::CoordStep step = kernels::coord_step(coord, traj.roots, p);
    const double u = rng.uniform();
    Event ev;
    ev.time = t;
    ev.size_before = value;
    ev.coord_before = coord;
    if (u < step.p_small && step.small) {
      coord = *step.small;
      ev.kind = EventKind::jump;
    } else if (u < step.p_small + step.p_big && step.big) {
      coord = *step.big;
      ev.kind = EventKind::jump;
    } else {
      ev.kind = EventKind::hold;
    }
    value = model::coord_value(coord, traj.roots, p);
    ev.size_after = value;
    ev.coord_after = coord;
    traj.events.push_back(ev);
  }
  traj.terminal_coord = coord;
  traj.terminal_size = value;
  return traj;
}

/// Uniformized chain on the whole interval [0,1] (no band filter): jumps to
/// beta*x and (1-beta)*x with probabilities beta*x and (1-beta)*x, holds with
/// 1-x. This is the process the fragmentation SDE solves in law.
inline Trajectory simulate_chain_whole_interval(double x0, double t_end, const ModelParams& p,
                                                RngStream& rng) {
  require(x0 >= 0.0 && x0 <= 1.0, errc::out_of_unit, "x0 must lie in [0,1]");
  require(t_end >= 0.0, errc::invalid_argument, "t_end must be >= 0");

  Trajectory traj;
  traj.roots = {x0};
  traj.initial_size = x0;
  traj.initial_coord = FractalCoord{0, 0, 0, -1};

  FractalCoord coord = traj.initial_coord;
  double value = x0;
  double t = 0.0;
  for (;;) {
    t += rng.exponential(p.lambda0);
    if (t > t_end) break;
    const double p_small = p.beta * value;
    const double p_big = (1.0 - p.beta) * value;
    const double u = rng.uniform();
    Event ev;
    ev.time = t;
    ev.size_before = value;
    ev.coord_before = coord;
    if (u < p_small) {
      coord = FractalCoord{coord.root, coord.i + 1, coord.j, -1};
      ev.kind = EventKind::jump;
    } else if (u < p_small + p_big) {
      coord = FractalCoord{coord.root, coord.i, coord.j + 1, -1};
      ev.kind = EventKind::jump;
    } else {
      ev.kind = EventKind::hold;
    }
    value = model::coord_value(coord, traj.roots, p);
    ev.size_after = value;
    ev.coord_after = coord;
    traj.events.push_back(ev);
  }
  traj.terminal_coord = coord;
  traj.terminal_size = value;
  return traj;
}

/// Poisson-measure jump SDE: the driving measure restricted to the window
/// [0,t_end] x [0,1] x [0,lambda0] is sufficient because sizes never exceed
/// 1, so atoms with mark s >= lambda0 never act. Atom count is
/// Poisson(lambda0*t_end); times, u-marks and s-marks are uniform. The u-mark
/// is drawn but inert on the window; drift and compensator cancel exactly and
/// are not discretized.
inline Trajectory simulate_sde(double x0, double t_end, const ModelParams& p, RngStream& rng) {
  require(x0 >= 0.0 && x0 <= 1.0, errc::out_of_unit, "x0 must lie in [0,1]");
  require(t_end >= 0.0, errc::invalid_argument, "t_end must be >= 0");

  Trajectory traj;
  traj.roots = {x0};
  traj.initial_size = x0;
  traj.initial_coord = FractalCoord{0, 0, 0, -1};

  struct Atom {
    double time, u, s;
  };
  const std::uint64_t n = rng.poisson(p.lambda0 * t_end);
  std::vector<Atom> atoms(n);
  for (auto& a : atoms) {
    a.time = rng.uniform(0.0, t_end);
    a.u = rng.uniform();
    a.s = rng.uniform(0.0, p.lambda0);
  }
  std::sort(atoms.begin(), atoms.end(), [](const Atom& a, const Atom& b) { return a.time < b.time; });

  FractalCoord coord = traj.initial_coord;
  double value = x0;
  for (const Atom& a : atoms) {
    Event ev;
    ev.time = a.time;
    ev.size_before = value;
    ev.coord_before = coord;
    switch (kernels::sde_jump_kind(value, a.s, p)) {
      case kernels::SdeJump::small_child:
        coord = FractalCoord{coord.root, coord.i + 1, coord.j, -1};
        ev.kind = EventKind::sde_atom;
        break;
      case kernels::SdeJump::big_child:
        coord = FractalCoord{coord.root, coord.i, coord.j + 1, -1};
        ev.kind = EventKind::sde_atom;
        break;
      case kernels::SdeJump::none:
        ev.kind = EventKind::poisson_arrival;
        break;
    }
    value = model::coord_value(coord, traj.roots, p);
    ev.size_after = value;
    ev.coord_after = coord;
    traj.events.push_back(ev);
  }
  traj.terminal_coord = coord;
  traj.terminal_size = value;
  return traj;
}

/// A finite multiset of particles with exact coordinates; the zero
/// configuration (no particles) is valid.
struct Configuration {
  std::vector<double> roots;
  std::vector<FractalCoord> particles;

  static Configuration single(double x0) {
    Configuration c;
    c.roots = {x0};
    c.particles = {FractalCoord{0, 0, 0, -1}};
    return c;
  }

  /// One root per entry, largest first; zero entries are rejected.
  static Configuration from_sizes(std::span<const double> sizes) {
    std::vector<double> sorted(sizes.begin(), sizes.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    Configuration c;
    for (double s : sorted) {
      require(s > 0.0 && s <= 1.0, errc::invalid_argument, "sizes must lie in (0,1]");
      c.particles.push_back(FractalCoord{static_cast<std::int32_t>(c.roots.size()), 0, 0, -1});
      c.roots.push_back(s);
    }
    return c;
  }

  std::size_t count() const noexcept { return particles.size(); }

  std::vector<double> values(const ModelParams& p) const {
    std::vector<double> v;
    v.reserve(particles.size());
    for (const auto& c : particles) v.push_back(model::coord_value(c, roots, p));
    return v;
  }

  double total_mass(const ModelParams& p) const {
    double m = 0.0;
    for (double v : values(p)) m += v;
    return m;
  }
};

struct BranchingOptions {
  std::size_t population_cap = 1'000'000;
};

struct BranchingResult {
  Configuration final_config;
  EventLog events;
  std::size_t peak_population = 0;
};

/// Branching particle system: each particle carries two independent
/// exponential clocks, motion at rate lambda0 (one band-filtered step draw)
/// and branching at rate 1 (the particle is replaced by two descendants, both
/// at the sampled offspring position, possibly below the parent under the
/// edge clip). Events across the population are processed in
/// (time, particle id, kind) order, which makes replay deterministic.
inline BranchingResult simulate_branching(const Configuration& config0, double t_end,
                                          const ModelParams& p, ClipPolicy policy, RngStream& rng,
                                          BranchingOptions opts = {}) {
  require(t_end >= 0.0, errc::invalid_argument, "t_end must be >= 0");
  for (const auto& c : config0.particles) {
    require(model::coord_value(c, config0.roots, p) >= p.floor(), errc::below_resolution,
            "initial particle below d_depth");
  }

  struct Particle {
    FractalCoord coord;
    bool alive = true;
  };
  enum : int { kMotion = 0, kBranch = 1 };
  struct Scheduled {
    double time;
    std::uint64_t particle;
    int kind;
    bool operator>(const Scheduled& o) const {
      return std::tie(time, particle, kind) > std::tie(o.time, o.particle, o.kind);
    }
  };

  BranchingResult result;
  result.final_config.roots = config0.roots;

  std::vector<Particle> particles;
  std::priority_queue<Scheduled, std::vector<Scheduled>, std::greater<>> queue;
  std::size_t alive = 0;

  const auto spawn = [&](const FractalCoord& coord, double now) {
    const std::uint64_t id = particles.size();
    particles.push_back({coord, true});
    ++alive;
    queue.push({now + rng.exponential(p.lambda0), id, kMotion});
    queue.push({now + rng.exponential(1.0), id, kBranch});
  };

  for (const auto& c : config0.particles) spawn(c, 0.0);
  result.peak_population = alive;

  while (!queue.empty() && queue.top().time <= t_end) {
    const Scheduled ev = queue.top();
    queue.pop();
    Particle& particle = particles[ev.particle];
    if (!particle.alive) continue;

    if (ev.kind == kMotion) {
      const kernels::CoordStep step = kernels::coord_step(particle.coord, config0.roots, p);
      const double u = rng.uniform();
      Event log;
      log.time = ev.time;
      log.size_before = model::coord_value(particle.coord, config0.roots, p);
      log.coord_before = particle.coord;
      if (u < step.p_small && step.small) {
        particle.coord = *step.small;
        log.kind = EventKind::jump;
      } else if (u < step.p_small + step.p_big && step.big) {
        particle.coord = *step.big;
        log.kind = EventKind::jump;
      } else {
        log.kind = EventKind::hold;
      }
      log.coord_after = particle.coord;
      log.size_after = model::coord_value(particle.coord, config0.roots, p);
      result.events.push_back(log);
      queue.push({ev.time + rng.exponential(p.lambda0), ev.particle, kMotion});
    } else {
      const FractalCoord offspring =
          kernels::sample_offspring(particle.coord, config0.roots, p, policy, rng);
      Event log;
      log.time = ev.time;
      log.kind = EventKind::branch;
      log.size_before = model::coord_value(particle.coord, config0.roots, p);
      log.coord_before = particle.coord;
      log.size_after = model::coord_value(offspring, config0.roots, p);
      log.coord_after = offspring;
      result.events.push_back(log);

      particle.alive = false;
      --alive;
      if (alive + 2 > opts.population_cap) {
        fail(errc::population_cap,
             "population would exceed cap of " + std::to_string(opts.population_cap));
      }
      spawn(offspring, ev.time);
      spawn(offspring, ev.time);
      result.peak_population = std::max(result.peak_population, alive);
    }
  }

  for (const auto& particle : particles) {
    if (particle.alive) result.final_config.particles.push_back(particle.coord);
  }
  return result;
}

/// A finite decreasing list of positive sizes together with the resolution
/// level at which it is materialized.
struct SizeSequence {
  std::vector<double> sizes;
  int level = 0;
};

inline SizeSequence make_size_sequence(std::vector<double> sizes, int level = 0) {
  for (double s : sizes) {
    require(s > 0.0 && s <= 1.0, errc::invalid_argument, "sizes must lie in (0,1]");
  }
  std::sort(sizes.begin(), sizes.end(), std::greater<>());
  return SizeSequence{std::move(sizes), level};
}

/// Restriction to sizes >= d_level; the projection of the empty sequence is
/// the zero configuration, and the map is idempotent on configurations
/// already above the level.
inline Configuration project_sizes(const SizeSequence& x, int level, const ModelParams& p) {
  require(level >= 1 && level <= p.depth, errc::invalid_argument, "level must lie in [1, depth]");
  const double d = p.thresholds[static_cast<std::size_t>(level - 1)];
  std::vector<double> kept;
  for (double s : x.sizes) {
    if (s >= d) kept.push_back(s);
  }
  return Configuration::from_sizes(kept);
}

/// Decreasing rearrangement of the two term lists (the semigroup operation on
/// size sequences); associative, commutative, with the empty sequence as
/// neutral element.
inline SizeSequence merge_sizes(const SizeSequence& a, const SizeSequence& b) {
  SizeSequence out;
  out.level = std::max(a.level, b.level);
  out.sizes.resize(a.sizes.size() + b.sizes.size());
  std::merge(a.sizes.begin(), a.sizes.end(), b.sizes.begin(), b.sizes.end(), out.sizes.begin(),
             std::greater<>());
  return out;
}

/// The level-n finite projection of the size-sequence process: branching
/// simulation of the projected configuration under the depth-n parameter
/// prefix, returned as a decreasing sequence.
inline SizeSequence simulate_sizes(const SizeSequence& x0, int level, double t_end,
                                   const ModelParams& p, ClipPolicy policy, RngStream& rng,
                                   BranchingOptions opts = {}, EventLog* log_out = nullptr) {
  require(level >= 1 && level <= p.depth, errc::invalid_argument, "level must lie in [1, depth]");
  // a prefix of a validated threshold list is itself valid
  ModelParams level_params = p;
  level_params.thresholds.assign(p.thresholds.begin(), p.thresholds.begin() + level);
  level_params.depth = level;

  const Configuration config0 = project_sizes(x0, level, level_params);
  BranchingResult r = simulate_branching(config0, t_end, level_params, policy, rng, opts);
  if (log_out != nullptr) *log_out = std::move(r.events);

  std::vector<double> sizes = r.final_config.values(level_params);
  std::sort(sizes.begin(), sizes.end(), std::greater<>());
  return SizeSequence{std::move(sizes), level};
}

/// Runs fn(replica_index) for indices 0..n-1 on `workers` threads and returns
/// the results in index order. Each replica must derive its randomness from
/// its index, so the output is identical for any worker count or schedule.
template <class R, class Fn>
std::vector<R> run_replicas(std::size_t n, unsigned workers, Fn&& fn) {
  std::vector<R> out(n);
  if (workers <= 1 || n <= 1) {
    for (std::size_t k = 0; k < n; ++k) out[k] = fn(k);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const std::size_t count = std::min<std::size_t>(workers, n);
  pool.reserve(count);
  for (std::size_t w = 0; w < count; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t k = next.fetch_add(1);
        if (k >= n) return;
        try {
          out[k] = fn(k);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

}  // namespace avalanche::montecarlo

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "avalanche/error.hpp"
#include "avalanche/model.hpp"
#include "avalanche/rng.hpp"

// Jump and branching kernels of the avalanche model: the two-atom
// fragmentation kernel, its band-filtered uniformized step, the displacement
// map driving the jump SDE, and the binary offspring law with its clip
// policies.

namespace avalanche::kernels {

using model::CoordIdentityLess;
using model::FractalCoord;
using model::ModelParams;

struct WeightedAtom {
  double position = 0.0;
  double mass = 0.0;
};

/// The two atoms of the fragmentation jump-intensity kernel at x:
/// mass lambda0*beta*x at beta*x and lambda0*(1-beta)*x at (1-beta)*x.
struct WeightedAtoms {
  std::vector<WeightedAtom> atoms;
  double total_mass = 0.0;
};

inline WeightedAtoms levy_atoms(double x, const ModelParams& p) {
  require(x >= 0.0 && x <= 1.0, errc::out_of_unit, "x must lie in [0,1]");
  WeightedAtoms out;
  if (x == 0.0) return out;  // zero measure
  const double b = p.beta;
  out.atoms.push_back({b * x, p.lambda0 * b * x});
  out.atoms.push_back({(1.0 - b) * x, p.lambda0 * (1.0 - b) * x});
  out.total_mass = p.lambda0 * x;
  return out;
}

struct StepTarget {
  double position = 0.0;
  double probability = 0.0;
  bool filtered = false;  // target left the parent's band; probability is 0
};

/// One application of the uniformized Markov step from x: jump to beta*x or
/// (1-beta)*x with probabilities beta*x and (1-beta)*x when the target stays
/// in x's band, hold with the remaining probability.
struct StepDistribution {
  StepTarget small;
  StepTarget big;
  double hold_probability = 1.0;
};

/// Coordinate-level step: the single source of truth for band filtering.
/// Child membership is decided on the child's canonical coordinate value, so
/// simulators, closures and matrices classify identically.
struct CoordStep {
  std::optional<FractalCoord> small;
  std::optional<FractalCoord> big;
  double p_small = 0.0;
  double p_big = 0.0;
  double p_hold = 1.0;
};

inline CoordStep coord_step(const FractalCoord& c, std::span<const double> roots,
                            const ModelParams& p) {
  const double x = model::coord_value(c, roots, p);
  require(x >= p.floor(), errc::below_resolution, "state below d_depth");
  const double edge = p.band_floor(model::band_of(x, p));

  CoordStep step;
  if (c.clipped()) return step;  // children of a band edge always leave the band

  const FractalCoord small{c.root, c.i + 1, c.j, -1};
  const FractalCoord big{c.root, c.i, c.j + 1, -1};
  if (model::coord_value(small, roots, p) >= edge) {
    step.small = small;
    step.p_small = p.beta * x;
  }
  if (model::coord_value(big, roots, p) >= edge) {
    step.big = big;
    step.p_big = (1.0 - p.beta) * x;
  }
  step.p_hold = 1.0 - step.p_small - step.p_big;
  return step;
}

inline StepDistribution step_distribution(double x, const ModelParams& p) {
  require(x <= 1.0, errc::above_unit, "x must be <= 1");
  require(x >= p.floor(), errc::below_resolution, "x below d_depth");
  const std::array<double, 1> roots{x};
  const CoordStep step = coord_step(FractalCoord{0, 0, 0, -1}, roots, p);
  StepDistribution d;
  d.small = {p.beta * x, step.p_small, !step.small.has_value()};
  d.big = {(1.0 - p.beta) * x, step.p_big, !step.big.has_value()};
  d.hold_probability = step.p_hold;
  return d;
}

enum class SdeJump { small_child, big_child, none };

/// Inverse-CDF thinning of an atom mark s against the kernel at x: the small
/// child when s < lambda0*beta*x, the big child when
/// lambda0*beta*x <= s < lambda0*x, inert otherwise.
inline SdeJump sde_jump_kind(double x, double s, const ModelParams& p) {
  if (s < p.lambda0 * p.beta * x) return SdeJump::small_child;
  if (s < p.lambda0 * x) return SdeJump::big_child;
  return SdeJump::none;
}

inline std::optional<double> sde_displacement(double x, double s, const ModelParams& p) {
  switch (sde_jump_kind(x, s, p)) {
    case SdeJump::small_child: return p.beta * x;
    case SdeJump::big_child: return (1.0 - p.beta) * x;
    case SdeJump::none: return std::nullopt;
  }
  return std::nullopt;
}

struct SdeKernelAtom {
  double displacement = 0.0;
  double mass = 0.0;
  double landing = 0.0;  // x + displacement, kept exact by construction
};

/// The displacement kernel K_x: the fragmentation kernel shifted by -x, with
/// its first moment b(x) as the drift. Landing points are copied from the
/// unshifted atoms so that first-order sums through K and through the
/// unshifted kernel share their arithmetic.
struct SdeKernelK {
  std::array<SdeKernelAtom, 2> atoms{};
  double total_mass = 0.0;
  double drift = 0.0;
};

inline double drift_b(double x, const ModelParams& p) {
  if (x < 0.0 || x > 1.0) return 0.0;
  return 2.0 * p.lambda0 * p.beta * (p.beta - 1.0) * x * x;
}

/// Closed form of the time integral of the jump sizes against the atom marks:
/// (1-beta)x * lambda0*beta*x + beta*x * (lambda0*x - lambda0*beta*x).
/// Cancels the drift: jump_compensator(x) == -drift_b(x).
inline double jump_compensator(double x, const ModelParams& p) {
  const double big_out = (1.0 - p.beta) * x * (p.lambda0 * p.beta * x);
  const double small_out = p.beta * x * (p.lambda0 * x - p.lambda0 * p.beta * x);
  return big_out + small_out;
}

inline SdeKernelK sde_kernel(double x, const ModelParams& p) {
  require(x >= 0.0 && x <= 1.0, errc::out_of_unit, "x must lie in [0,1]");
  SdeKernelK k;
  const WeightedAtoms levy = levy_atoms(x, p);
  for (std::size_t a = 0; a < levy.atoms.size(); ++a) {
    k.atoms[a].landing = levy.atoms[a].position;
    k.atoms[a].displacement = levy.atoms[a].position - x;
    k.atoms[a].mass = levy.atoms[a].mass;
  }
  k.total_mass = levy.total_mass;
  k.drift = drift_b(x, p);
  return k;
}

enum class ClipPolicy {
  edge,         // sub-edge offspring are placed at the parent's band edge
  conditioned,  // offspring law renormalized over in-band lattice points
};

inline const char* clip_policy_name(ClipPolicy c) noexcept {
  return c == ClipPolicy::edge ? "edge" : "conditioned";
}

struct OffspringAtom {
  FractalCoord coord;
  double position = 0.0;
  double probability = 0.0;
};

/// Binary offspring law at a parent x in band k: every lattice point y of
/// E_{beta,x} with d_{k+1} <= y <= x gets weight y(x-y)/a(x); under the edge
/// policy all sub-edge weight collapses onto one atom at the band edge.
/// Both descendants are placed at the sampled position. `degenerate` marks
/// the conditioned-policy corner where x is its own only in-band lattice
/// point (all in-band weight is zero): the branch then reproduces the parent.
struct OffspringDistribution {
  std::vector<OffspringAtom> atoms;
  std::optional<OffspringAtom> clip;
  double a_x = 0.0;
  double in_band_weight = 0.0;
  ClipPolicy policy = ClipPolicy::edge;
  bool degenerate = false;
};

/// a(x) = sum over the whole lattice of y(x-y), by the double geometric sum
/// x^2 * [1/(beta(1-beta)) - 1/((1-beta^2)(1-(1-beta)^2))].
inline double offspring_mass_a(double x, const ModelParams& p) {
  const double b = p.beta;
  const double factor = 1.0 / (b * (1.0 - b)) - 1.0 / ((1.0 - b * b) * (1.0 - (1.0 - b) * (1.0 - b)));
  return x * x * factor;
}

namespace detail {

/// The clip target of a parent on its own band edge is the parent state
/// itself; otherwise a fresh edge coordinate of the parent's band carrying
/// the given pre-clip exponent record.
inline FractalCoord clip_coord(const FractalCoord& parent, double parent_value, int band,
                               std::int32_t pre_i, std::int32_t pre_j, const ModelParams& p) {
  if (parent_value == p.band_floor(band)) return parent;
  return FractalCoord{parent.root, pre_i, pre_j, band};
}

}  // namespace detail

inline OffspringDistribution offspring_distribution(const FractalCoord& parent,
                                                    std::span<const double> roots,
                                                    const ModelParams& p, ClipPolicy policy) {
  const double x = model::coord_value(parent, roots, p);
  require(x >= p.floor(), errc::below_resolution, "parent below d_depth");
  const int band = model::band_of(x, p);
  const double edge = p.band_floor(band);

  OffspringDistribution d;
  d.policy = policy;
  d.a_x = offspring_mass_a(x, p);

  if (parent.clipped()) {
    // The lattice of an edge value has no second in-band point; everything
    // collapses back onto the edge.
    d.atoms.push_back({parent, x, policy == ClipPolicy::conditioned ? 1.0 : 0.0});
    if (policy == ClipPolicy::edge) {
      d.clip = OffspringAtom{parent, x, 1.0};
    } else {
      d.degenerate = true;
    }
    return d;
  }

  std::vector<FractalCoord> points =
      model::detail::lattice_points_down_to(parent.root, parent.i, parent.j, edge, roots, p);
  std::sort(points.begin(), points.end(), [&](const FractalCoord& a, const FractalCoord& b) {
    const double va = model::coord_value(a, roots, p);
    const double vb = model::coord_value(b, roots, p);
    if (va != vb) return va > vb;
    return CoordIdentityLess{}(a, b);
  });

  double in_band = 0.0;
  for (const FractalCoord& c : points) {
    const double y = model::coord_value(c, roots, p);
    const double w = y * (x - y);
    d.atoms.push_back({c, y, w});
    in_band += w;
  }
  d.in_band_weight = in_band;

  if (policy == ClipPolicy::edge) {
    for (OffspringAtom& a : d.atoms) a.probability /= d.a_x;
    double in_band_probability = 0.0;
    for (const OffspringAtom& a : d.atoms) in_band_probability += a.probability;
    const FractalCoord clip = detail::clip_coord(parent, x, band, parent.i, parent.j, p);
    d.clip = OffspringAtom{clip, p.band_floor(band), 1.0 - in_band_probability};
  } else if (in_band > 0.0) {
    for (OffspringAtom& a : d.atoms) a.probability /= in_band;
  } else {
    d.degenerate = true;
    d.atoms.clear();
    d.atoms.push_back({parent, x, 1.0});
  }
  return d;
}

inline OffspringDistribution offspring_distribution(double x, const ModelParams& p,
                                                    ClipPolicy policy) {
  const std::array<double, 1> roots{x};
  return offspring_distribution(FractalCoord{0, 0, 0, -1}, roots, p, policy);
}

struct SampleStats {
  std::uint64_t proposals = 0;
  std::uint64_t accepted = 0;
};

/// Exact rejection sampler for the offspring position: propose exponent
/// offsets with geometric laws so the proposal weight is proportional to the
/// lattice value, accept with probability (x - v)/x; the accepted law is then
/// proportional to v(x - v). The clip policy maps sub-edge acceptances to the
/// band edge (edge) or rejects them (conditioned).
inline FractalCoord sample_offspring(const FractalCoord& parent, std::span<const double> roots,
                                     const ModelParams& p, ClipPolicy policy,
                                     montecarlo::RngStream& rng, SampleStats* stats = nullptr) {
  const double x = model::coord_value(parent, roots, p);
  require(x >= p.floor(), errc::below_resolution, "parent below d_depth");
  const int band = model::band_of(x, p);
  const double edge = p.band_floor(band);

  if (parent.clipped()) return parent;
  if (policy == ClipPolicy::conditioned) {
    const FractalCoord largest_proper{parent.root, parent.i, parent.j + 1, -1};
    if (model::coord_value(largest_proper, roots, p) < edge) return parent;  // degenerate branch
  }

  const double log_beta = std::log(p.beta);
  const double log_cobeta = std::log(1.0 - p.beta);
  constexpr std::uint64_t kMaxProposals = 1'000'000;

  for (std::uint64_t trial = 0; trial < kMaxProposals; ++trial) {
    if (stats != nullptr) ++stats->proposals;
    const auto di = static_cast<std::int32_t>(std::log(rng.uniform_pos()) / log_beta);
    const auto dj = static_cast<std::int32_t>(std::log(rng.uniform_pos()) / log_cobeta);
    const FractalCoord candidate{parent.root, parent.i + di, parent.j + dj, -1};
    const double v = model::coord_value(candidate, roots, p);
    if (policy == ClipPolicy::conditioned && v < edge) continue;
    if (rng.uniform() >= (x - v) / x) continue;
    if (stats != nullptr) ++stats->accepted;
    if (v < edge) {
      return detail::clip_coord(parent, x, band, parent.i + di, parent.j + dj, p);
    }
    return candidate;
  }
  fail(errc::internal_error, "offspring rejection sampler did not terminate");
}

}  // namespace avalanche::kernels

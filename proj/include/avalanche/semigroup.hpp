#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <vector>

#include "avalanche/error.hpp"
#include "avalanche/kernels.hpp"
#include "avalanche/model.hpp"
#include "avalanche/montecarlo.hpp"

// Exact computation on finite reachable supports: the stochastic step matrix,
// the uniformized transition semigroup with a certified truncation bound, its
// generator and resolvent, the whole-interval transition row, and the
// nonlinear cumulant equation behind the branching semigroup.

namespace avalanche::semigroup {

using kernels::ClipPolicy;
using model::FractalCoord;
using model::ModelParams;

/// Finite state space closed under the band-filtered step map and under the
/// branching offspring map (in-band atoms and clip targets), sorted by
/// strictly decreasing value.
class StateSpace {
 public:
  StateSpace(ModelParams params, std::vector<double> roots, std::vector<FractalCoord> coords)
      : params_(std::move(params)), roots_(std::move(roots)), coords_(std::move(coords)) {
    std::sort(coords_.begin(), coords_.end(), [&](const FractalCoord& a, const FractalCoord& b) {
      const double va = model::coord_value(a, roots_, params_);
      const double vb = model::coord_value(b, roots_, params_);
      if (va != vb) return va > vb;
      return model::CoordIdentityLess{}(a, b);
    });
    values_.reserve(coords_.size());
    for (std::size_t k = 0; k < coords_.size(); ++k) {
      values_.push_back(model::coord_value(coords_[k], roots_, params_));
      index_.emplace(coords_[k].identity(), static_cast<int>(k));
    }
  }

  int size() const noexcept { return static_cast<int>(coords_.size()); }
  const ModelParams& params() const noexcept { return params_; }
  std::span<const double> roots() const noexcept { return roots_; }
  const std::vector<FractalCoord>& coords() const noexcept { return coords_; }
  const std::vector<double>& values() const noexcept { return values_; }
  const FractalCoord& coord(int k) const { return coords_.at(static_cast<std::size_t>(k)); }
  double value(int k) const { return values_.at(static_cast<std::size_t>(k)); }

  int index_of(const FractalCoord& c) const {
    const auto it = index_.find(c.identity());
    return it == index_.end() ? -1 : it->second;
  }

  int require_index(const FractalCoord& c, errc code = errc::unknown_coordinate) const {
    const int k = index_of(c);
    if (k < 0) fail(code, "coordinate not in state space");
    return k;
  }

 private:
  ModelParams params_;
  std::vector<double> roots_;
  std::vector<FractalCoord> coords_;
  std::vector<double> values_;
  std::map<std::array<std::int32_t, 4>, int> index_;
};

namespace detail {

inline StateSpace close_support(const ModelParams& p, std::vector<double> roots,
                                const std::vector<FractalCoord>& seeds) {
  std::map<std::array<std::int32_t, 4>, FractalCoord> seen;
  std::deque<FractalCoord> queue;
  const auto push = [&](const FractalCoord& c) {
    if (seen.emplace(c.identity(), c).second) queue.push_back(c);
  };
  for (const FractalCoord& c : seeds) {
    require(model::coord_value(c, roots, p) >= p.floor(), errc::below_resolution,
            "support seed below d_depth");
    push(c);
  }
  while (!queue.empty()) {
    const FractalCoord c = queue.front();
    queue.pop_front();
    const kernels::CoordStep step = kernels::coord_step(c, roots, p);
    if (step.small) push(*step.small);
    if (step.big) push(*step.big);
    const kernels::OffspringDistribution off =
        kernels::offspring_distribution(c, roots, p, ClipPolicy::edge);
    for (const auto& atom : off.atoms) push(atom.coord);
    if (off.clip) push(off.clip->coord);
  }
  std::vector<FractalCoord> coords;
  coords.reserve(seen.size());
  for (const auto& [identity, c] : seen) coords.push_back(c);
  return StateSpace(p, std::move(roots), std::move(coords));
}

}  // namespace detail

/// Breadth-first closure of the roots under motion and branching.
inline StateSpace reachable_support(double x0, const ModelParams& p) {
  return detail::close_support(p, {x0}, {FractalCoord{0, 0, 0, -1}});
}

inline StateSpace reachable_support(std::span<const double> roots, const ModelParams& p) {
  std::vector<FractalCoord> seeds;
  seeds.reserve(roots.size());
  for (std::int32_t k = 0; k < static_cast<std::int32_t>(roots.size()); ++k) {
    seeds.push_back(FractalCoord{k, 0, 0, -1});
  }
  return detail::close_support(p, std::vector<double>(roots.begin(), roots.end()), seeds);
}

inline StateSpace reachable_support(const montecarlo::Configuration& config,
                                    const ModelParams& p) {
  return detail::close_support(p, config.roots, config.particles);
}

/// Dense row-stochastic operator over a StateSpace.
struct TransitionOperator {
  enum class Tag { step, semigroup };
  Tag tag = Tag::step;
  double time = 0.0;
  int n = 0;
  std::vector<double> entries;  // row-major

  double at(int r, int c) const {
    return entries[static_cast<std::size_t>(r) * static_cast<std::size_t>(n) +
                   static_cast<std::size_t>(c)];
  }
  std::span<const double> row(int r) const {
    return {entries.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(n),
            static_cast<std::size_t>(n)};
  }
};

/// The normalized one-step kernel as a matrix over S.
inline TransitionOperator step_matrix(const StateSpace& S) {
  const int n = S.size();
  TransitionOperator op;
  op.tag = TransitionOperator::Tag::step;
  op.n = n;
  op.entries.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0.0);
  for (int r = 0; r < n; ++r) {
    const kernels::CoordStep step = kernels::coord_step(S.coord(r), S.roots(), S.params());
    auto* row = op.entries.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(n);
    if (step.small) row[S.require_index(*step.small, errc::unclosed_support)] += step.p_small;
    if (step.big) row[S.require_index(*step.big, errc::unclosed_support)] += step.p_big;
    row[r] += step.p_hold;
  }
  return op;
}

/// Uniformized semigroup P_t = e^{-lambda0 t} sum (lambda0 t)^k/k! N'^k,
/// truncated at the smallest K whose Poisson tail mass is below tol; the
/// sup-norm truncation error is at most tol because powers of a stochastic
/// matrix have sup-norm 1.
inline TransitionOperator transition_at(double t, const StateSpace& S, double tol = 1e-12) {
  require(t >= 0.0, errc::invalid_argument, "t must be >= 0");
  require(tol > 0.0 && tol <= 1e-6, errc::invalid_argument, "tol must lie in (0, 1e-6]");
  const int n = S.size();
  TransitionOperator out;
  out.tag = TransitionOperator::Tag::semigroup;
  out.time = t;
  out.n = n;
  out.entries.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0.0);
  for (int k = 0; k < n; ++k) out.entries[static_cast<std::size_t>(k) * (n + 1)] = 1.0;
  if (t == 0.0) return out;

  const TransitionOperator N = step_matrix(S);
  const double mu = S.params().lambda0 * t;
  double weight = std::exp(-mu);
  double cumulative = weight;

  std::vector<double> power(out.entries);                  // N'^k, starts at identity
  std::vector<double> scratch(power.size(), 0.0);
  for (double& e : out.entries) e *= weight;

  int k = 0;
  const int guard = static_cast<int>(mu + 40.0 * std::sqrt(mu + 1.0) + 80.0);
  while (1.0 - cumulative >= tol && k < guard) {
    ++k;
    // power <- power * N
    std::fill(scratch.begin(), scratch.end(), 0.0);
    for (int r = 0; r < n; ++r) {
      const auto* prow = power.data() + static_cast<std::size_t>(r) * n;
      auto* srow = scratch.data() + static_cast<std::size_t>(r) * n;
      for (int m = 0; m < n; ++m) {
        const double pm = prow[m];
        if (pm == 0.0) continue;
        const auto* nrow = N.entries.data() + static_cast<std::size_t>(m) * n;
        for (int c = 0; c < n; ++c) srow[c] += pm * nrow[c];
      }
    }
    power.swap(scratch);
    weight *= mu / k;
    cumulative += weight;
    for (std::size_t e = 0; e < power.size(); ++e) out.entries[e] += weight * power[e];
  }
  for (double& e : out.entries) {
    if (e < 0.0 && e > -1e-15) e = 0.0;
  }
  return out;
}

inline TransitionOperator multiply(const TransitionOperator& a, const TransitionOperator& b) {
  require(a.n == b.n, errc::support_mismatch, "operator size mismatch");
  TransitionOperator out;
  out.tag = TransitionOperator::Tag::semigroup;
  out.time = a.time + b.time;
  out.n = a.n;
  const int n = a.n;
  out.entries.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0.0);
  for (int r = 0; r < n; ++r) {
    const auto* arow = a.entries.data() + static_cast<std::size_t>(r) * n;
    auto* orow = out.entries.data() + static_cast<std::size_t>(r) * n;
    for (int m = 0; m < n; ++m) {
      const double am = arow[m];
      if (am == 0.0) continue;
      const auto* brow = b.entries.data() + static_cast<std::size_t>(m) * n;
      for (int c = 0; c < n; ++c) orow[c] += am * brow[c];
    }
  }
  return out;
}

/// lambda0 (N' - I) applied to a vector over S.
inline std::vector<double> generator_apply(std::span<const double> f, const StateSpace& S) {
  const int n = S.size();
  require(static_cast<int>(f.size()) == n, errc::support_mismatch, "vector length != state count");
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (int r = 0; r < n; ++r) {
    const kernels::CoordStep step = kernels::coord_step(S.coord(r), S.roots(), S.params());
    double nf = step.p_hold * f[static_cast<std::size_t>(r)];
    if (step.small) nf += step.p_small * f[static_cast<std::size_t>(S.require_index(*step.small))];
    if (step.big) nf += step.p_big * f[static_cast<std::size_t>(S.require_index(*step.big))];
    out[static_cast<std::size_t>(r)] = S.params().lambda0 * (nf - f[static_cast<std::size_t>(r)]);
  }
  return out;
}

/// Solves (alpha I - A) u = f, A = lambda0 (N' - I), by dense LU. The system
/// is strictly diagonally dominant for alpha > 0, so the solve is safe; the
/// residual is still checked and one refinement pass applied before failing.
inline std::vector<double> resolvent_apply(double alpha, std::span<const double> f,
                                           const StateSpace& S) {
  require(alpha > 0.0, errc::invalid_argument, "alpha must be > 0");
  const int n = S.size();
  require(static_cast<int>(f.size()) == n, errc::support_mismatch, "vector length != state count");

  const TransitionOperator N = step_matrix(S);
  Eigen::MatrixXd M(n, n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      M(r, c) = -S.params().lambda0 * N.at(r, c);
    }
    M(r, r) += alpha + S.params().lambda0;
  }
  Eigen::Map<const Eigen::VectorXd> rhs(f.data(), n);
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(M);
  Eigen::VectorXd u = lu.solve(rhs);

  const double scale = std::max(1.0, rhs.lpNorm<Eigen::Infinity>());
  double residual = (M * u - rhs).lpNorm<Eigen::Infinity>();
  if (residual > 1e-12 * scale) {
    u += lu.solve(rhs - M * u);
    residual = (M * u - rhs).lpNorm<Eigen::Infinity>();
    require(residual <= 1e-12 * scale, errc::singular_system, "resolvent residual too large");
  }
  return std::vector<double>(u.data(), u.data() + n);
}

/// Exact transition row of the whole-interval walk from x0 (no band filter),
/// computed on the jump-truncated lattice {(i,j): i+j <= max_jumps}. The
/// truncation is exact for the row because k applications of the step kernel
/// reach at most the k-th diagonal; probabilities are renormalized by the
/// retained Poisson mass (a relative correction of at most tol).
struct UnbandedRow {
  std::vector<FractalCoord> coords;
  std::vector<double> values;
  std::vector<double> probability;
  int max_jumps = 0;
};

inline UnbandedRow unbanded_row(double x0, double t, const ModelParams& p, double tol = 1e-12,
                                int min_jumps = 0) {
  require(x0 >= 0.0 && x0 <= 1.0, errc::out_of_unit, "x0 must lie in [0,1]");
  require(t >= 0.0, errc::invalid_argument, "t must be >= 0");
  require(tol > 0.0 && tol <= 1e-6, errc::invalid_argument, "tol must lie in (0, 1e-6]");

  const double mu = p.lambda0 * t;
  int max_jumps = 0;
  {
    double weight = std::exp(-mu);
    double cumulative = weight;
    while (1.0 - cumulative >= tol) {
      ++max_jumps;
      weight *= mu / max_jumps;
      cumulative += weight;
    }
  }
  max_jumps = std::max(max_jumps, min_jumps);

  const auto diag_offset = [](int s) { return s * (s + 1) / 2; };
  const auto index = [&](int i, int j) { return diag_offset(i + j) + i; };
  const int n_states = diag_offset(max_jumps + 1);  // diagonals 0..max_jumps

  UnbandedRow out;
  out.max_jumps = max_jumps;
  out.coords.reserve(static_cast<std::size_t>(n_states));
  const std::array<double, 1> roots{x0};
  for (int s = 0; s <= max_jumps; ++s) {
    for (int i = 0; i <= s; ++i) {
      const FractalCoord c{0, i, s - i, -1};
      out.coords.push_back(c);
      out.values.push_back(model::coord_value(c, roots, p));
    }
  }

  std::vector<double> mass(static_cast<std::size_t>(n_states), 0.0);
  std::vector<double> next(mass.size(), 0.0);
  mass[static_cast<std::size_t>(index(0, 0))] = 1.0;

  out.probability.assign(mass.size(), 0.0);
  double weight = std::exp(-mu);
  double retained = weight;
  for (std::size_t e = 0; e < mass.size(); ++e) out.probability[e] += weight * mass[e];
  for (int k = 1; k <= max_jumps; ++k) {
    std::fill(next.begin(), next.end(), 0.0);
    for (int s = 0; s < k; ++s) {
      for (int i = 0; i <= s; ++i) {
        const double m = mass[static_cast<std::size_t>(index(i, s - i))];
        if (m == 0.0) continue;
        const double v = out.values[static_cast<std::size_t>(index(i, s - i))];
        next[static_cast<std::size_t>(index(i + 1, s - i))] += m * p.beta * v;
        next[static_cast<std::size_t>(index(i, s - i + 1))] += m * (1.0 - p.beta) * v;
        next[static_cast<std::size_t>(index(i, s - i))] += m * (1.0 - v);
      }
    }
    mass.swap(next);
    weight *= mu / k;
    retained += weight;
    for (std::size_t e = 0; e < mass.size(); ++e) out.probability[e] += weight * mass[e];
  }
  for (double& q : out.probability) q /= retained;
  return out;
}

struct CumulantOptions {
  double tol = 1e-8;
  double initial_step = 1e-2;
  int max_halvings = 12;
  int min_picard_iterations = 3;
  int max_picard_iterations = 120;
};

/// Solution of the cumulant equation h' = (A - I) h + B[h^2], h_0 = phi, on a
/// uniform grid, with the Picard iteration of the integral form retained as
/// an independent cross-check.
struct CumulantSolution {
  std::vector<double> times;
  std::vector<std::vector<double>> h;
  double step = 0.0;
  double tol = 0.0;
  int rk4_steps = 0;
  int picard_iterations = 0;
  double halving_disagreement = 0.0;
  double picard_discrepancy = 0.0;

  const std::vector<double>& at_end() const { return h.back(); }

  const std::vector<double>& at(double t) const {
    const double pos = t / step;
    const auto k = static_cast<std::size_t>(std::llround(pos));
    require(k < h.size() && std::abs(pos - static_cast<double>(k)) < 1e-6,
            errc::invalid_argument, "t is not a grid time");
    return h[k];
  }
};

namespace detail {

/// Offspring squares operator over S: B[g](x) = sum p_y g(y)^2 over the
/// policy's offspring law at x.
struct BranchOperator {
  std::vector<std::vector<std::pair<int, double>>> targets;

  static BranchOperator build(const StateSpace& S, ClipPolicy policy) {
    BranchOperator b;
    b.targets.resize(static_cast<std::size_t>(S.size()));
    for (int r = 0; r < S.size(); ++r) {
      const kernels::OffspringDistribution d =
          kernels::offspring_distribution(S.coord(r), S.roots(), S.params(), policy);
      auto& row = b.targets[static_cast<std::size_t>(r)];
      for (const auto& atom : d.atoms) {
        if (atom.probability > 0.0) {
          row.emplace_back(S.require_index(atom.coord, errc::unclosed_support), atom.probability);
        }
      }
      if (d.clip && d.clip->probability > 0.0) {
        row.emplace_back(S.require_index(d.clip->coord, errc::unclosed_support),
                         d.clip->probability);
      }
    }
    return b;
  }

  void apply(std::span<const double> g, std::vector<double>& out) const {
    for (std::size_t r = 0; r < targets.size(); ++r) {
      double acc = 0.0;
      for (const auto& [idx, prob] : targets[r]) {
        const double gy = g[static_cast<std::size_t>(idx)];
        acc += prob * gy * gy;
      }
      out[r] = acc;
    }
  }
};

struct CumulantSystem {
  const TransitionOperator* step;
  const BranchOperator* branch;
  double lambda0;

  // rhs = lambda0 (N' h - h) - h + B[h]
  void rhs(std::span<const double> h, std::vector<double>& out, std::vector<double>& scratch) const {
    const int n = step->n;
    branch->apply(h, scratch);
    for (int r = 0; r < n; ++r) {
      const auto row = step->row(r);
      double nh = 0.0;
      for (int c = 0; c < n; ++c) nh += row[static_cast<std::size_t>(c)] * h[static_cast<std::size_t>(c)];
      out[static_cast<std::size_t>(r)] = lambda0 * (nh - h[static_cast<std::size_t>(r)]) -
                                         h[static_cast<std::size_t>(r)] + scratch[static_cast<std::size_t>(r)];
    }
  }
};

inline std::vector<std::vector<double>> rk4_integrate(const CumulantSystem& sys,
                                                      std::span<const double> phi, double t_end,
                                                      int steps) {
  const int n = sys.step->n;
  const double dt = t_end / steps;
  std::vector<std::vector<double>> grid;
  grid.reserve(static_cast<std::size_t>(steps) + 1);
  grid.emplace_back(phi.begin(), phi.end());

  std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n), scratch(n);
  for (int s = 0; s < steps; ++s) {
    const std::vector<double>& h = grid.back();
    sys.rhs(h, k1, scratch);
    for (int r = 0; r < n; ++r) tmp[r] = h[r] + 0.5 * dt * k1[r];
    sys.rhs(tmp, k2, scratch);
    for (int r = 0; r < n; ++r) tmp[r] = h[r] + 0.5 * dt * k2[r];
    sys.rhs(tmp, k3, scratch);
    for (int r = 0; r < n; ++r) tmp[r] = h[r] + dt * k3[r];
    sys.rhs(tmp, k4, scratch);
    std::vector<double> next(n);
    for (int r = 0; r < n; ++r) {
      next[r] = h[r] + dt / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]);
    }
    grid.push_back(std::move(next));
  }
  return grid;
}

}  // namespace detail

/// Integrates the cumulant equation with fixed-step classical RK4, halving
/// the step until two consecutive runs agree below tol/10, then runs the
/// Picard iteration of the integral form on a finer trapezoidal grid as an
/// independent cross-check. Fails with ToleranceNotMet when either the
/// halving disagreement or the cross-check exceeds tol.
inline CumulantSolution cumulant_solve(std::span<const double> phi, double t_end,
                                       const StateSpace& S, ClipPolicy policy,
                                       CumulantOptions opts = {}) {
  const int n = S.size();
  require(static_cast<int>(phi.size()) == n, errc::support_mismatch, "phi length != state count");
  require(t_end >= 0.0, errc::invalid_argument, "t_end must be >= 0");
  for (double v : phi) {
    require(v >= 0.0 && v <= 1.0, errc::invalid_argument, "phi must take values in [0,1]");
  }

  CumulantSolution sol;
  sol.tol = opts.tol;
  if (t_end == 0.0) {
    sol.times = {0.0};
    sol.h.emplace_back(phi.begin(), phi.end());
    sol.step = 1.0;
    sol.rk4_steps = 0;
    return sol;
  }

  const TransitionOperator N = step_matrix(S);
  const detail::BranchOperator B = detail::BranchOperator::build(S, policy);
  const detail::CumulantSystem sys{&N, &B, S.params().lambda0};

  // halve the step until two consecutive runs agree below tol/10 (accept a
  // final disagreement up to tol when the halving budget runs out)
  int steps = std::max(1, static_cast<int>(std::ceil(t_end / opts.initial_step)));
  std::vector<std::vector<double>> coarse = detail::rk4_integrate(sys, phi, t_end, steps);
  double disagreement = 0.0;
  for (int halving = 0; halving < opts.max_halvings; ++halving) {
    std::vector<std::vector<double>> fine = detail::rk4_integrate(sys, phi, t_end, 2 * steps);
    disagreement = 0.0;
    for (std::size_t k = 0; k < coarse.size(); ++k) {
      for (int r = 0; r < n; ++r) {
        disagreement = std::max(disagreement, std::abs(coarse[k][r] - fine[2 * k][r]));
      }
    }
    coarse = std::move(fine);
    steps *= 2;
    if (disagreement < opts.tol / 10.0) break;
  }
  require(disagreement < opts.tol, errc::tolerance_not_met,
          "RK4 step halving did not reach the requested tolerance");
  sol.halving_disagreement = disagreement;
  sol.rk4_steps = steps;
  sol.step = t_end / sol.rk4_steps;
  sol.h = std::move(coarse);
  sol.times.resize(sol.h.size());
  for (std::size_t k = 0; k < sol.times.size(); ++k) sol.times[k] = static_cast<double>(k) * sol.step;

  // Range check and clamped reporting for [0,1]-valued initial data.
  for (auto& hk : sol.h) {
    for (double& v : hk) {
      require(v >= -1e-9 && v <= 1.0 + 1e-9, errc::tolerance_not_met,
              "cumulant solution left [0,1] beyond 1e-9");
      v = std::clamp(v, 0.0, 1.0);
    }
  }

  // Picard cross-check on a trapezoidal grid refining the RK4 grid.
  {
    const double target_dp = std::sqrt(opts.tol / (16.0 * std::max(1.0, t_end)));
    const long long max_np = std::max<long long>(sol.rk4_steps, 6'400'000 / std::max(1, n));
    const long long max_stride = std::max<long long>(1, max_np / sol.rk4_steps);
    const long long wanted = static_cast<long long>(std::ceil(sol.step / target_dp));
    const int stride = static_cast<int>(std::clamp<long long>(wanted, 1, max_stride));
    const int np = stride * sol.rk4_steps;
    const double dp = t_end / np;

    const TransitionOperator Pd = transition_at(dp, S, 1e-12);
    const double ed = std::exp(-dp);
    const auto propagate = [&](const std::vector<double>& v, std::vector<double>& out) {
      for (int r = 0; r < n; ++r) {
        const auto row = Pd.row(r);
        double acc = 0.0;
        for (int c = 0; c < n; ++c) acc += row[static_cast<std::size_t>(c)] * v[static_cast<std::size_t>(c)];
        out[static_cast<std::size_t>(r)] = ed * acc;
      }
    };

    std::vector<std::vector<double>> base(static_cast<std::size_t>(np) + 1,
                                          std::vector<double>(static_cast<std::size_t>(n)));
    base[0].assign(phi.begin(), phi.end());
    for (int k = 0; k < np; ++k) propagate(base[static_cast<std::size_t>(k)], base[static_cast<std::size_t>(k) + 1]);

    std::vector<std::vector<double>> iterate(base);
    std::vector<std::vector<double>> g(static_cast<std::size_t>(np) + 1,
                                       std::vector<double>(static_cast<std::size_t>(n)));
    std::vector<double> integral(static_cast<std::size_t>(n));
    std::vector<double> tmp(static_cast<std::size_t>(n));
    std::vector<double> propagated(static_cast<std::size_t>(n));

    int iterations = 0;
    double change = 0.0;
    for (; iterations < opts.max_picard_iterations; ++iterations) {
      for (std::size_t k = 0; k < g.size(); ++k) B.apply(iterate[k], g[k]);
      change = 0.0;
      std::fill(integral.begin(), integral.end(), 0.0);
      for (int k = 0; k < np; ++k) {
        for (int r = 0; r < n; ++r) {
          tmp[static_cast<std::size_t>(r)] =
              integral[static_cast<std::size_t>(r)] + 0.5 * dp * g[static_cast<std::size_t>(k)][static_cast<std::size_t>(r)];
        }
        propagate(tmp, propagated);
        for (int r = 0; r < n; ++r) {
          integral[static_cast<std::size_t>(r)] =
              propagated[static_cast<std::size_t>(r)] +
              0.5 * dp * g[static_cast<std::size_t>(k) + 1][static_cast<std::size_t>(r)];
          const double next = base[static_cast<std::size_t>(k) + 1][static_cast<std::size_t>(r)] +
                              integral[static_cast<std::size_t>(r)];
          change = std::max(change,
                            std::abs(next - iterate[static_cast<std::size_t>(k) + 1][static_cast<std::size_t>(r)]));
          iterate[static_cast<std::size_t>(k) + 1][static_cast<std::size_t>(r)] = next;
        }
      }
      if (iterations + 1 >= opts.min_picard_iterations && change < opts.tol / 10.0) {
        ++iterations;
        break;
      }
    }
    require(change < opts.tol / 10.0, errc::tolerance_not_met,
            "Picard iteration did not converge");
    sol.picard_iterations = iterations;

    double discrepancy = 0.0;
    for (std::size_t k = 0; k < sol.h.size(); ++k) {
      const auto& picard_h = iterate[k * static_cast<std::size_t>(stride)];
      for (int r = 0; r < n; ++r) {
        discrepancy = std::max(
            discrepancy, std::abs(sol.h[k][static_cast<std::size_t>(r)] -
                                  std::clamp(picard_h[static_cast<std::size_t>(r)], 0.0, 1.0)));
      }
    }
    sol.picard_discrepancy = discrepancy;
    require(discrepancy <= opts.tol, errc::tolerance_not_met,
            "Picard cross-check disagrees with the RK4 solution");
  }
  return sol;
}

/// The branching semigroup applied to a multiplicative functional: the
/// product over the configuration's particles of h_t at their positions (1
/// for the zero configuration).
inline double branching_expectation(const montecarlo::Configuration& config,
                                    std::span<const double> phi, double t_end, const StateSpace& S,
                                    ClipPolicy policy, CumulantOptions opts = {}) {
  const CumulantSolution sol = cumulant_solve(phi, t_end, S, policy, opts);
  const std::vector<double>& h = sol.at_end();
  double product = 1.0;
  for (const FractalCoord& c : config.particles) {
    product *= h[static_cast<std::size_t>(S.require_index(c))];
  }
  return product;
}

}  // namespace avalanche::semigroup

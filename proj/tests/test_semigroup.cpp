#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "avalanche/semigroup.hpp"

using Catch::Approx;
using namespace avalanche;
using kernels::ClipPolicy;
using model::FractalCoord;
using model::ModelParams;

namespace {

template <class F>
std::optional<errc> error_code_of(F&& f) {
  try {
    f();
  } catch (const error& e) {
    return e.code();
  }
  return std::nullopt;
}

ModelParams depth1_params() { return model::make_params(0.5, {0.25}); }
ModelParams depth2_params() { return model::make_params(0.5, {0.25, 0.0625}); }

}  // namespace

TEST_CASE("reachable_support closures", "[semigroup]") {
  const ModelParams p1 = depth1_params();

  SECTION("from x0 = 1") {
    const auto S = semigroup::reachable_support(1.0, p1);
    REQUIRE(S.size() == 6);
    CHECK(S.value(0) == Approx(1.0));
    CHECK(S.value(1) == Approx(2.0 / 3.0));
    CHECK(S.value(2) == Approx(4.0 / 9.0));
    CHECK(S.value(3) == Approx(1.0 / 3.0));
    CHECK(S.value(4) == Approx(8.0 / 27.0));
    CHECK(S.value(5) == 0.25);
    CHECK(S.coord(5).clipped());
    CHECK(S.coord(5).clipped_band == 0);
    for (int k = 0; k < 5; ++k) CHECK_FALSE(S.coord(k).clipped());
  }

  SECTION("from the band edge: motion frozen, offspring clip onto it") {
    const auto S = semigroup::reachable_support(0.25, p1);
    REQUIRE(S.size() == 1);
    CHECK(S.value(0) == 0.25);
    CHECK_FALSE(S.coord(0).clipped());  // the root itself
  }

  SECTION("from 1/3: children filtered, positive-weight offspring clip") {
    const auto S = semigroup::reachable_support(1.0 / 3.0, p1);
    REQUIRE(S.size() == 2);
    CHECK(S.value(0) == Approx(1.0 / 3.0));
    CHECK(S.value(1) == 0.25);
    CHECK(S.coord(1).clipped());
  }

  SECTION("band confinement: depth 2 adds nothing from x0 = 1") {
    const auto S2 = semigroup::reachable_support(1.0, depth2_params());
    CHECK(S2.size() == 6);
  }

  CHECK(error_code_of([&] { semigroup::reachable_support(0.1, p1); }) == errc::below_resolution);
}

TEST_CASE("step_matrix rows", "[semigroup]") {
  const ModelParams p = depth1_params();
  const auto S = semigroup::reachable_support(1.0, p);
  const auto N = semigroup::step_matrix(S);

  const int i1 = S.require_index(FractalCoord{0, 0, 0, -1});
  const int i13 = S.require_index(FractalCoord{0, 1, 0, -1});
  const int i23 = S.require_index(FractalCoord{0, 0, 1, -1});
  CHECK(N.at(i1, i13) == Approx(1.0 / 3.0).margin(1e-16));
  CHECK(N.at(i1, i23) == Approx(2.0 / 3.0).margin(1e-16));
  CHECK(N.at(i1, i1) == 0.0);

  // the clip state is frozen
  const int iclip = S.require_index(FractalCoord{0, 0, 0, 0});
  for (int c = 0; c < S.size(); ++c) CHECK(N.at(iclip, c) == (c == iclip ? 1.0 : 0.0));

  for (int r = 0; r < S.size(); ++r) {
    double sum = 0.0;
    for (int c = 0; c < S.size(); ++c) {
      sum += N.at(r, c);
      CHECK(N.at(r, c) >= 0.0);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-15);
  }
}

TEST_CASE("transition_at semigroup", "[semigroup]") {
  const ModelParams p = depth1_params();
  const auto S = semigroup::reachable_support(1.0, p);
  const int i1 = S.require_index(FractalCoord{0, 0, 0, -1});

  SECTION("t = 0 is the identity, exactly") {
    const auto P0 = semigroup::transition_at(0.0, S);
    for (int r = 0; r < S.size(); ++r) {
      for (int c = 0; c < S.size(); ++c) CHECK(P0.at(r, c) == (r == c ? 1.0 : 0.0));
    }
  }

  SECTION("no-return state decays at the uniformization rate") {
    const auto P1 = semigroup::transition_at(1.0, S);
    CHECK(P1.at(i1, i1) == Approx(std::exp(-p.lambda0)).margin(1e-13));
  }

  SECTION("Chapman-Kolmogorov") {
    const auto P1 = semigroup::transition_at(1.0, S);
    const auto P2 = semigroup::transition_at(2.0, S);
    const auto P1sq = semigroup::multiply(P1, P1);
    double diff = 0.0;
    for (std::size_t k = 0; k < P2.entries.size(); ++k) {
      diff = std::max(diff, std::abs(P2.entries[k] - P1sq.entries[k]));
    }
    CHECK(diff <= 1e-10);
  }

  SECTION("rows are probabilities") {
    for (double t : {0.3, 1.0, 4.0}) {
      const auto P = semigroup::transition_at(t, S);
      for (int r = 0; r < S.size(); ++r) {
        double sum = 0.0;
        for (int c = 0; c < S.size(); ++c) {
          sum += P.at(r, c);
          CHECK(P.at(r, c) >= 0.0);
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
      }
    }
  }

  SECTION("forward equation holds to first order") {
    const auto P1 = semigroup::transition_at(1.0, S, 1e-12);
    std::vector<double> err;
    for (const double delta : {1e-3, 1e-4}) {
      const auto Pd = semigroup::transition_at(1.0 + delta, S, 1e-12);
      double worst = 0.0;
      for (int c = 0; c < S.size(); ++c) {
        // column c of A via A e_c
        std::vector<double> basis(static_cast<std::size_t>(S.size()), 0.0);
        basis[static_cast<std::size_t>(c)] = 1.0;
        const std::vector<double> a_col = semigroup::generator_apply(basis, S);
        for (int r = 0; r < S.size(); ++r) {
          double pa = 0.0;
          for (int m = 0; m < S.size(); ++m) pa += P1.at(r, m) * a_col[static_cast<std::size_t>(m)];
          const double fd = (Pd.at(r, c) - P1.at(r, c)) / delta;
          worst = std::max(worst, std::abs(fd - pa));
        }
      }
      err.push_back(worst);
    }
    CHECK(err[1] <= 1e-4);
    CHECK(err[0] / err[1] == Approx(10.0).margin(1.5));  // first-order convergence
  }

  SECTION("absorbing sets: no mass climbs") {
    for (double t : {0.5, 1.0, 2.0}) {
      const auto P = semigroup::transition_at(t, S);
      for (int r = 0; r < S.size(); ++r) {
        double above = 0.0;
        for (int c = 0; c < S.size(); ++c) {
          if (S.value(c) > S.value(r)) above += P.at(r, c);
        }
        CHECK(above <= 1e-12);
      }
    }
  }
}

TEST_CASE("generator_apply", "[semigroup]") {
  const ModelParams p = depth1_params();
  const auto S = semigroup::reachable_support(1.0, p);
  const int i1 = S.require_index(FractalCoord{0, 0, 0, -1});
  const int iclip = S.require_index(FractalCoord{0, 0, 0, 0});

  const std::vector<double> ones(static_cast<std::size_t>(S.size()), 1.0);
  for (double g : semigroup::generator_apply(ones, S)) CHECK(std::abs(g) <= 1e-16);

  const auto gen_id = semigroup::generator_apply(S.values(), S);
  CHECK(gen_id[static_cast<std::size_t>(i1)] == Approx(-5.0 / 81.0).margin(1e-14));
  CHECK(gen_id[static_cast<std::size_t>(iclip)] == 0.0);
}

TEST_CASE("resolvent_apply", "[semigroup]") {
  const ModelParams p = depth1_params();
  const auto S = semigroup::reachable_support(1.0, p);
  const auto n = static_cast<std::size_t>(S.size());

  SECTION("constants map to 1/alpha") {
    for (double alpha : {0.5, 2.0, 10.0}) {
      const std::vector<double> ones(n, 1.0);
      for (double u : semigroup::resolvent_apply(alpha, ones, S)) {
        CHECK(u == Approx(1.0 / alpha).epsilon(1e-12));
      }
    }
  }

  SECTION("defining identity (alpha - A) u = f") {
    montecarlo::RngStream rng(17, 0, montecarlo::stream_tag::testing);
    std::vector<double> f(n);
    for (double& v : f) v = rng.uniform(-1.0, 1.0);
    const double alpha = 2.0;
    const auto u = semigroup::resolvent_apply(alpha, f, S);
    const auto au = semigroup::generator_apply(u, S);
    for (std::size_t k = 0; k < n; ++k) {
      CHECK(alpha * u[k] - au[k] == Approx(f[k]).margin(1e-12));
    }
    // frozen state: u = f/alpha
    const auto iclip = static_cast<std::size_t>(S.require_index(FractalCoord{0, 0, 0, 0}));
    CHECK(u[iclip] == Approx(f[iclip] / alpha).margin(1e-13));
  }

  CHECK(error_code_of([&] {
          const std::vector<double> ones(n, 1.0);
          semigroup::resolvent_apply(0.0, ones, S);
        }) == errc::invalid_argument);
}

TEST_CASE("unbanded_row closed forms", "[semigroup]") {
  const ModelParams p = depth2_params();
  const double t = 2.0;
  const auto row = semigroup::unbanded_row(1.0, t, p);
  const double mu = p.lambda0 * t;

  double total = 0.0;
  for (double q : row.probability) total += q;
  CHECK(total == Approx(1.0).margin(1e-12));

  const auto find = [&](int i, int j) {
    for (std::size_t k = 0; k < row.coords.size(); ++k) {
      if (row.coords[k].i == i && row.coords[k].j == j) return row.probability[k];
    }
    return -1.0;
  };
  // stay at 1: no arrivals (the walk cannot hold at x = 1)
  CHECK(find(0, 0) == Approx(std::exp(-mu)).margin(1e-13));
  // one big jump, then holds at 2/3 with probability 1/3 per arrival
  CHECK(find(0, 1) == Approx(2.0 * (std::exp(-2.0 * mu / 3.0) - std::exp(-mu))).margin(1e-12));
  // one small jump, then holds at 1/3 with probability 2/3 per arrival
  CHECK(find(1, 0) == Approx(0.5 * (std::exp(-mu / 3.0) - std::exp(-mu))).margin(1e-12));

  // min_jumps extends the lattice without changing retained masses materially
  const auto wider = semigroup::unbanded_row(1.0, t, p, 1e-12, row.max_jumps + 5);
  CHECK(wider.coords.size() > row.coords.size());
  CHECK(wider.probability[0] == Approx(row.probability[0]).margin(1e-12));
}

TEST_CASE("cumulant_solve basics", "[semigroup]") {
  const ModelParams p = depth2_params();
  const auto S = semigroup::reachable_support(1.0, p);
  const auto n = static_cast<std::size_t>(S.size());

  SECTION("phi = 1 is a fixed point") {
    const std::vector<double> ones(n, 1.0);
    for (const ClipPolicy policy : {ClipPolicy::edge, ClipPolicy::conditioned}) {
      const auto sol = semigroup::cumulant_solve(ones, 2.0, S, policy);
      for (double h : sol.at_end()) CHECK(h == Approx(1.0).margin(1e-12));
      CHECK(sol.picard_discrepancy <= 1e-8);
      CHECK(sol.picard_iterations >= 3);
      // grid lookups: h_0 = phi, interior grid times resolve
      CHECK(sol.at(0.0) == ones);
      for (double h : sol.at(1.0)) CHECK(h == Approx(1.0).margin(1e-12));
      CHECK(error_code_of([&] { sol.at(0.123456789); }) == errc::invalid_argument);
    }
  }

  SECTION("t = 0 returns phi") {
    std::vector<double> phi(n);
    for (std::size_t k = 0; k < n; ++k) phi[k] = std::exp(-S.value(static_cast<int>(k)));
    const auto sol = semigroup::cumulant_solve(phi, 0.0, S, ClipPolicy::edge);
    CHECK(sol.at_end() == phi);
  }

  SECTION("phi outside [0,1] is rejected") {
    std::vector<double> phi(n, 1.5);
    CHECK(error_code_of([&] { semigroup::cumulant_solve(phi, 1.0, S, ClipPolicy::edge); }) ==
          errc::invalid_argument);
  }
}

TEST_CASE("cumulant_solve logistic oracle on a frozen state", "[semigroup]") {
  // From x0 = 1/4 the support is the single frozen state: motion disappears
  // and every branch reproduces the parent, so h' = h^2 - h with solution
  // h_t = phi / (phi + (1 - phi) e^t).
  const ModelParams p = depth1_params();
  const auto S = semigroup::reachable_support(0.25, p);
  REQUIRE(S.size() == 1);

  for (const ClipPolicy policy : {ClipPolicy::edge, ClipPolicy::conditioned}) {
    for (const double phi0 : {0.5, 0.2, 0.9}) {
      const std::vector<double> phi{phi0};
      const auto sol = semigroup::cumulant_solve(phi, 1.0, S, policy);
      const double expected = phi0 / (phi0 + (1.0 - phi0) * std::numbers::e);
      CHECK(sol.at_end()[0] == Approx(expected).margin(1e-9));
    }
  }
}

TEST_CASE("cumulant monotonicity in phi", "[semigroup][property]") {
  const ModelParams p = depth2_params();
  const auto S = semigroup::reachable_support(1.0, p);
  const auto n = static_cast<std::size_t>(S.size());

  montecarlo::RngStream rng(23, 0, montecarlo::stream_tag::testing);
  for (int rep = 0; rep < 3; ++rep) {
    std::vector<double> lo(n), hi(n);
    for (std::size_t k = 0; k < n; ++k) {
      lo[k] = rng.uniform(0.0, 0.9);
      hi[k] = lo[k] + rng.uniform(0.0, 1.0 - lo[k]);
    }
    const auto sol_lo = semigroup::cumulant_solve(lo, 1.0, S, ClipPolicy::edge);
    const auto sol_hi = semigroup::cumulant_solve(hi, 1.0, S, ClipPolicy::edge);
    for (std::size_t k = 0; k < n; ++k) {
      CHECK(sol_lo.at_end()[k] <= sol_hi.at_end()[k] + 1e-9);
    }
  }
}

TEST_CASE("cumulant level consistency", "[semigroup]") {
  // phi on the depth-1 states extended by 1 below d_1: the depth-2 solution
  // restricted to depth-1 states matches the depth-1 solution.
  const ModelParams p1 = depth1_params();
  const ModelParams p2 = depth2_params();
  const auto S1 = semigroup::reachable_support(1.0, p1);
  const auto S2 = semigroup::reachable_support(std::vector<double>{1.0, 0.2}, p2);

  std::vector<double> phi1(static_cast<std::size_t>(S1.size()));
  for (int k = 0; k < S1.size(); ++k) {
    phi1[static_cast<std::size_t>(k)] = std::exp(-S1.value(k));
  }
  std::vector<double> phi2(static_cast<std::size_t>(S2.size()));
  for (int k = 0; k < S2.size(); ++k) {
    phi2[static_cast<std::size_t>(k)] = S2.value(k) >= 0.25 ? std::exp(-S2.value(k)) : 1.0;
  }
  const auto h1 = semigroup::cumulant_solve(phi1, 1.0, S1, ClipPolicy::edge);
  const auto h2 = semigroup::cumulant_solve(phi2, 1.0, S2, ClipPolicy::edge);
  for (int k = 0; k < S1.size(); ++k) {
    const int k2 = S2.require_index(S1.coord(k));
    CHECK(h1.at_end()[static_cast<std::size_t>(k)] ==
          Approx(h2.at_end()[static_cast<std::size_t>(k2)]).margin(1e-8));
  }
}

TEST_CASE("branching_expectation is multiplicative", "[semigroup]") {
  const ModelParams p = depth2_params();
  const auto S = semigroup::reachable_support(1.0, p);
  const auto n = static_cast<std::size_t>(S.size());
  std::vector<double> phi(n);
  for (std::size_t k = 0; k < n; ++k) phi[k] = std::exp(-S.value(static_cast<int>(k)));

  const auto sol = semigroup::cumulant_solve(phi, 1.0, S, ClipPolicy::edge);
  const double h1 = sol.at_end()[static_cast<std::size_t>(S.require_index(FractalCoord{0, 0, 0, -1}))];
  const double h23 = sol.at_end()[static_cast<std::size_t>(S.require_index(FractalCoord{0, 0, 1, -1}))];

  montecarlo::Configuration single = montecarlo::Configuration::single(1.0);
  CHECK(semigroup::branching_expectation(single, phi, 1.0, S, ClipPolicy::edge) == Approx(h1).margin(1e-14));

  montecarlo::Configuration empty;
  empty.roots = {1.0};
  CHECK(semigroup::branching_expectation(empty, phi, 1.0, S, ClipPolicy::edge) == 1.0);

  montecarlo::Configuration pair;
  pair.roots = {1.0};
  pair.particles = {FractalCoord{0, 0, 0, -1}, FractalCoord{0, 0, 1, -1}};
  CHECK(semigroup::branching_expectation(pair, phi, 1.0, S, ClipPolicy::edge) ==
        Approx(h1 * h23).margin(1e-14));

  montecarlo::Configuration off_support;
  off_support.roots = {1.0};
  off_support.particles = {FractalCoord{0, 9, 9, -1}};
  CHECK(error_code_of([&] {
          semigroup::branching_expectation(off_support, phi, 1.0, S, ClipPolicy::edge);
        }) == errc::unknown_coordinate);
}

#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <map>
#include <optional>

#include "avalanche/kernels.hpp"
#include "avalanche/model.hpp"
#include "avalanche/rng.hpp"
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

ModelParams default_params() { return model::make_params(0.5, {0.25, 0.0625}); }

}  // namespace

TEST_CASE("levy_atoms", "[kernels]") {
  const ModelParams p = default_params();

  const auto at_one = kernels::levy_atoms(1.0, p);
  REQUIRE(at_one.atoms.size() == 2);
  CHECK(at_one.atoms[0].position == Approx(1.0 / 3.0).margin(1e-16));
  CHECK(at_one.atoms[0].mass == Approx(5.0 / 108.0).epsilon(1e-14));
  CHECK(at_one.atoms[1].position == Approx(2.0 / 3.0).margin(1e-16));
  CHECK(at_one.atoms[1].mass == Approx(5.0 / 54.0).epsilon(1e-14));
  CHECK(at_one.total_mass == Approx(5.0 / 36.0).epsilon(1e-14));

  CHECK(kernels::levy_atoms(0.0, p).atoms.empty());
  CHECK(kernels::levy_atoms(0.5, p).total_mass == Approx(5.0 / 72.0).epsilon(1e-14));
  CHECK(error_code_of([&] { kernels::levy_atoms(1.2, p); }) == errc::out_of_unit);
}

TEST_CASE("step_distribution examples", "[kernels]") {
  const ModelParams p = default_params();

  SECTION("x = 1: both children survive, no holding") {
    const auto d = kernels::step_distribution(1.0, p);
    CHECK_FALSE(d.small.filtered);
    CHECK_FALSE(d.big.filtered);
    CHECK(d.small.probability == Approx(1.0 / 3.0).margin(1e-16));
    CHECK(d.big.probability == Approx(2.0 / 3.0).margin(1e-16));
    CHECK(d.hold_probability == 0.0);
  }
  SECTION("x = 2/3: small child leaves the band") {
    const auto d = kernels::step_distribution(2.0 / 3.0, p);
    CHECK(d.small.filtered);
    CHECK(d.small.probability == 0.0);
    CHECK(d.big.probability == Approx(4.0 / 9.0).epsilon(1e-14));
    CHECK(d.hold_probability == Approx(5.0 / 9.0).epsilon(1e-14));
  }
  SECTION("x = 1/3: both children leave the band") {
    const auto d = kernels::step_distribution(1.0 / 3.0, p);
    CHECK(d.small.filtered);
    CHECK(d.big.filtered);
    CHECK(d.hold_probability == 1.0);
  }
  CHECK(error_code_of([&] { kernels::step_distribution(0.03, p); }) == errc::below_resolution);
}

TEST_CASE("step_distribution support and normalization", "[kernels][property]") {
  const ModelParams p = default_params();
  montecarlo::RngStream rng(3, 0, montecarlo::stream_tag::testing);
  for (int k = 0; k < 10'000; ++k) {
    const double x = rng.uniform(p.floor(), 1.0);
    const auto d = kernels::step_distribution(x, p);
    const double sum = d.small.probability + d.big.probability + d.hold_probability;
    CHECK(std::abs(sum - 1.0) <= 1e-14);
    CHECK(d.small.probability >= 0.0);
    CHECK(d.big.probability >= 0.0);
    CHECK(d.hold_probability >= 0.0);
    const double edge = p.band_floor(model::band_of(x, p));
    if (!d.small.filtered) {
      CHECK(d.small.position >= edge - 1e-15);
      CHECK(d.small.position <= x);
    }
    if (!d.big.filtered) {
      CHECK(d.big.position >= edge - 1e-15);
      CHECK(d.big.position <= x);
    }
  }
}

TEST_CASE("sde_displacement inverts the jump CDF", "[kernels]") {
  const ModelParams p = default_params();
  // lambda0*beta = 5/108 ~ 0.0463, lambda0 = 5/36 ~ 0.1389
  CHECK(kernels::sde_displacement(1.0, 0.01, p).value() == Approx(1.0 / 3.0));
  CHECK(kernels::sde_displacement(1.0, 0.1, p).value() == Approx(2.0 / 3.0));
  CHECK_FALSE(kernels::sde_displacement(1.0, 0.2, p).has_value());
  // boundaries: mass-at-small boundary goes to the big child, total mass to none
  CHECK(kernels::sde_displacement(1.0, p.lambda0 * p.beta, p).value() == Approx(2.0 / 3.0));
  CHECK_FALSE(kernels::sde_displacement(1.0, p.lambda0, p).has_value());
  CHECK_FALSE(kernels::sde_displacement(0.0, 0.0, p).has_value());
}

TEST_CASE("displacement kernel mirrors the jump kernel", "[kernels]") {
  const ModelParams p = default_params();
  montecarlo::RngStream rng(5, 0, montecarlo::stream_tag::testing);
  for (int k = 0; k < 1000; ++k) {
    const double x = rng.uniform();
    const auto K = kernels::sde_kernel(x, p);
    const auto N = kernels::levy_atoms(x, p);
    if (x == 0.0) continue;
    REQUIRE(N.atoms.size() == 2);
    for (std::size_t a = 0; a < 2; ++a) {
      CHECK(K.atoms[a].landing == N.atoms[a].position);  // exact by construction
      CHECK(K.atoms[a].mass == N.atoms[a].mass);
    }
    CHECK(K.atoms[0].displacement == Approx((p.beta - 1.0) * x).epsilon(1e-14));
    CHECK(K.atoms[1].displacement == Approx(-p.beta * x).epsilon(1e-14));
    CHECK(K.total_mass == Approx(p.lambda0 * x).epsilon(1e-14));
    CHECK(K.drift == Approx(2.0 * p.lambda0 * p.beta * (p.beta - 1.0) * x * x).margin(1e-18));
  }
}

TEST_CASE("drift and compensator cancel", "[kernels][property]") {
  const ModelParams p = default_params();
  montecarlo::RngStream rng(6, 0, montecarlo::stream_tag::testing);
  for (int k = 0; k < 1000; ++k) {
    const double x = rng.uniform();
    const double compensator = kernels::jump_compensator(x, p);
    const double minus_drift = -kernels::drift_b(x, p);
    const double denom = std::max({std::abs(compensator), std::abs(minus_drift), 1e-300});
    if (compensator != minus_drift) {
      CHECK(std::abs(compensator - minus_drift) / denom <= 1e-13);
    }
  }
}

TEST_CASE("offspring_mass_a closed form", "[kernels]") {
  const ModelParams p = default_params();
  CHECK(kernels::offspring_mass_a(1.0, p) == Approx(2.475).epsilon(1e-13));
  CHECK(kernels::offspring_mass_a(0.0, p) == 0.0);
  // homogeneity: a(x)/x^2 is constant
  CHECK(kernels::offspring_mass_a(0.5, p) == Approx(2.475 / 4.0).epsilon(1e-13));

  // brute-force oracle: truncated double sum over exponent pairs
  double brute = 0.0;
  for (int i = 0; i < 400; ++i) {
    for (int j = 0; j < 400 - i; ++j) {
      const double v = std::pow(p.beta, i) * std::pow(1.0 - p.beta, j);
      brute += v * (1.0 - v);
    }
  }
  CHECK(kernels::offspring_mass_a(1.0, p) == Approx(brute).epsilon(1e-12));
}

TEST_CASE("offspring_distribution at x = 1", "[kernels]") {
  const ModelParams p = default_params();

  SECTION("edge policy") {
    const auto d = kernels::offspring_distribution(1.0, p, ClipPolicy::edge);
    REQUIRE(d.atoms.size() == 5);  // lattice points >= 1/4
    REQUIRE(d.clip.has_value());
    CHECK(d.a_x == Approx(2.475).epsilon(1e-13));

    std::map<std::pair<int, int>, double> probs;
    for (const auto& atom : d.atoms) probs[{atom.coord.i, atom.coord.j}] = atom.probability;
    CHECK(probs[{0, 1}] == Approx(80.0 / 891.0).epsilon(1e-12));
    CHECK(probs[{0, 0}] == 0.0);  // weight x(x-x) vanishes
    CHECK(d.clip->probability == Approx(45931.0 / 72171.0).epsilon(1e-12));
    CHECK(d.clip->position == 0.25);
    CHECK(d.clip->coord.clipped_band == 0);

    double total = d.clip->probability;
    for (const auto& atom : d.atoms) total += atom.probability;
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }

  SECTION("conditioned policy") {
    const auto d = kernels::offspring_distribution(1.0, p, ClipPolicy::conditioned);
    CHECK_FALSE(d.clip.has_value());
    CHECK_FALSE(d.degenerate);
    double total = 0.0;
    for (const auto& atom : d.atoms) total += atom.probability;
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("offspring_distribution corner cases", "[kernels]") {
  const ModelParams p = default_params();

  SECTION("x = 1/3: only in-band lattice point is x itself") {
    const auto edge = kernels::offspring_distribution(1.0 / 3.0, p, ClipPolicy::edge);
    REQUIRE(edge.clip.has_value());
    CHECK(edge.clip->probability == Approx(1.0).margin(1e-15));
    CHECK(edge.clip->position == 0.25);

    const auto cond = kernels::offspring_distribution(1.0 / 3.0, p, ClipPolicy::conditioned);
    CHECK(cond.degenerate);
    REQUIRE(cond.atoms.size() == 1);
    CHECK(cond.atoms[0].probability == 1.0);
    CHECK(cond.atoms[0].position == Approx(1.0 / 3.0));
  }

  SECTION("parent exactly on its band edge keeps its own state") {
    const auto d = kernels::offspring_distribution(0.25, p, ClipPolicy::edge);
    REQUIRE(d.clip.has_value());
    CHECK(d.clip->probability == Approx(1.0).margin(1e-15));
    CHECK_FALSE(d.clip->coord.clipped());  // maps back onto the parent coordinate
  }

  SECTION("positions never exceed the parent and stay above the band edge") {
    montecarlo::RngStream rng(8, 0, montecarlo::stream_tag::testing);
    for (int k = 0; k < 500; ++k) {
      const double x = rng.uniform(p.floor(), 1.0);
      for (const ClipPolicy policy : {ClipPolicy::edge, ClipPolicy::conditioned}) {
        const auto d = kernels::offspring_distribution(x, p, policy);
        const double lo = p.band_floor(model::band_of(x, p));
        for (const auto& atom : d.atoms) {
          CHECK(atom.position <= x);
          CHECK(atom.position >= lo - 1e-15);
        }
        double total = d.clip ? d.clip->probability : 0.0;
        for (const auto& atom : d.atoms) total += atom.probability;
        CHECK(std::abs(total - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("sample_offspring matches the distribution", "[kernels][statistical]") {
  const ModelParams p = default_params();
  const std::array<double, 1> roots{1.0};
  const FractalCoord parent{0, 0, 0, -1};
  const auto d = kernels::offspring_distribution(1.0, p, ClipPolicy::edge);

  montecarlo::RngStream rng(2024, 0, montecarlo::stream_tag::testing);
  kernels::SampleStats stats;
  const int n = 100'000;
  std::map<std::array<std::int32_t, 4>, int> counts;
  for (int k = 0; k < n; ++k) {
    const auto c = kernels::sample_offspring(parent, roots, p, ClipPolicy::edge, rng, &stats);
    ++counts[c.identity()];
  }

  const auto check_freq = [&](const FractalCoord& c, double prob) {
    const double freq = static_cast<double>(counts[c.identity()]) / n;
    const double se = std::sqrt(prob * (1.0 - prob) / n);
    CHECK(std::abs(freq - prob) <= std::max(4.0 * se, 1e-4));
  };
  check_freq(FractalCoord{0, 0, 1, -1}, 80.0 / 891.0);
  check_freq(d.clip->coord, d.clip->probability);

  // proposal acceptance rate: a(1) * beta(1-beta) / 1 = 0.55
  const double accept = static_cast<double>(stats.accepted) / static_cast<double>(stats.proposals);
  CHECK(accept == Approx(0.55).margin(0.01));
}

TEST_CASE("sample_offspring agrees with the law at every support state", "[kernels][statistical]") {
  const ModelParams p = default_params();
  const semigroup::StateSpace S = semigroup::reachable_support(1.0, p);
  const int n_samples = 20'000;

  for (int state = 0; state < S.size(); ++state) {
    for (const ClipPolicy policy : {ClipPolicy::edge, ClipPolicy::conditioned}) {
      const auto d = kernels::offspring_distribution(S.coord(state), S.roots(), p, policy);
      std::map<std::array<std::int32_t, 4>, double> expected;
      for (const auto& atom : d.atoms) expected[atom.coord.identity()] += atom.probability;
      if (d.clip) expected[d.clip->coord.identity()] += d.clip->probability;

      montecarlo::RngStream rng(271828, static_cast<std::uint64_t>(state),
                                policy == ClipPolicy::edge ? 61 : 62);
      std::map<std::array<std::int32_t, 4>, int> counts;
      for (int k = 0; k < n_samples; ++k) {
        const auto c = kernels::sample_offspring(S.coord(state), S.roots(), p, policy, rng);
        ++counts[c.identity()];
      }
      for (const auto& [identity, count] : counts) {
        REQUIRE(expected.count(identity) == 1);  // no outcome outside the law's support
      }
      for (const auto& [identity, prob] : expected) {
        const double freq = static_cast<double>(counts[identity]) / n_samples;
        const double se = std::sqrt(prob * (1.0 - prob) / n_samples);
        CHECK(std::abs(freq - prob) <= 5.0 * se + 1e-3);
      }
    }
  }
}

TEST_CASE("sample_offspring determinism and policies", "[kernels]") {
  const ModelParams p = default_params();
  const std::array<double, 1> roots{1.0};
  const FractalCoord parent{0, 0, 0, -1};

  montecarlo::RngStream a(99, 5, 3), b(99, 5, 3);
  for (int k = 0; k < 200; ++k) {
    const auto ca = kernels::sample_offspring(parent, roots, p, ClipPolicy::edge, a);
    const auto cb = kernels::sample_offspring(parent, roots, p, ClipPolicy::edge, b);
    CHECK(ca == cb);
  }

  // conditioned sampling never clips and stays in band
  montecarlo::RngStream rng(100, 0, montecarlo::stream_tag::testing);
  for (int k = 0; k < 5000; ++k) {
    const auto c = kernels::sample_offspring(parent, roots, p, ClipPolicy::conditioned, rng);
    CHECK_FALSE(c.clipped());
    CHECK(model::coord_value(c, roots, p) >= 0.25);
  }

  // degenerate conditioned branch reproduces the parent
  const FractalCoord deep{0, 1, 0, -1};  // value 1/3
  for (int k = 0; k < 10; ++k) {
    CHECK(kernels::sample_offspring(deep, roots, p, ClipPolicy::conditioned, rng) == deep);
  }
}

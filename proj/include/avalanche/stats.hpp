#pragma once

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "avalanche/error.hpp"
#include "avalanche/model.hpp"

// Statistical machinery turning equalities in law into pass/fail tests:
// exact coordinate-keyed empirical pmfs, Pearson goodness of fit with the
// classical pooling rule, total variation, and normal-approximation
// confidence intervals.

namespace avalanche::stats {

using model::FractalCoord;

struct EmpiricalPmf {
  std::vector<FractalCoord> support;
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;
};

/// Exact counts by coordinate identity. A sample outside the support is an
/// error: support violations are themselves test failures.
inline EmpiricalPmf empirical_pmf(std::span<const FractalCoord> samples,
                                  std::span<const FractalCoord> support) {
  EmpiricalPmf pmf;
  pmf.support.assign(support.begin(), support.end());
  pmf.counts.assign(support.size(), 0);
  std::map<std::array<std::int32_t, 4>, std::size_t> index;
  for (std::size_t k = 0; k < support.size(); ++k) index.emplace(support[k].identity(), k);
  for (const FractalCoord& s : samples) {
    const auto it = index.find(s.identity());
    if (it == index.end()) fail(errc::unknown_coordinate, "sample coordinate not in support");
    ++pmf.counts[it->second];
    ++pmf.total;
  }
  return pmf;
}

struct GofReport {
  double statistic = 0.0;
  int degrees_of_freedom = 0;
  double p_value = 1.0;
  int pooled_bins = 0;  // original bins absorbed into the pooled tail bin
};

namespace detail {

inline double chi_squared_upper_tail(double statistic, int dof) {
  const boost::math::chi_squared dist(static_cast<double>(dof));
  return boost::math::cdf(boost::math::complement(dist, statistic));
}

/// Classical pooling: bins with expected count below 5 are merged into one
/// tail bin; if that bin itself stays below 5 it is merged into the regular
/// bin with the smallest expectation (first by index on ties).
struct Pooling {
  std::vector<std::vector<std::size_t>> groups;
  int pooled = 0;
};

inline Pooling pool_bins(std::span<const double> expected) {
  Pooling pooling;
  std::vector<std::size_t> tail;
  double tail_expected = 0.0;
  for (std::size_t k = 0; k < expected.size(); ++k) {
    if (expected[k] < 5.0) {
      tail.push_back(k);
      tail_expected += expected[k];
    } else {
      pooling.groups.push_back({k});
    }
  }
  pooling.pooled = static_cast<int>(tail.size());
  if (!tail.empty()) {
    if (tail_expected >= 5.0 || pooling.groups.empty()) {
      pooling.groups.push_back(std::move(tail));
    } else {
      std::size_t best = 0;
      for (std::size_t g = 1; g < pooling.groups.size(); ++g) {
        if (expected[pooling.groups[g].front()] < expected[pooling.groups[best].front()]) best = g;
      }
      auto& host = pooling.groups[best];
      host.insert(host.end(), tail.begin(), tail.end());
    }
  }
  return pooling;
}

}  // namespace detail

/// Pearson one-sample goodness of fit against an expected probability vector
/// on the same support; p-value from the chi-square upper tail with
/// dof = bins - 1 after pooling.
inline GofReport chisq_gof(const EmpiricalPmf& observed, std::span<const double> expected) {
  require(expected.size() == observed.support.size(), errc::support_mismatch,
          "expected vector length != support size");
  double sum = 0.0;
  for (double e : expected) sum += e;
  require(std::abs(sum - 1.0) <= 1e-9, errc::support_mismatch, "expected must sum to 1");
  require(observed.total >= 30, errc::too_few_samples, "need at least 30 samples");

  std::vector<double> expected_counts(expected.size());
  for (std::size_t k = 0; k < expected.size(); ++k) {
    expected_counts[k] = expected[k] * static_cast<double>(observed.total);
  }
  const detail::Pooling pooling = detail::pool_bins(expected_counts);
  if (pooling.groups.size() <= 1) {
    fail(errc::degenerate_expected, "all mass pooled into one bin; test is vacuous");
  }

  double statistic = 0.0;
  for (const auto& group : pooling.groups) {
    double o = 0.0;
    double e = 0.0;
    for (std::size_t k : group) {
      o += static_cast<double>(observed.counts[k]);
      e += expected_counts[k];
    }
    if (e <= 0.0) {
      if (o > 0.0) statistic = std::numeric_limits<double>::infinity();
      continue;
    }
    statistic += (o - e) * (o - e) / e;
  }
  GofReport report;
  report.statistic = statistic;
  report.degrees_of_freedom = static_cast<int>(pooling.groups.size()) - 1;
  report.pooled_bins = pooling.pooled;
  report.p_value = std::isfinite(statistic)
                       ? detail::chi_squared_upper_tail(statistic, report.degrees_of_freedom)
                       : 0.0;
  return report;
}

/// Two-sample Pearson test with pooled proportions; fixed-margins convention
/// dof = bins - 1. Bins whose expected count under either sample falls below
/// 5 are pooled with the same rule as the one-sample test.
inline GofReport chisq_two_sample(const EmpiricalPmf& a, const EmpiricalPmf& b) {
  require(a.support.size() == b.support.size(), errc::support_mismatch,
          "samples have different supports");
  for (std::size_t k = 0; k < a.support.size(); ++k) {
    require(a.support[k] == b.support[k], errc::support_mismatch,
            "samples have different supports");
  }
  require(a.total >= 30 && b.total >= 30, errc::too_few_samples, "need at least 30 samples");

  const double na = static_cast<double>(a.total);
  const double nb = static_cast<double>(b.total);
  std::vector<double> min_expected(a.support.size());
  std::vector<double> pooled_p(a.support.size());
  for (std::size_t k = 0; k < a.support.size(); ++k) {
    pooled_p[k] = (static_cast<double>(a.counts[k]) + static_cast<double>(b.counts[k])) / (na + nb);
    min_expected[k] = std::min(na, nb) * pooled_p[k];
  }
  const detail::Pooling pooling = detail::pool_bins(min_expected);
  if (pooling.groups.size() <= 1) {
    fail(errc::degenerate_expected, "all mass pooled into one bin; test is vacuous");
  }

  double statistic = 0.0;
  for (const auto& group : pooling.groups) {
    double oa = 0.0, ob = 0.0, pg = 0.0;
    for (std::size_t k : group) {
      oa += static_cast<double>(a.counts[k]);
      ob += static_cast<double>(b.counts[k]);
      pg += pooled_p[k];
    }
    if (pg <= 0.0) continue;  // no observations in either sample
    statistic += (oa - na * pg) * (oa - na * pg) / (na * pg);
    statistic += (ob - nb * pg) * (ob - nb * pg) / (nb * pg);
  }
  GofReport report;
  report.statistic = statistic;
  report.degrees_of_freedom = static_cast<int>(pooling.groups.size()) - 1;
  report.pooled_bins = pooling.pooled;
  report.p_value = detail::chi_squared_upper_tail(statistic, report.degrees_of_freedom);
  return report;
}

inline double tv_distance(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), errc::support_mismatch, "vectors have different supports");
  double sp = 0.0, sq = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    sp += p[k];
    sq += q[k];
  }
  require(std::abs(sp - 1.0) <= 1e-9 && std::abs(sq - 1.0) <= 1e-9, errc::support_mismatch,
          "probability vectors must sum to 1");
  double tv = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) tv += std::abs(p[k] - q[k]);
  return 0.5 * tv;
}

struct MeanCi {
  double mean = 0.0;
  double half_width = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

/// Normal-approximation interval mean +- z * s/sqrt(n) with fixed z values
/// 1.96 / 2.576 / 3.0 for confidence 0.95 / 0.99 / 0.997.
inline MeanCi mean_ci(std::span<const double> samples, double confidence) {
  require(samples.size() >= 30, errc::too_few_samples, "need at least 30 samples");
  double z = 0.0;
  if (std::abs(confidence - 0.95) < 1e-12) {
    z = 1.96;
  } else if (std::abs(confidence - 0.99) < 1e-12) {
    z = 2.576;
  } else if (std::abs(confidence - 0.997) < 1e-12) {
    z = 3.0;
  } else {
    fail(errc::invalid_argument, "confidence must be one of 0.95, 0.99, 0.997");
  }
  MeanCi ci;
  ci.n = samples.size();
  const double n = static_cast<double>(samples.size());
  for (double s : samples) ci.mean += s;
  ci.mean /= n;
  double ss = 0.0;
  for (double s : samples) ss += (s - ci.mean) * (s - ci.mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  ci.se = sd / std::sqrt(n);
  ci.half_width = z * ci.se;
  return ci;
}

}  // namespace avalanche::stats

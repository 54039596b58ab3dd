#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "avalanche/error.hpp"

// Model constants, the band partition of the size interval, and the fractal
// size lattices with exact integer-exponent coordinates.

namespace avalanche::model {

/// Rupture ratio r, derived split ratio beta = r/(1+r), uniformization rate
/// lambda0 = (beta^2 + (1-beta)^2)/4, and the resolution thresholds
/// d_1 > d_2 > ... > d_depth.
struct ModelParams {
  double r = 0.0;
  double beta = 0.0;
  double lambda0 = 0.0;
  std::vector<double> thresholds;
  int depth = 0;

  /// Smallest resolved size, d_depth.
  double floor() const noexcept { return thresholds.back(); }
  /// Lower edge of band k: d_{k+1} (band 0 is [d_1, 1]).
  double band_floor(int k) const { return thresholds.at(static_cast<std::size_t>(k)); }
};

/// Thresholds d_k = base^k, k = 1..depth. Valid whenever base < beta.
inline std::vector<double> geometric_thresholds(double base, int depth) {
  require(base > 0.0 && base < 1.0, errc::threshold_violation, "geometric base must be in (0,1)");
  require(depth >= 1, errc::threshold_violation, "depth must be >= 1");
  std::vector<double> d(static_cast<std::size_t>(depth));
  double v = 1.0;
  for (int k = 0; k < depth; ++k) {
    v *= base;
    d[static_cast<std::size_t>(k)] = v;
  }
  return d;
}

/// Validates (r, thresholds) and derives beta and lambda0. Rejects parameter
/// sets where some lattice point beta^i(1-beta)^j (i+j <= 64) of the unit
/// root lies within 1e-12 of a threshold, so band membership of lattice
/// points stays unambiguous in double precision.
inline ModelParams make_params(double r, std::vector<double> thresholds) {
  require(r > 0.0 && r < 1.0, errc::ratio_out_of_range, "r must lie strictly in (0,1)");
  require(!thresholds.empty(), errc::threshold_violation, "threshold list is empty");

  ModelParams p;
  p.r = r;
  p.beta = r / (1.0 + r);
  p.lambda0 = (p.beta * p.beta + (1.0 - p.beta) * (1.0 - p.beta)) / 4.0;
  p.depth = static_cast<int>(thresholds.size());

  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    require(thresholds[k] > 0.0 && thresholds[k] < 1.0, errc::threshold_violation,
            "thresholds must lie in (0,1)");
    if (k + 1 < thresholds.size()) {
      require(thresholds[k + 1] < thresholds[k], errc::threshold_violation,
              "thresholds must be strictly decreasing");
      require(thresholds[k + 1] / thresholds[k] < p.beta, errc::threshold_violation,
              "d_{k+1}/d_k must be < beta");
    }
  }
  require(thresholds.front() < p.beta, errc::threshold_violation, "d_1 must be < beta");

  constexpr int kGuardExponentSum = 64;
  constexpr double kGuardMargin = 1e-12;
  for (int i = 0; i <= kGuardExponentSum; ++i) {
    for (int j = 0; i + j <= kGuardExponentSum; ++j) {
      const double v = std::pow(p.beta, i) * std::pow(1.0 - p.beta, j);
      for (double d : thresholds) {
        if (std::abs(v - d) <= kGuardMargin) {
          fail(errc::boundary_tie, "lattice point beta^" + std::to_string(i) + "(1-beta)^" +
                                       std::to_string(j) + " ties a threshold");
        }
      }
    }
  }

  p.thresholds = std::move(thresholds);
  return p;
}

/// Index of the band containing x: band 0 is [d_1, 1], band k >= 1 is
/// [d_{k+1}, d_k).
inline int band_of(double x, const ModelParams& p) {
  if (x > 1.0) fail(errc::above_unit, "size above 1");
  if (x < p.floor()) fail(errc::below_resolution, "size below d_depth");
  for (int k = 0; k < p.depth; ++k) {
    if (x >= p.thresholds[static_cast<std::size_t>(k)]) return k;
  }
  return p.depth - 1;  // unreachable given the floor check
}

/// Exact coordinate of a particle size: beta^i (1-beta)^j * root, or, when
/// clipped_band >= 0, the lower edge of that band with (i, j) keeping the
/// pre-clip exponents. Identity of clipped coordinates is the band alone;
/// distinct pre-clip proposals land on the same edge state.
struct FractalCoord {
  std::int32_t root = 0;
  std::int32_t i = 0;
  std::int32_t j = 0;
  std::int32_t clipped_band = -1;

  bool clipped() const noexcept { return clipped_band >= 0; }

  std::array<std::int32_t, 4> identity() const noexcept {
    if (clipped()) return {1, clipped_band, 0, 0};
    return {0, root, i, j};
  }

  friend bool operator==(const FractalCoord& a, const FractalCoord& b) noexcept {
    return a.identity() == b.identity();
  }
  friend bool operator!=(const FractalCoord& a, const FractalCoord& b) noexcept {
    return !(a == b);
  }
};

/// Total order on coordinate identities (not on values).
struct CoordIdentityLess {
  bool operator()(const FractalCoord& a, const FractalCoord& b) const noexcept {
    return a.identity() < b.identity();
  }
};

inline double coord_value(const FractalCoord& c, std::span<const double> roots,
                          const ModelParams& p) {
  if (c.clipped()) {
    require(c.clipped_band >= 0 && c.clipped_band < p.depth, errc::invalid_argument,
            "clipped band out of range");
    return p.thresholds[static_cast<std::size_t>(c.clipped_band)];
  }
  if (c.root < 0 || static_cast<std::size_t>(c.root) >= roots.size()) {
    fail(errc::bad_root_index, "root index " + std::to_string(c.root));
  }
  return std::pow(p.beta, c.i) * std::pow(1.0 - p.beta, c.j) * roots[static_cast<std::size_t>(c.root)];
}

/// Finite cut of a fractal lattice: all coordinates with value >= floor,
/// sorted by strictly decreasing value.
struct FractalSupport {
  std::vector<FractalCoord> coords;
  double floor = 0.0;
};

namespace detail {

/// All lattice points of root_index's lattice at offsets >= (i0, j0) from
/// it with value >= floor, unsorted. Enumeration is exhaustive: the value is
/// strictly decreasing in each exponent.
inline std::vector<FractalCoord> lattice_points_down_to(std::int32_t root_index, std::int32_t i0,
                                                        std::int32_t j0, double floor,
                                                        std::span<const double> roots,
                                                        const ModelParams& p) {
  std::vector<FractalCoord> out;
  for (std::int32_t a = 0;; ++a) {
    const FractalCoord column{root_index, i0 + a, j0, -1};
    if (coord_value(column, roots, p) < floor) break;
    for (std::int32_t b = 0;; ++b) {
      const FractalCoord c{root_index, i0 + a, j0 + b, -1};
      if (coord_value(c, roots, p) < floor) break;
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace detail

inline FractalSupport fractal_points(double root, double floor, const ModelParams& p) {
  require(root > 0.0 && root <= 1.0, errc::invalid_argument, "root must be in (0,1]");
  require(floor > 0.0 && floor <= root, errc::invalid_argument, "floor must be in (0, root]");
  const std::array<double, 1> roots{root};
  FractalSupport s;
  s.floor = floor;
  s.coords = detail::lattice_points_down_to(0, 0, 0, floor, roots, p);
  std::sort(s.coords.begin(), s.coords.end(), [&](const FractalCoord& a, const FractalCoord& b) {
    const double va = coord_value(a, roots, p);
    const double vb = coord_value(b, roots, p);
    if (va != vb) return va > vb;
    return CoordIdentityLess{}(a, b);
  });
  return s;
}

}  // namespace avalanche::model

#pragma once

#include <stdexcept>
#include <string>

namespace avalanche {

enum class errc {
  ratio_out_of_range,
  threshold_violation,
  boundary_tie,
  below_resolution,
  above_unit,
  bad_root_index,
  out_of_unit,
  unclosed_support,
  singular_system,
  tolerance_not_met,
  unknown_coordinate,
  degenerate_expected,
  support_mismatch,
  too_few_samples,
  population_cap,
  internal_error,
  invalid_argument,
  config_error,
};

inline const char* errc_name(errc c) noexcept {
  switch (c) {
    case errc::ratio_out_of_range: return "RatioOutOfRange";
    case errc::threshold_violation: return "ThresholdViolation";
    case errc::boundary_tie: return "BoundaryTie";
    case errc::below_resolution: return "BelowResolution";
    case errc::above_unit: return "AboveUnit";
    case errc::bad_root_index: return "BadRootIndex";
    case errc::out_of_unit: return "OutOfUnit";
    case errc::unclosed_support: return "UnclosedSupport";
    case errc::singular_system: return "SingularSystem";
    case errc::tolerance_not_met: return "ToleranceNotMet";
    case errc::unknown_coordinate: return "UnknownCoordinate";
    case errc::degenerate_expected: return "DegenerateExpected";
    case errc::support_mismatch: return "SupportMismatch";
    case errc::too_few_samples: return "TooFewSamples";
    case errc::population_cap: return "PopulationCap";
    case errc::internal_error: return "InternalError";
    case errc::invalid_argument: return "InvalidArgument";
    case errc::config_error: return "ConfigError";
  }
  return "UnknownError";
}

class error : public std::runtime_error {
 public:
  error(errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}

  errc code() const noexcept { return code_; }

 private:
  errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& msg) { throw error(code, msg); }

inline void require(bool ok, errc code, const std::string& msg) {
  if (!ok) fail(code, msg);
}

}  // namespace avalanche

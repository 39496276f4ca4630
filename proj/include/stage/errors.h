#pragma once

#include <stdexcept>
#include <string>

namespace stage {

// Bad input: malformed config, violated precondition. CLI exit code 1.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Comparing or combining states that describe different systems.
struct DimensionMismatch : ValidationError {
  using ValidationError::ValidationError;
};

// A budget ran out (sampling attempts, MPC steps). CLI exit code 2.
struct ExhaustedError : std::runtime_error {
  explicit ExhaustedError(const std::string& what) : std::runtime_error(what) {}
};

// Every candidate rollout of one expansion blew past the divergence guard;
// the planner counts the iteration as skipped. Carries the substeps burned
// so budget accounting stays exact.
struct AllDivergedError : std::runtime_error {
  long sim_steps = 0;
  explicit AllDivergedError(const std::string& what, long steps = 0)
      : std::runtime_error(what), sim_steps(steps) {}
};

// Too few states to run an estimator; the caller reports the metric as
// absent instead of crashing.
struct InsufficientStatesError : std::runtime_error {
  explicit InsufficientStatesError(const std::string& what) : std::runtime_error(what) {}
};

// A nearest-neighbor distance of zero (duplicate states) would send the
// entropy estimate to -inf; the caller de-duplicates and retries.
struct DegenerateSampleError : std::runtime_error {
  explicit DegenerateSampleError(const std::string& what) : std::runtime_error(what) {}
};

// A path references a stable id that is not in the supplied set.
struct UnknownGoalIdError : ValidationError {
  using ValidationError::ValidationError;
};

}  // namespace stage

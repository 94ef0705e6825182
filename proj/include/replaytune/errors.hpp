#pragma once

#include <stdexcept>
#include <string>

namespace replaytune {

// Error taxonomy. The CLI maps each type to a distinct exit code, so keep
// these narrow instead of throwing bare std::runtime_error.

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// A stored or in-flight record violates a structural invariant.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A caller broke an interface contract that upstream stages are supposed to
// guarantee (e.g. gold token missing from its candidate set).
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

struct FingerprintMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace replaytune

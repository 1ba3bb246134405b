#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tdnas {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dimension mismatch between operands; message names both shapes.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid argument value (non-finite input, out-of-range index, ...).
struct ValueError : Error {
  using Error::Error;
};

// Operation called in a state it cannot run in (e.g. missing intermediates).
struct StateError : Error {
  using Error::Error;
};

// A requested enumeration exceeds the configured size cap.
struct CapacityError : Error {
  using Error::Error;
};

// Parameters are degenerate for the requested update (e.g. all-zero factor).
struct DegenerateParameterError : Error {
  using Error::Error;
};

// Malformed file contents; carries the byte offset of the problem.
struct FormatError : Error {
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (byte offset " + std::to_string(offset) + ")"),
        byte_offset(offset) {}
  std::uint64_t byte_offset;
};

// Training failure; carries the step index at which it occurred.
struct TrainingError : Error {
  TrainingError(const std::string& what, long long at_step)
      : Error(what + " (step " + std::to_string(at_step) + ")"), step(at_step) {}
  long long step;
};

// Configuration file problems; messages carry line numbers / key names.
struct ConfigError : Error {
  using Error::Error;
};

// Filesystem-level failures (open/read/write).
struct IoError : Error {
  using Error::Error;
};

}  // namespace tdnas

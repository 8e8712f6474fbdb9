#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace handwave {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Array dimensions disagree with an op's contract.
struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error(what) {}
};

// Invalid configuration value (schedule range, kernel parity, unknown key, ...).
struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(what) {}
};

// A file does not match its on-disk format. Carries the byte offset at which
// parsing failed when known.
struct FormatError : Error {
  explicit FormatError(const std::string& what, std::size_t byte_offset = npos)
      : Error(byte_offset == npos ? what
                                  : what + " (at byte offset " + std::to_string(byte_offset) + ")"),
        offset(byte_offset) {}
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t offset;
};

// Filesystem-level failure (missing file, unwritable directory).
struct IoError : Error {
  explicit IoError(const std::string& what) : Error(what) {}
};

// Non-finite value produced where the contract requires finite results.
struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(what) {}
};

// API misuse: a precondition that valid callers never violate.
struct ContractError : Error {
  explicit ContractError(const std::string& what) : Error(what) {}
};

// A metric has no defined value on this input (e.g. no beats detected).
// Callers report the metric as absent instead of failing the run.
struct MetricUndefined : Error {
  explicit MetricUndefined(const std::string& what) : Error(what) {}
};

}  // namespace handwave

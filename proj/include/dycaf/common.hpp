#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dycaf {

using i64 = std::int64_t;
using i32 = std::int32_t;
using u64 = std::uint64_t;

// Shape or argument precondition violated.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Numeric contract violated (non-finite data, bad scalar argument, ...).
class ValueError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Config file or config value problem; message carries the line number
// when the problem comes from a file.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when the adjoint fixed-point iteration detects sustained growth,
// i.e. the operator is not a contraction at the solution.
class ContractionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dycaf

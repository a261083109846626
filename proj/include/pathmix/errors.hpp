#pragma once

#include <stdexcept>
#include <string>

namespace pathmix {

// Malformed input: bad CSV rows, shape or vocabulary mismatches, invalid
// arguments.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Numerical failure: non-factorizable covariance, impossible observation,
// non-finite gradient.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pathmix

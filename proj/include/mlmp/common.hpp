#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mlmp {

inline constexpr const char* kVersion = "mlmp 0.1.0";

// Error taxonomy mirrors the CLI exit codes: usage/contract problems exit 1,
// bad input data exits 2, numeric aborts exit 3.
struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mlmp

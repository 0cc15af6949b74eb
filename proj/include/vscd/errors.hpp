#pragma once

#include <stdexcept>
#include <string>

namespace vscd {

// Bad configuration (shapes, ranges, unknown keys). CLI exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad runtime input (malformed tensors, mismatched pairs). CLI exit code 3.
struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing or corrupt files on disk. CLI exit code 3.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace vscd

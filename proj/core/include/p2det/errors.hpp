#pragma once

#include <stdexcept>
#include <string>

namespace p2det {

// Exit-code mapping used by the CLI: 2 for config/usage, 3 for numerical
// aborts, 4 for I/O failures. Library code throws, tools/ translates.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace p2det

#pragma once

#include <stdexcept>
#include <string>

namespace somala {

/// Numerical divergence of an iterative procedure (non-finite state,
/// degenerate Cholesky factor, exploding Langevin drift).
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

/// File or serialization failure.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// Inconsistent user-supplied configuration or data shapes.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace somala

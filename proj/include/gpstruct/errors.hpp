#pragma once

#include <stdexcept>
#include <string>

namespace gpstruct {

/// Bad option values: rule probabilities that do not sum to one, supercritical
/// grammars, non-positive particle counts and the like.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Problems with user-supplied data files (malformed rows, too few points,
/// degenerate training sets).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Cholesky factorization failed even after exhausting the jitter ladder.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& msg, double attempted_jitter)
      : std::runtime_error(msg), attempted_jitter(attempted_jitter) {}
  double attempted_jitter;
};

/// Kernel-expression text that does not parse; `position` is the byte offset
/// of the offending token.
class ExprParseError : public std::runtime_error {
 public:
  ExprParseError(const std::string& msg, std::size_t position)
      : std::runtime_error(msg + " at offset " + std::to_string(position)),
        position(position) {}
  std::size_t position;
};

/// Raised when every particle weight is -inf.
class DegeneratePopulationError : public std::runtime_error {
 public:
  explicit DegeneratePopulationError(const std::string& msg)
      : std::runtime_error(msg) {}
};

}  // namespace gpstruct

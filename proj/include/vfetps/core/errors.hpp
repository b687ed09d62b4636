#pragma once

#include <stdexcept>
#include <string>

namespace vfetps {

/// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A documented precondition of an operation was violated.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value (indivisible image size, C > B, tau <= 0, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The finite-difference oracle cannot be trusted for this function.
class OracleInvalidError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint or dump file has an unexpected magic, version or layout.
class VersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A loss term went non-finite during training.
class TrainingAbortError : public std::runtime_error {
 public:
  TrainingAbortError(const std::string& term, const std::string& what)
      : std::runtime_error(what), term_(term) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

}  // namespace vfetps

#pragma once

#include <stdexcept>
#include <string>

namespace evimix {

/// Base class for every error raised by the library. `kind()` is a stable,
/// machine-parsable class name used by the CLI error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Violated precondition on shapes, sizes or argument ranges.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("ContractError", what) {}
};

/// Argument outside the mathematical domain of a function.
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error("DomainError", what) {}
};

/// Non-finite value met while evaluating or differentiating a tape.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::size_t node)
      : Error("NumericError", what), node_(node) {}
  std::size_t node() const noexcept { return node_; }

 private:
  std::size_t node_;
};

/// Dempster combination of two opinions in (near) total conflict.
class TotalConflictError : public Error {
 public:
  explicit TotalConflictError(const std::string& what, std::size_t pair_index = 0)
      : Error("TotalConflictError", what), pair_index_(pair_index) {}
  std::size_t pair_index() const noexcept { return pair_index_; }

 private:
  std::size_t pair_index_;
};

class LoadError : public Error {
 public:
  explicit LoadError(const std::string& what) : Error("LoadError", what) {}
};

class SplitError : public Error {
 public:
  explicit SplitError(const std::string& what) : Error("SplitError", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("ConfigError", what) {}
};

/// Divergence during pretraining or training.
class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& what) : Error("TrainingError", what) {}
};

}  // namespace evimix

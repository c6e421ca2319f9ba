#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace deepair {

/// Base error. Every failure carries the module that raised it so the CLI can
/// emit a module-qualified one-line message.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& message)
      : std::runtime_error(module + ": " + message), module_(std::move(module)) {}

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

/// Dataset too short for the requested split/window.
class SizingError : public Error {
 public:
  SizingError(const std::string& message, std::size_t minimum_hours)
      : Error("gridstore", message), minimum_hours_(minimum_hours) {}
  std::size_t minimum_hours() const noexcept { return minimum_hours_; }

 private:
  std::size_t minimum_hours_;
};

/// On-disk artifact is malformed, truncated or of the wrong version.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Tensor shape contract violated.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& message) : Error("tensorcore", message) {}
};

/// NaN or Inf produced by a forward or backward op.
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& op)
      : Error("tensorcore", "non-finite value produced by " + op), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

struct CellIndex {
  std::size_t row = 0;
  std::size_t col = 0;

  friend bool operator==(const CellIndex&, const CellIndex&) = default;
  friend auto operator<=>(const CellIndex&, const CellIndex&) = default;
};

}  // namespace deepair

#pragma once

#include <cstddef>
#include <exception>
#include <stdexcept>
#include <string>

namespace dasent {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad command line or configuration.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Anything wrong with input data: syntax, structure, label codes.
class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class StructureError : public DataError {
 public:
  using DataError::DataError;
};

class ValidationError : public DataError {
 public:
  using DataError::DataError;
};

/// Incompatible tensor shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced, or training diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Process exit codes used by the command line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return kExitUsage;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return kExitData;
}

}  // namespace dasent

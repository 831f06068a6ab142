#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bacon {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A precondition or configuration value was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered in a loss, gradient or feature.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed input file. Carries the 1-based line number when known.
class ParseError : public IoError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : IoError(what + " (line " + std::to_string(line) + ")"), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

}  // namespace detail
}  // namespace bacon

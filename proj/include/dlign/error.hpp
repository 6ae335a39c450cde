#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dlign {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke an operation's precondition (out-of-range coordinates,
// bad kernel size, mismatched dimensions, ...).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Malformed input file. `offset()` is the byte position where parsing failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// Input validation failed before any work was started (missing files,
// inconsistent manifests). Commands map this to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace dlign

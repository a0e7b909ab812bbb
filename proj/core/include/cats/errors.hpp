#pragma once

#include <stdexcept>
#include <string>

namespace cats {

// Base of every error thrown by the library. The CLI prints `what()` on a
// single `error: ...` line and exits nonzero.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape, divisibility or value-range precondition violated by a caller.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Inconsistent model, run or dataset configuration, detected before compute.
class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrorKind {
  kBadMagic,
  kBadVersion,
  kBadHeader,
  kTruncated,
  kIo,
};

// Malformed or unreadable on-disk volume, checkpoint or manifest.
class FormatError : public Error {
 public:
  FormatError(FormatErrorKind kind, const std::string& message)
      : Error(message), kind_(kind) {}

  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace cats

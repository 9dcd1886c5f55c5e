#pragma once

#include <stdexcept>
#include <string>

namespace ctxlm {

/// Bad user input or configuration. Maps to CLI exit code 1 and HTTP 400.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure while running an otherwise valid request (I/O, divergence).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Base for on-disk format problems.
class FormatError : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

class CorruptHeaderError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedRecordError : public FormatError {
 public:
  using FormatError::FormatError;
};

class InvariantViolationError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

#define CTXLM_REQUIRE(cond, msg)                      \
  do {                                                \
    if (!(cond)) throw ::ctxlm::ValidationError(msg); \
  } while (0)

}  // namespace ctxlm

#pragma once

#include <stdexcept>
#include <string>

namespace mshubert {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not agree for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Misuse of an API contract (non-scalar loss, invalid argument range).
class ContractError : public Error {
 public:
  using Error::Error;
};

class InputTooShortError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

/// Malformed configuration, manifest, label file or command line value.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Binary artifact with bad magic, version or checksum.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient during optimisation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mshubert

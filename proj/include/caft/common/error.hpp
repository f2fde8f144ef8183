#pragma once

#include <stdexcept>
#include <string>

namespace caft {

// Exception taxonomy. The CLI maps these onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN / Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Token id or target outside the vocabulary.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Sequence longer than the model context.
class LengthError : public Error {
 public:
  using Error::Error;
};

// Caller violated an API precondition (wrong phase, missing heads, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed or empty user input (datasets, corpora, id sets).
class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Structurally invalid checkpoint or archive.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace caft

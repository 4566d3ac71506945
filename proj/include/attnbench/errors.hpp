#pragma once

#include <stdexcept>
#include <string>

namespace attnbench {

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform to an operation's contract.
class DimensionError : public Error {
  public:
    using Error::Error;
};

/// A configuration value is invalid or inconsistent with another one.
class ConfigError : public Error {
  public:
    using Error::Error;
};

/// A softmax slice had every entry masked to -inf.
class MaskingError : public Error {
  public:
    using Error::Error;
};

class VocabularyError : public Error {
  public:
    using Error::Error;
};

class DataError : public Error {
  public:
    using Error::Error;
};

/// A checkpoint or data file is malformed, truncated or from another format version.
class FormatError : public Error {
  public:
    using Error::Error;
};

/// A caller broke an API precondition (non-scalar loss, missing gradient, ...).
class ContractError : public Error {
  public:
    using Error::Error;
};

} // namespace attnbench

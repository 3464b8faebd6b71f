#pragma once

#include <stdexcept>
#include <string>

namespace apf {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A configuration value violates its invariant.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a precondition that is not about shapes.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values appeared where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Input data (JSON, annotations) fails schema or value validation.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Binary container could not be decoded.
class ParseError : public Error {
 public:
  enum class Kind { kBadMagic, kTruncated, kSizeMismatch, kBadHeader, kIo };

  ParseError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace apf

#pragma once

#include <stdexcept>
#include <string>

namespace cfsl {

// Base of every error raised by the library. The CLI maps subclasses onto
// exit codes (config 2, data 3, numeric 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  enum class Kind { kGeneric, kEmptySplit, kMissingFile, kLabelGap, kClassTooSmall, kChecksum, kFormat };

  explicit DataError(const std::string& what, Kind kind = Kind::kGeneric) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline const char* kind_name(DataError::Kind k) {
  switch (k) {
    case DataError::Kind::kGeneric: return "generic";
    case DataError::Kind::kEmptySplit: return "empty";
    case DataError::Kind::kMissingFile: return "missing_file";
    case DataError::Kind::kLabelGap: return "label_gap";
    case DataError::Kind::kClassTooSmall: return "class_too_small";
    case DataError::Kind::kChecksum: return "checksum";
    case DataError::Kind::kFormat: return "format";
  }
  return "generic";
}

class NumericError : public Error {
 public:
  using Error::Error;
};

// A documented precondition of a domain type did not hold.
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace cfsl

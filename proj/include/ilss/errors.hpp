#pragma once

#include <stdexcept>
#include <string>

namespace ilss {

/// Base for every error raised by the library. The CLI maps the concrete
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

/// A filtered training split came out empty.
class EmptySplitError : public DataError {
 public:
  using DataError::DataError;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class LabelError : public DataError {
 public:
  using DataError::DataError;
};

/// Report inputs disagree (different class sets or plans).
class ReportError : public DataError {
 public:
  using DataError::DataError;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class StepIndexError : public Error {
 public:
  using Error::Error;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace ilss

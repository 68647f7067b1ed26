// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace rexmoe {

enum class ErrorKind {
  Internal,
  Config,
  Numeric,
  Io,
  Dimension,
  Checksum,
  Version,
  Parse,
  Empty,
  OutOfRange,
};

/// Base of every error the core throws. The C API maps `kind()` onto status
/// codes, and the CLI maps those onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ErrorKind::Dimension, what) {}
};

class ChecksumError : public Error {
 public:
  explicit ChecksumError(const std::string& what) : Error(ErrorKind::Checksum, what) {}
};

class VersionError : public Error {
 public:
  explicit VersionError(const std::string& what) : Error(ErrorKind::Version, what) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(ErrorKind::Parse, what) {}
};

class EmptyError : public Error {
 public:
  explicit EmptyError(const std::string& what) : Error(ErrorKind::Empty, what) {}
};

class OutOfRangeError : public Error {
 public:
  explicit OutOfRangeError(const std::string& what) : Error(ErrorKind::OutOfRange, what) {}
};

}  // namespace rexmoe

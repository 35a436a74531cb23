#pragma once

#include <stdexcept>
#include <string>

namespace ebtc {

/// Base of every error raised by the library. `kind()` maps onto the CLI exit codes.
class Error : public std::runtime_error {
 public:
  enum class Kind { Argument, Parse, Validation, Decode, Format, Divergence, Overflow, Io };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& what) : Error(Kind::Argument, what) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(Kind::Parse, what) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(Kind::Validation, what) {}
};

// Checksum, truncation and malformed-payload failures.
class DecodeError : public Error {
 public:
  explicit DecodeError(const std::string& what) : Error(Kind::Decode, what) {}
};

// Wrong magic, unsupported version, config/parameter-count mismatch.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(Kind::Format, what) {}
};

class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what) : Error(Kind::Divergence, what) {}
};

class OverflowError : public Error {
 public:
  explicit OverflowError(const std::string& what) : Error(Kind::Overflow, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(Kind::Io, what) {}
};

}  // namespace ebtc

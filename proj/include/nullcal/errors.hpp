#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nullcal {

// Base for every error the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid user-supplied configuration: bad flags, bad hyper-parameters,
// inconsistent templates. The CLI maps these to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes do not line up.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Model directory / tensor store / snapshot could not be read.
class LoadError : public Error {
 public:
  using Error::Error;
};

// A prompt could not be rendered (missing aspect, mask count, too long).
class RenderError : public Error {
 public:
  using Error::Error;
};

class OverlengthError : public RenderError {
 public:
  OverlengthError(const std::string& what, std::size_t length, std::size_t limit)
      : RenderError(what), length_(length), limit_(limit) {}
  std::size_t length() const { return length_; }
  std::size_t limit() const { return limit_; }

 private:
  std::size_t length_;
  std::size_t limit_;
};

// Input file with a malformed record; carries the 1-based line number.
class ParseError : public ConfigError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : ConfigError(what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace nullcal

#pragma once

#include <stdexcept>
#include <string>

namespace dmrl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A precondition on arguments or data was violated (shape mismatch,
/// out-of-range index, non-finite input).
class InvalidInput : public Error {
public:
  using Error::Error;
};

/// Unknown or malformed configuration keys, values, or command-line flags.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// A file could not be opened, read, or written.
class IoError : public Error {
public:
  using Error::Error;
};

/// A file was readable but its contents do not match the expected format.
class FormatError : public Error {
public:
  using Error::Error;
};

/// A loss term or gradient became NaN/Inf. `term()` names the culprit.
class NonFiniteError : public Error {
public:
  NonFiniteError(std::string term, const std::string& what)
      : Error(what), term_(std::move(term)) {}

  const std::string& term() const noexcept { return term_; }

private:
  std::string term_;
};

} // namespace dmrl

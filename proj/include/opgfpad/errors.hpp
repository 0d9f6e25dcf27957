#pragma once

#include <stdexcept>
#include <string>

namespace opgfpad {

// Base class for all toolkit errors. Subclasses distinguish usage/protocol
// mistakes (exit code 2 at the CLI) from runtime failures (exit code 1).
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration value or incompatible option combination.
class ConfigError : public Error {
public:
  using Error::Error;
};

// Evaluation-protocol violation (leave-one-out impossible, leakage, ...).
class ProtocolError : public Error {
public:
  using Error::Error;
};

// Image file could not be decoded.
class DecodeError : public Error {
public:
  using Error::Error;
};

// Malformed text input (manifest, minutiae file, ...).
class ParseError : public Error {
public:
  ParseError(const std::string& what, long line = -1)
      : Error(line >= 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  long line() const { return line_; }

private:
  long line_;
};

// Checkpoint or cache file failed an integrity check.
class IntegrityError : public Error {
public:
  using Error::Error;
};

// Checkpoint was produced under an incompatible configuration.
class CompatibilityError : public Error {
public:
  using Error::Error;
};

// Tensor shapes do not compose.
class ShapeError : public Error {
public:
  using Error::Error;
};

// Numerical failure (non-finite gradient or loss).
class NumericError : public Error {
public:
  using Error::Error;
};

// Filesystem-level failure.
class IoError : public Error {
public:
  using Error::Error;
};

}  // namespace opgfpad

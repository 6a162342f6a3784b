#pragma once

#include <stdexcept>
#include <string>

namespace clora {

// Every failure raised by the library derives from Error so callers (the CLI in
// particular) can separate library failures from programming mistakes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Argument outside its mathematical domain (temperature <= 0, p >= 1, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Bad user-provided data: unknown words, out-of-range token ids.
class InputError : public Error {
 public:
  using Error::Error;
};

// Operation invoked in the wrong lifecycle state (double merge, double backward).
class StateError : public Error {
 public:
  using Error::Error;
};

// Corrupt or unsupported on-disk data.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values detected during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace clora

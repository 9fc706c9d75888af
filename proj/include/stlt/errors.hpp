#pragma once

#include <stdexcept>
#include <string>

namespace stlt {

// Base of every error raised by the library. The CLI maps the subclasses
// onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid hyperparameters, shapes that disagree with a configuration, or a
// malformed config file. Exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data. Exit code 3.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or an attention row with nothing to attend to. Exit code 4.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes do not satisfy an operation's preconditions.
class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace stlt
